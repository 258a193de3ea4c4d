import json
import os

import pytest
from click.testing import CliRunner

from dglab.cli import cli
from dglab.datagen import Dataset
from dglab.features import FeatureDump

TINY_CONFIG = """\
epochs: 1
batch_size: 2
checkpoint_every: 1
ablation_arm: GS_EMA,BACL
backbone:
  in_shape: [16, 16, 16]
  base_channels: 4
  depth: 2
  latent_channels: 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    env = {"DGLAB_DATA_DIR": str(root / "data"), "DGLAB_RUNS_DIR": str(root / "runs"), "DGLAB_WORKERS": "1"}
    config = root / "tiny.yaml"
    config.write_text(TINY_CONFIG)
    return root, env, str(config)


def invoke(env, *args):
    return CliRunner().invoke(cli, list(args), env=env, catch_exceptions=False)


@pytest.fixture(scope="module")
def dataset_dir(workspace):
    root, env, _ = workspace
    out = str(root / "ds")
    result = invoke(env, "generate-data", "--out", out, "--domains", "2", "--samples", "4", "--shape", "16",
                    "--aneurysm-radius", "2", "2", "--seed", "3")
    assert result.exit_code == 0, result.output
    assert "8 samples in 2 domains" in result.output
    return out


@pytest.fixture(scope="module")
def run_dir(workspace, dataset_dir):
    root, env, config = workspace
    out = str(root / "run")
    result = invoke(env, "train", "--config", config, "--dataset", dataset_dir, "--held-out", "1", "--out", out)
    assert result.exit_code == 0, result.output
    assert "GS_EMA,BACL held-out 1" in result.output
    return out


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def test_generate_data_writes_manifest(dataset_dir):
    manifest = read_json(os.path.join(dataset_dir, "manifest.json"))
    assert manifest["command"] == "generate-data"
    assert manifest["seed"] == 3
    assert manifest["dataset"]["content_digest"] == Dataset.open(dataset_dir).digest()


def test_generate_data_refuses_occupied_directory(workspace, dataset_dir):
    _, env, _ = workspace
    result = invoke(env, "generate-data", "--out", dataset_dir, "--shape", "16", "--aneurysm-radius", "2", "2")
    assert result.exit_code == 1
    assert "not empty" in result.output


def test_train_writes_run_directory(run_dir):
    for name in ("manifest.json", "config.json", "metrics.json", "arm_result.json", "run_log.jsonl",
                 "features_teacher.f32", "features_teacher.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["boundary_target_partner"] == "teacher_target"
    assert manifest["held_out"] == 1
    assert len(manifest["dataset"]["content_digest"]) == 40
    assert "tensorflow" in manifest["versions"]
    with open(os.path.join(run_dir, "arm_result.json"), encoding="utf-8") as f:
        outcome = json.load(f)
    assert outcome["steps"] == 2
    assert 0.0 <= outcome["overlap"] <= 1.0


def test_malformed_config_names_the_field(workspace, dataset_dir, tmp_path):
    _, env, _ = workspace
    bad = tmp_path / "bad.yaml"
    bad.write_text("backbone:\n  depth: 1\n")
    result = invoke(env, "train", "--config", str(bad), "--dataset", dataset_dir, "--held-out", "0",
                    "--out", str(tmp_path / "run"))
    assert result.exit_code == 1
    assert "backbone.depth" in result.output


def test_evaluate_run(workspace, dataset_dir, run_dir, tmp_path):
    _, env, _ = workspace
    out = str(tmp_path / "eval")
    result = invoke(env, "evaluate", "--checkpoint", run_dir, "--dataset", dataset_dir, "--held-out", "1", "--out", out)
    assert result.exit_code == 0, result.output
    assert ["case", "DSC", "Sen", "Jac", "VS"] in [line.split() for line in result.output.splitlines()]
    assert os.path.exists(os.path.join(out, "metrics.json"))


def test_evaluate_defaults_to_held_out_domain(workspace, dataset_dir, run_dir):
    _, env, _ = workspace
    result = invoke(env, "evaluate", "--checkpoint", run_dir, "--dataset", dataset_dir)
    assert result.exit_code == 0, result.output
    out = os.path.join(run_dir, "evaluation")
    assert read_json(os.path.join(out, "manifest.json"))["held_out"] == [1]
    cases = read_json(os.path.join(out, "metrics.json"))["cases"]
    assert len(cases) == 4
    assert all(c["case_id"].startswith("domain_1/") for c in cases)


def test_evaluate_missing_checkpoint(workspace, dataset_dir, tmp_path):
    _, env, _ = workspace
    result = invoke(env, "evaluate", "--checkpoint", str(tmp_path), "--dataset", dataset_dir)
    assert result.exit_code != 0
    assert "no checkpoint" in result.output


def test_export_features_and_plot(workspace, dataset_dir, run_dir, tmp_path):
    _, env, _ = workspace
    stem = str(tmp_path / "dump")
    result = invoke(env, "export-features", "--checkpoint", run_dir, "--dataset", dataset_dir, "--all-domains",
                    "--networks", "student,teacher", "--out", stem)
    assert result.exit_code == 0, result.output
    assert "16 rows" in result.output
    assert "domain overlap score" in result.output
    assert len(FeatureDump.load(stem)) == 16
    assert read_json(f"{stem}.manifest.json")["command"] == "export-features"

    held = str(tmp_path / "held")
    result = invoke(env, "export-features", "--checkpoint", run_dir, "--dataset", dataset_dir,
                    "--networks", "student,teacher", "--out", held)
    assert result.exit_code == 0, result.output
    assert "8 rows" in result.output
    assert set(FeatureDump.load(held).domains.tolist()) == {1}

    plots = str(tmp_path / "plots")
    result = invoke(env, "plot", "--dump", f"gs_ema={stem}", "--log", f"gs_ema={os.path.join(run_dir, 'run_log.jsonl')}",
                    "--segmentation", f"gs_ema={run_dir}", "--dataset", dataset_dir, "--cases", "2", "--out", plots)
    assert result.exit_code == 0, result.output
    for name in ("embedding_pca.png", "training_curves.png", "segmentation.png"):
        assert os.path.exists(os.path.join(plots, name)), name
    assert read_json(os.path.join(plots, "manifest.json"))["segmentations"] == [f"gs_ema={run_dir}"]


def test_segmentation_plot_needs_dataset(workspace, run_dir, tmp_path):
    _, env, _ = workspace
    result = invoke(env, "plot", "--segmentation", f"gs_ema={run_dir}", "--out", str(tmp_path))
    assert result.exit_code == 2


def test_ablate_two_arms(workspace, dataset_dir, tmp_path):
    _, env, config = workspace
    out = str(tmp_path / "ablation")
    result = invoke(env, "ablate", "--config", config, "--dataset", dataset_dir, "--arm", "GS_EMA,BACL",
                    "--arm", "EMA,BACL", "--seed", "0", "--held-out", "1", "--out", out)
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    lines = lines[lines.index("arm\tDSC\tSen\tJac\tVS"):]
    assert [line.split("\t")[0] for line in lines[1:3]] == ["GS_EMA,BACL", "EMA,BACL"]
    assert os.path.exists(os.path.join(out, "gs_ema__bacl", "seed_0", "held_out_1", "arm_result.json"))

    with open(os.path.join(out, "summary.tsv"), encoding="utf-8") as f:
        assert f.read().splitlines() == lines[:3]

    again = invoke(env, "ablate", "--summarize-only", "--out", out)
    assert again.exit_code == 0, again.output
    rebuilt = again.output.splitlines()
    rebuilt = rebuilt[rebuilt.index(lines[0]) + 1:]
    assert sorted(rebuilt[:2]) == sorted(lines[1:3])


def test_ablate_needs_config_unless_summarizing(workspace, tmp_path):
    _, env, _ = workspace
    result = invoke(env, "ablate", "--out", str(tmp_path))
    assert result.exit_code == 2
