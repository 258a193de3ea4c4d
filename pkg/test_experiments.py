import json
import os

import pytest

from dglab.errors import ConfigurationError
from dglab.experiments import (
    AblationGrid,
    arm_dirname,
    collect_results,
    directional_checks,
    format_summary_tsv,
    summarize,
    write_manifest,
    write_summary,
)
from dglab.trainer import AblationArm, BaclArm, EmaArm, TrainConfig


def result(arm: str, seed: int, dsc: float, overlap: float = 0.5):
    return {
        "arm": arm,
        "seed": seed,
        "held_out": 0,
        "metrics": {"dsc": dsc, "sen": dsc, "jac": dsc / (2 - dsc), "vs": 1.0},
        "overlap": overlap,
    }


def test_full_grid_has_nine_arms():
    grid = AblationGrid.full()
    assert len(grid.arms) == 9
    assert grid.seeds == (0, 1, 2)
    assert AblationArm(EmaArm.NO_EMA, BaclArm.BACL_V) in grid.arms
    assert all(a.bacl is not BaclArm.NONE for a in grid.arms)


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        AblationGrid(())
    with pytest.raises(ConfigurationError):
        AblationGrid((AblationArm(), AblationArm()))


def test_arm_dirname():
    assert arm_dirname(AblationArm(EmaArm.GS_EMA, BaclArm.BACL_B)) == "gs_ema__bacl_b"


def test_summary_rows_average_over_runs():
    summary = summarize([result("GS_EMA,BACL", 0, 0.6), result("GS_EMA,BACL", 1, 0.8), result("EMA,BACL", 0, 0.5)])
    rows = {row["arm"]: row for row in summary["rows"]}
    assert rows["GS_EMA,BACL"]["dsc"] == pytest.approx(0.7)
    assert rows["GS_EMA,BACL"]["runs"] == 2
    tsv = format_summary_tsv(summary).splitlines()
    assert tsv[0] == "arm\tDSC\tSen\tJac\tVS"
    assert tsv[1].split("\t")[:2] == ["GS_EMA,BACL", "70.00"]
    assert summary["directional"] == {}


def test_directional_checks_pass_and_flag():
    results = []
    for seed in range(3):
        results += [result("NO_EMA,BACL", seed, 0.50, 0.2), result("EMA,BACL", seed, 0.55, 0.3)]
    results += [result("GS_EMA,BACL", 0, 0.60, 0.6), result("GS_EMA,BACL", 1, 0.60, 0.6), result("GS_EMA,BACL", 2, 0.40, 0.6)]
    checks = directional_checks(results)["BACL"]
    assert checks["dsc_ordering"]["passing_seeds"] == [0, 1]
    assert checks["dsc_ordering"]["passed"] is True
    assert checks["overlap_ordering"]["passed"] is True

    flagged = [r for r in results if not (r["arm"] == "GS_EMA,BACL" and r["seed"] == 1)]
    flagged.append(result("GS_EMA,BACL", 1, 0.51, 0.1))
    checks = directional_checks(flagged)["BACL"]
    assert checks["dsc_ordering"]["passing_seeds"] == [0]
    assert checks["dsc_ordering"]["passed"] is False


def test_summary_round_trip_through_disk(tmp_path):
    results = [result("GS_EMA,BACL_V", 0, 0.7), result("EMA,BACL_V", 0, 0.6)]
    for r in results:
        run_dir = tmp_path / r["arm"].replace(",", "__")
        run_dir.mkdir()
        (run_dir / "arm_result.json").write_text(json.dumps(r))
    collected = collect_results(str(tmp_path))
    assert sorted(r["arm"] for r in collected) == ["EMA,BACL_V", "GS_EMA,BACL_V"]

    tsv, path = write_summary(summarize(collected), str(tmp_path / "out"))
    assert os.path.exists(tsv)
    with open(path, encoding="utf-8") as f:
        assert len(json.load(f)["rows"]) == 2


def test_manifest_records_config(tmp_path):
    path = write_manifest(str(tmp_path), "train", TrainConfig(), extra={"held_out": 3})
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["command"] == "train"
    assert manifest["config"]["ablation_arm"] == {"ema": "GS_EMA", "bacl": "BACL"}
    assert manifest["config"]["ema"]["alpha"] == 0.9999
    assert manifest["boundary_target_partner"] == "teacher_target"
    assert manifest["held_out"] == 3
    assert "dataset" not in manifest
