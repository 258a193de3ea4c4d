import functools
import logging
import os
import sys
from typing import Dict, Optional, Sequence

import click

from . import create_lab
from .config import load_train_config, to_mapping
from .datagen import Dataset, ShiftRanges, Variant, build_dataset
from .errors import LabError
from .model import Network

logger = logging.getLogger(__name__)


def _lab_errors(func):
    """Report library errors as clean CLI failures (exit code 1)."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except LabError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _parse_labelled(values: Sequence[str], what: str) -> Dict[str, str]:
    """``label=path`` pairs; a bare path is labelled by its directory name."""
    out = {}
    for value in values:
        label, sep, path = value.partition("=")
        if not sep:
            path = label
            label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        out[label] = path
    if not out:
        raise click.UsageError(f"give at least one --{what}")
    return out


def _arm_overrides(arm: Optional[str], seed: Optional[int], deterministic: bool) -> Dict:
    overrides = {"ablation_arm": arm, "seed": seed}
    if deterministic:
        overrides["deterministic"] = True
    return overrides


@click.group()
@click.option("--log-level", default=None, help="Override DGLAB_LOG_LEVEL.")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str]) -> None:
    """Domain-generalization lab: synthetic data, teacher-student training, ablations."""
    settings = create_lab()
    if log_level:
        logging.getLogger().setLevel(log_level.upper())
    ctx.obj = settings


@cli.command("generate-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output dataset directory.")
@click.option("--domains", default=4, show_default=True, type=int)
@click.option("--samples", default=10, show_default=True, type=int, help="Samples per domain.")
@click.option("--seed", default=0, show_default=True, type=int, help="Master seed.")
@click.option("--shape", default=32, show_default=True, type=int, help="Edge length of the cubic volumes.")
@click.option("--aneurysm-radius", nargs=2, default=(2.0, 4.0), show_default=True, type=float, help="Min and max aneurysm radius in voxels.")
@click.option("--workers", default=None, type=int, help="Rendering threads (default DGLAB_WORKERS).")
@click.pass_obj
@_lab_errors
def generate_data(
    settings, out_dir: str, domains: int, samples: int, seed: int, shape: int, aneurysm_radius, workers: Optional[int]
) -> None:
    from .experiments import write_manifest

    ranges = ShiftRanges()
    dataset = build_dataset(
        out_dir, domains, samples, seed, shape=(shape, shape, shape), aneurysm_radius_range=tuple(aneurysm_radius),
        ranges=ranges,
        workers=workers or settings.workers,
    )
    write_manifest(out_dir, "generate-data", dataset=dataset, extra={"seed": seed, "shift_ranges": to_mapping(ranges)})
    click.echo(f"{len(dataset)} samples in {len(dataset.domains)} domains, digest {dataset.digest()}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(file_okay=False))
@click.option("--held-out", required=True, type=int, help="Domain excluded from training.")
@click.option("--arm", default=None, help="EMA_ARM,BACL_ARM, e.g. GS_EMA,BACL.")
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--deterministic", is_flag=True)
@click.pass_obj
@_lab_errors
def train(settings, config_path, dataset_dir, held_out, arm, seed, out_dir, deterministic) -> None:
    from .experiments import arm_dirname, run_arm

    config = load_train_config(config_path, _arm_overrides(arm, seed, deterministic or settings.deterministic))
    out_dir = out_dir or os.path.join(
        settings.runs_dir, arm_dirname(config.ablation_arm), f"seed_{config.seed}", f"held_out_{held_out}"
    )
    outcome = run_arm(config, dataset_dir, held_out, out_dir, progress=sys.stderr.isatty())
    metrics = outcome["metrics"]
    click.echo(
        f"{outcome['arm']} held-out {held_out}: DSC {metrics['dsc']:.4f} Sen {metrics['sen']:.4f} "
        f"Jac {metrics['jac']:.4f} VS {metrics['vs']:.4f} overlap {outcome['overlap']:.4f} -> {out_dir}"
    )


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True), help="Run or checkpoint directory.")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(file_okay=False))
@click.option("--held-out", multiple=True, type=int, help="Domains to score (default: the run's held-out domain).")
@click.option("--network", type=click.Choice(["student", "teacher"]), default=None, help="Default: the arm's evaluated network.")
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="Default: <checkpoint>/evaluation.")
@click.pass_obj
@_lab_errors
def evaluate(settings, checkpoint, dataset_dir, held_out, network, threshold, out_dir) -> None:
    from .experiments import default_domains, evaluate as evaluate_checkpoint, write_manifest

    dataset = Dataset.open(dataset_dir)
    domains = list(held_out) or default_domains(checkpoint, dataset)
    report = evaluate_checkpoint(checkpoint, dataset, domains, Network(network) if network else None, threshold)
    click.echo(report.format_table())
    out_dir = out_dir or os.path.join(checkpoint, "evaluation")
    report.write_json(os.path.join(out_dir, "metrics.json"))
    write_manifest(out_dir, "evaluate", dataset=dataset, extra={"checkpoint": os.path.abspath(checkpoint), "held_out": domains})


@cli.command()
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_dir", default=None, type=click.Path(file_okay=False))
@click.option("--arm", "arms", multiple=True, help="EMA_ARM,BACL_ARM; repeat for several (default: full 3x3 grid).")
@click.option("--seed", "seeds", multiple=True, type=int, help="Repeat for several (default: 0 1 2).")
@click.option("--held-out", multiple=True, type=int, help="Repeat for several (default: every domain).")
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--workers", default=None, type=int, help="Parallel arm processes (default DGLAB_WORKERS).")
@click.option("--deterministic", is_flag=True)
@click.option("--summarize-only", is_flag=True, help="Rebuild the summary from finished runs under --out.")
@click.pass_obj
@_lab_errors
def ablate(settings, config_path, dataset_dir, arms, seeds, held_out, out_dir, workers, deterministic, summarize_only) -> None:
    from .experiments import AblationGrid, collect_results, format_summary_tsv, run_ablation, summarize, write_summary
    from .trainer import AblationArm

    out_dir = out_dir or os.path.join(settings.runs_dir, "ablation")
    if summarize_only:
        summary = summarize(collect_results(out_dir))
        write_summary(summary, out_dir)
    else:
        if not (config_path and dataset_dir):
            raise click.UsageError("--config and --dataset are required unless --summarize-only")
        config = load_train_config(config_path, _arm_overrides(None, None, deterministic or settings.deterministic))
        seed_list = tuple(seeds) or (0, 1, 2)
        held = tuple(held_out) or None
        if arms:
            grid = AblationGrid(tuple(AblationArm.parse(a) for a in arms), seed_list, held)
        else:
            grid = AblationGrid.full(seed_list, held)
        summary = run_ablation(grid, config, dataset_dir, out_dir, workers=workers or settings.workers)

    click.echo(format_summary_tsv(summary), nl=False)
    for bacl, checks in summary["directional"].items():
        for name, check in checks.items():
            click.echo(f"{bacl} {name}: {'ok' if check['passed'] else 'FLAGGED'}")


@cli.command("export-features")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(file_okay=False))
@click.option("--held-out", "domains", multiple=True, type=int, help="Domains to export (default: the run's held-out domain).")
@click.option("--all-domains", is_flag=True, help="Export every domain in the dataset.")
@click.option("--networks", default="teacher", show_default=True, help="Comma-separated: student,teacher.")
@click.option("--variants", default="source", show_default=True, help="Comma-separated: source,target.")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed for TARGET shifts.")
@click.option("--out", "out_stem", required=True, help="Output path stem (writes .f32 and .json).")
@click.pass_obj
@_lab_errors
def export_features(settings, checkpoint, dataset_dir, domains, all_domains, networks, variants, seed, out_stem) -> None:
    from .experiments import default_domains, export_run_features, write_manifest
    from .features import domain_overlap_score

    dataset = Dataset.open(dataset_dir)
    if all_domains:
        domains = dataset.domains
    domains = list(domains) or default_domains(checkpoint, dataset)
    dump = export_run_features(
        checkpoint,
        dataset,
        domains,
        [Network(n.strip().lower()) for n in networks.split(",")],
        [Variant(v.strip().lower()) for v in variants.split(",")],
        seed=seed,
    )
    dump.save(out_stem)
    write_manifest(
        os.path.dirname(os.path.abspath(out_stem)), "export-features", dataset=dataset,
        extra={"checkpoint": os.path.abspath(checkpoint), "domains": domains, "networks": networks, "variants": variants},
        filename=f"{os.path.basename(out_stem)}.manifest.json",
    )
    click.echo(f"{len(dump)} rows x {dump.matrix.shape[1]} features -> {out_stem}.f32")
    if len(set(dump.domains.tolist())) >= 2:
        try:
            click.echo(f"domain overlap score: {domain_overlap_score(dump):.4f}")
        except LabError as exc:
            logger.warning("Overlap score skipped: %s", exc)


@cli.command()
@click.option("--dump", "dumps", multiple=True, help="label=stem of a feature dump; repeatable.")
@click.option("--log", "logs", multiple=True, help="label=path of a run_log.jsonl; repeatable.")
@click.option("--segmentation", "segmentations", multiple=True, help="label=run or checkpoint directory; repeatable.")
@click.option("--dataset", "dataset_dir", default=None, type=click.Path(file_okay=False), help="Needed with --segmentation.")
@click.option("--held-out", "domains", multiple=True, type=int, help="Domains to draw (default: the first run's held-out domain).")
@click.option("--cases", default=4, show_default=True, type=int, help="Rows of the segmentation figure.")
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--embedding", type=click.Choice(["pca", "tsne"]), default="pca", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
@_lab_errors
def plot(settings, dumps, logs, segmentations, dataset_dir, domains, cases, threshold, embedding, seed, out_dir) -> None:
    from .experiments import default_domains, segmentation_cases, write_manifest
    from .features import FeatureDump
    from .plotting import plot_embedding, plot_segmentations, plot_training_curves

    if not (dumps or logs or segmentations):
        raise click.UsageError("give at least one --dump, --log or --segmentation")
    if segmentations and not dataset_dir:
        raise click.UsageError("--segmentation needs --dataset")
    if segmentations:
        runs = _parse_labelled(segmentations, "segmentation")
        dataset = Dataset.open(dataset_dir)
        domains = list(domains) or default_domains(next(iter(runs.values())), dataset)
        drawn = segmentation_cases(runs, dataset, domains, cases, threshold)
        click.echo(plot_segmentations(drawn, os.path.join(out_dir, "segmentation.png")))
    if dumps:
        loaded = {label: FeatureDump.load(stem) for label, stem in _parse_labelled(dumps, "dump").items()}
        click.echo(plot_embedding(loaded, os.path.join(out_dir, f"embedding_{embedding}.png"), embedding, seed))
    if logs:
        click.echo(plot_training_curves(_parse_labelled(logs, "log"), os.path.join(out_dir, "training_curves.png")))
    write_manifest(
        out_dir, "plot",
        extra={"dumps": list(dumps), "logs": list(logs), "segmentations": list(segmentations), "embedding": embedding},
    )


def main() -> None:
    cli()
