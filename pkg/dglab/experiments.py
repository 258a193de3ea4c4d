"""Leave-one-domain-out runs, the ablation grid and its summary tables."""
import dataclasses
import json
import logging
import math
import multiprocessing
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import to_mapping
from .datagen import MANIFEST, Dataset, Variant
from .errors import ConfigurationError, DegenerateInputError
from .features import FeatureDump, domain_overlap_score, export_features
from .losses import BOUNDARY_TARGET_PARTNER
from .metrics import METRIC_NAMES, TABLE_HEADERS, MetricsReport, binarize, evaluate_cases
from .model import Backbone, Network, load_checkpoint
from .trainer import TRAINER_STATE, AblationArm, BaclArm, EmaArm, TrainConfig, train

logger = logging.getLogger(__name__)

ARM_RESULT = "arm_result.json"


def library_versions() -> Dict[str, str]:
    import matplotlib
    import scipy
    import sklearn
    import tensorflow as tf

    return {
        "dglab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "tensorflow": tf.__version__,
        "scikit-learn": sklearn.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(
    out_dir: str,
    command: str,
    config: Optional[TrainConfig] = None,
    dataset: Optional[Dataset] = None,
    extra: Optional[Dict] = None,
    filename: str = MANIFEST,
) -> str:
    manifest = {
        "command": command,
        "argv": list(sys.argv),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "versions": library_versions(),
    }
    if config is not None:
        manifest["config"] = to_mapping(config)
        manifest["boundary_target_partner"] = BOUNDARY_TARGET_PARTNER
    if dataset is not None:
        manifest["dataset"] = {"root": os.path.abspath(dataset.root), "content_digest": dataset.digest()}
    manifest.update(extra or {})

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, filename)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


# ---------------------------------------------------------------------------
# Checkpoints and evaluation
# ---------------------------------------------------------------------------

def resolve_checkpoint(path: str) -> str:
    """Accept a run directory or a checkpoint directory."""
    final = os.path.join(path, "checkpoints", "final")
    if os.path.isdir(final):
        return final
    if os.path.exists(os.path.join(path, f"{Network.STUDENT.value}.json")):
        return path
    raise ConfigurationError(f"no checkpoint found at {path}", "checkpoint")


def _trainer_state(checkpoint_dir: str) -> Dict:
    state_path = os.path.join(checkpoint_dir, TRAINER_STATE)
    if not os.path.exists(state_path):
        return {}
    with open(state_path, "r", encoding="utf-8") as f:
        return json.load(f)


def default_network(checkpoint_dir: str) -> Network:
    return Network(_trainer_state(checkpoint_dir).get("evaluated_network", Network.TEACHER.value))


def default_domains(checkpoint: str, dataset: Dataset) -> List[int]:
    """The run's held-out domain when the checkpoint records one, else every domain."""
    held_out = _trainer_state(resolve_checkpoint(checkpoint)).get("held_out")
    if held_out is None:
        return list(dataset.domains)
    if held_out not in dataset.domains:
        raise ConfigurationError(f"held-out domain {held_out} of {checkpoint} not in dataset", "held_out")
    return [held_out]


def load_network(checkpoint: str, network: Optional[Network] = None) -> Tuple[Backbone, Network]:
    directory = resolve_checkpoint(checkpoint)
    network = network or default_network(directory)
    model, _ = load_checkpoint(directory, network.value)
    return model, network


def evaluate_network(
    model: Backbone, dataset: Dataset, domains: Sequence[int], threshold: float = 0.5, label: str = ""
) -> MetricsReport:
    def predict(images: np.ndarray) -> np.ndarray:
        probs, _ = model(images)
        return probs.numpy()

    return evaluate_cases(predict, dataset.samples(domains), threshold, label=label)


def evaluate(
    checkpoint: str,
    dataset: Dataset,
    held_out: Sequence[int],
    network: Optional[Network] = None,
    threshold: float = 0.5,
) -> MetricsReport:
    model, network = load_network(checkpoint, network)
    logger.info("Evaluating %s network on domains %s", network.value, list(held_out))
    return evaluate_network(model, dataset, held_out, threshold, label=network.value)



@dataclass(frozen=True)
class SegmentationCase:
    case_id: str
    image: np.ndarray
    mask: np.ndarray
    predictions: Dict[str, np.ndarray]


def segmentation_cases(
    checkpoints: Dict[str, str],
    dataset: Dataset,
    domains: Sequence[int],
    max_cases: int = 4,
    threshold: float = 0.5,
) -> List[SegmentationCase]:
    """Binary predictions of each labelled run's evaluated network on the first ``max_cases`` samples."""
    if max_cases < 1:
        raise ConfigurationError("must be >= 1", "cases")
    models = {label: load_network(path)[0] for label, path in checkpoints.items()}
    cases = []
    for sample in list(dataset.samples(domains))[:max_cases]:
        predictions = {}
        for label, model in models.items():
            probs, _ = model(sample.image.data[np.newaxis])
            predictions[label] = binarize(probs.numpy()[0], threshold)
        cases.append(SegmentationCase(sample.case_id, sample.image.data, sample.mask.data, predictions))
    return cases


# ---------------------------------------------------------------------------
# Single arm and the ablation grid
# ---------------------------------------------------------------------------

def run_arm(config: TrainConfig, dataset_root: str, held_out: int, out_dir: str, progress: bool = False) -> Dict:
    """Train one arm with one held-out domain, then score it; the result is also written to disk."""
    dataset = Dataset.open(dataset_root)
    arm = config.ablation_arm
    write_manifest(out_dir, "train", config, dataset, extra={"held_out": held_out})

    result = train(config, dataset, held_out, out_dir, progress=progress)
    evaluated = result.state.teacher if arm.evaluated_network is Network.TEACHER else result.state.student
    report = evaluate_network(evaluated, dataset, [held_out], label=arm.label)
    report.write_json(os.path.join(out_dir, "metrics.json"))

    dump = export_features({Network.TEACHER: result.state.teacher}, list(dataset.samples()), seed=config.seed)
    dump.meta.update({"arm": arm.label, "seed": config.seed, "held_out": held_out})
    dump.save(os.path.join(out_dir, "features_teacher"))

    try:
        overlap = domain_overlap_score(dump)
    except DegenerateInputError as exc:
        logger.warning("Overlap score skipped: %s", exc)
        overlap = float("nan")

    outcome = {
        "arm": arm.label,
        "seed": config.seed,
        "held_out": held_out,
        "metrics": report.mean(),
        "overlap": overlap,
        "steps": result.state.step,
        "teacher_updates": result.state.teacher_updates,
        "run_dir": out_dir,
    }
    with open(os.path.join(out_dir, ARM_RESULT), "w", encoding="utf-8") as f:
        json.dump(outcome, f, indent=2)
    logger.info("%s seed %d held-out %d: DSC %.4f", arm.label, config.seed, held_out, outcome["metrics"]["dsc"])
    return outcome


def _run_job(job: Tuple[TrainConfig, str, int, str]) -> Dict:
    return run_arm(*job)


@dataclass(frozen=True)
class AblationGrid:
    arms: Tuple[AblationArm, ...]
    seeds: Tuple[int, ...] = (0, 1, 2)
    held_out: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if not self.arms:
            raise ConfigurationError("need at least one arm", "arms")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigurationError("arms must be unique", "arms")
        if not self.seeds:
            raise ConfigurationError("need at least one seed", "seeds")

    @classmethod
    def full(cls, seeds: Sequence[int] = (0, 1, 2), held_out: Optional[Sequence[int]] = None) -> "AblationGrid":
        """Every EMA arm crossed with every contrastive arm."""
        arms = tuple(
            AblationArm(e, b)
            for e, b in product(EmaArm, (BaclArm.BACL_V, BaclArm.BACL_B, BaclArm.BACL))
        )
        return cls(arms, tuple(seeds), tuple(held_out) if held_out is not None else None)


def arm_dirname(arm: AblationArm) -> str:
    return f"{arm.ema.value}__{arm.bacl.value}"


def run_ablation(
    grid: AblationGrid, base_config: TrainConfig, dataset_root: str, out_dir: str, workers: int = 1
) -> Dict:
    dataset = Dataset.open(dataset_root)
    held_out = list(grid.held_out) if grid.held_out is not None else dataset.domains
    missing = sorted(set(held_out) - set(dataset.domains))
    if missing:
        raise ConfigurationError(f"domains {missing} not in dataset", "held_out")

    jobs = []
    for arm, seed, h in product(grid.arms, grid.seeds, held_out):
        cfg = dataclasses.replace(base_config, ablation_arm=arm, seed=seed)
        run_dir = os.path.join(out_dir, arm_dirname(arm), f"seed_{seed}", f"held_out_{h}")
        jobs.append((cfg, dataset_root, h, run_dir))

    write_manifest(
        out_dir, "ablate", base_config, dataset,
        extra={"arms": [a.label for a in grid.arms], "seeds": list(grid.seeds), "held_out": held_out},
    )
    logger.info("Running %d jobs with %d worker(s)", len(jobs), workers)

    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]

    summary = summarize(results)
    write_summary(summary, out_dir)
    return summary


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def directional_checks(results: Sequence[Dict]) -> Dict:
    """Soft ordering checks between EMA arms; reported, never asserted."""
    by_arm: Dict[str, List[Dict]] = {}
    for r in results:
        by_arm.setdefault(r["arm"], []).append(r)

    def dsc_by_seed(label: str) -> Dict[int, float]:
        seeds: Dict[int, List[float]] = {}
        for r in by_arm.get(label, []):
            seeds.setdefault(r["seed"], []).append(r["metrics"]["dsc"])
        return {s: _mean(v) for s, v in seeds.items()}

    checks = {}
    for bacl in BaclArm:
        labels = {e: AblationArm(e, bacl).label for e in EmaArm}
        if not all(label in by_arm for label in labels.values()):
            continue
        none, plain, gated = (dsc_by_seed(labels[e]) for e in (EmaArm.NO_EMA, EmaArm.EMA, EmaArm.GS_EMA))
        seeds = sorted(set(none) & set(plain) & set(gated))
        passing = [s for s in seeds if gated[s] >= none[s] + 0.02 and gated[s] >= plain[s]]
        needed = math.ceil(2 * len(seeds) / 3)
        overlap_gated = _mean([r["overlap"] for r in by_arm[labels[EmaArm.GS_EMA]]])
        overlap_plain = _mean([r["overlap"] for r in by_arm[labels[EmaArm.EMA]]])
        checks[bacl.name] = {
            "dsc_ordering": {"seeds": seeds, "passing_seeds": passing, "passed": bool(seeds) and len(passing) >= needed},
            "overlap_ordering": {
                "gs_ema": overlap_gated,
                "ema": overlap_plain,
                "passed": overlap_gated >= overlap_plain,
            },
        }
        for name, check in checks[bacl.name].items():
            if not check["passed"]:
                logger.warning("Directional check %s failed for %s; investigate before trusting the grid", name, bacl.name)
    return checks


def summarize(results: Sequence[Dict]) -> Dict:
    """Reduce per-run results to one row per arm (means over seeds and held-out domains)."""
    rows = []
    for label in dict.fromkeys(r["arm"] for r in results):
        runs = [r for r in results if r["arm"] == label]
        row = {"arm": label, "runs": len(runs)}
        for name in METRIC_NAMES:
            row[name] = _mean([r["metrics"][name] for r in runs])
        row["overlap"] = _mean([r["overlap"] for r in runs])
        rows.append(row)
    return {"rows": rows, "directional": directional_checks(results), "results": list(results)}


def format_summary_tsv(summary: Dict) -> str:
    lines = ["\t".join(["arm"] + [TABLE_HEADERS[n] for n in METRIC_NAMES])]
    for row in summary["rows"]:
        lines.append("\t".join([row["arm"]] + [f"{100 * row[n]:.2f}" for n in METRIC_NAMES]))
    return "\n".join(lines) + "\n"


def write_summary(summary: Dict, out_dir: str) -> Tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    tsv = os.path.join(out_dir, "summary.tsv")
    with open(tsv, "w", encoding="utf-8") as f:
        f.write(format_summary_tsv(summary))
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return tsv, path


def collect_results(out_dir: str) -> List[Dict]:
    """Re-read every finished arm result below ``out_dir``."""
    results = []
    for dirpath, _dirs, files in sorted(os.walk(out_dir)):
        if ARM_RESULT in files:
            with open(os.path.join(dirpath, ARM_RESULT), "r", encoding="utf-8") as f:
                results.append(json.load(f))
    return results


def export_run_features(
    checkpoint: str,
    dataset: Dataset,
    domains: Optional[Sequence[int]] = None,
    networks: Sequence[Network] = (Network.TEACHER,),
    variants: Sequence[Variant] = (Variant.SOURCE,),
    seed: int = 0,
) -> FeatureDump:
    directory = resolve_checkpoint(checkpoint)
    models = {n: load_checkpoint(directory, n.value)[0] for n in networks}
    samples = list(dataset.samples(domains))
    dump = export_features(models, samples, variants, seed=seed)
    dump.meta.update({"checkpoint": os.path.abspath(directory), "domains": sorted({s.domain_id for s in samples})})
    return dump
