"""Teacher-student training loop with the gated EMA teacher update."""
import dataclasses
import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import tensorflow as tf
from tqdm import tqdm

from . import configure_determinism
from .config import to_mapping
from .datagen import Dataset, DomainSample, ShiftRanges, Variant, apply_domain_shift, draw_domain_spec
from .errors import ConfigurationError, DegenerateInputError, InternalError, NonFiniteLossError
from .gsema import EMAConfig, GateDecision, ema_update, gate
from .losses import LossWeights, MaskSpec, build_pair_sets, contrastive_loss, dce_loss, total_loss
from .model import Backbone, BackboneConfig, FeatureTensor, Network, flatten_gradient, save_checkpoint
from .vectors import Origin

logger = logging.getLogger(__name__)

RUN_LOG = "run_log.jsonl"
TRAINER_STATE = "trainer_state.json"


class EmaArm(str, enum.Enum):
    NO_EMA = "no_ema"
    EMA = "ema"
    GS_EMA = "gs_ema"


class BaclArm(str, enum.Enum):
    NONE = "none"
    BACL_V = "bacl_v"
    BACL_B = "bacl_b"
    BACL = "bacl"


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


@dataclass(frozen=True)
class AblationArm:
    ema: EmaArm = EmaArm.GS_EMA
    bacl: BaclArm = BaclArm.BACL

    @classmethod
    def parse(cls, text: str) -> "AblationArm":
        """Parse ``EMA_ARM,BACL_ARM``, e.g. ``GS_EMA,BACL``."""
        parts = [p.strip().upper() for p in text.split(",")]
        if len(parts) != 2:
            raise ConfigurationError(f"expected EMA_ARM,BACL_ARM, got {text!r}", "arm")
        try:
            return cls(EmaArm[parts[0]], BaclArm[parts[1]])
        except KeyError as exc:
            raise ConfigurationError(f"unknown arm component {exc.args[0]}", "arm") from None

    @property
    def label(self) -> str:
        return f"{self.ema.name},{self.bacl.name}"

    @property
    def uses_volume_contrast(self) -> bool:
        return self.bacl in (BaclArm.BACL_V, BaclArm.BACL)

    @property
    def uses_boundary_contrast(self) -> bool:
        return self.bacl in (BaclArm.BACL_B, BaclArm.BACL)

    @property
    def evaluated_network(self) -> Network:
        # Without EMA the teacher never moves, so the student is the model.
        return Network.STUDENT if self.ema is EmaArm.NO_EMA else Network.TEACHER


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.001
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    batch_size: int = 2
    ema: EMAConfig = field(default_factory=EMAConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ablation_arm: AblationArm = field(default_factory=AblationArm)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    shift: ShiftRanges = field(default_factory=ShiftRanges)
    cutoff_fraction: float = 0.25
    temperature: float = 1.0
    optimizer: Optimizer = Optimizer.SGD
    momentum: float = 0.9
    mix_domains: bool = False
    deterministic: bool = False
    checkpoint_every: int = 1
    max_steps_per_epoch: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("epochs", "lr_decay_every", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError("must be >= 1", name)
        if self.base_lr <= 0:
            raise ConfigurationError(f"must be positive, got {self.base_lr}", "base_lr")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError(f"must be in (0, 1], got {self.lr_decay_factor}", "lr_decay_factor")
        if self.temperature <= 0:
            raise ConfigurationError(f"must be positive, got {self.temperature}", "temperature")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"must be in [0, 1), got {self.momentum}", "momentum")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ConfigurationError("must be >= 1 when set", "max_steps_per_epoch")
        MaskSpec(self.cutoff_fraction)

    def learning_rate(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class RunRecord:
    step: int
    epoch: int
    l_stu_src: float
    l_stu_trg: float
    l_tea_src: float
    l_tea_trg: float
    l_c_z: Optional[float]
    l_c_b: Optional[float]
    total: float
    gate: Optional[GateDecision]
    lr: float
    teacher_updates: int = 0

    @property
    def supervised(self) -> List[float]:
        return [self.l_stu_src, self.l_stu_trg, self.l_tea_src, self.l_tea_trg]

    def recompute_total(self, weights: LossWeights) -> float:
        return total_loss(self.supervised, self.l_c_z or 0.0, self.l_c_b or 0.0, weights)

    def to_dict(self) -> Dict:
        data = {
            "step": self.step,
            "epoch": self.epoch,
            "L_stu_src": self.l_stu_src,
            "L_stu_trg": self.l_stu_trg,
            "L_tea_src": self.l_tea_src,
            "L_tea_trg": self.l_tea_trg,
        }
        if self.l_c_z is not None:
            data["L_c_z"] = self.l_c_z
        if self.l_c_b is not None:
            data["L_c_b"] = self.l_c_b
        data["total"] = self.total
        if self.gate is not None:
            data["gate"] = self.gate.to_dict()
        data["lr"] = self.lr
        data["teacher_updates"] = self.teacher_updates
        return data


class StudentOptimizer:
    """Plain SGD by default; momentum and Adam come from Keras."""

    def __init__(self, config: TrainConfig) -> None:
        self.kind = config.optimizer
        if self.kind is Optimizer.SGD:
            self._keras = None
        elif self.kind is Optimizer.MOMENTUM:
            self._keras = tf.keras.optimizers.SGD(learning_rate=config.base_lr, momentum=config.momentum)
        else:
            self._keras = tf.keras.optimizers.Adam(learning_rate=config.base_lr)

    def apply(self, grads: Sequence[tf.Tensor], variables: Sequence[tf.Variable], lr: float) -> None:
        if self._keras is None:
            for g, v in zip(grads, variables):
                v.assign_sub(tf.cast(lr, v.dtype) * g)
            return
        self._keras.learning_rate = lr
        self._keras.apply_gradients(zip(grads, variables))


@dataclass
class TrainState:
    config: TrainConfig
    student: Backbone
    teacher: Backbone
    optimizer: StudentOptimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    teacher_updates: int = 0
    held_out: Optional[int] = None


def init_state(config: TrainConfig) -> TrainState:
    student = Backbone(config.backbone, seed=config.seed, name="student")
    return TrainState(
        config=config,
        student=student,
        teacher=student.clone(name="teacher"),
        optimizer=StudentOptimizer(config),
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 1])),
    )


def _stack(samples: Sequence[DomainSample], dtype: str):
    images = np.stack([s.image.data for s in samples])
    masks = np.stack([s.mask.data for s in samples])
    return tf.constant(images, dtype=dtype), tf.constant(masks, dtype=dtype)


def train_step(batch: Sequence[DomainSample], state: TrainState, force_gate: Optional[bool] = None) -> RunRecord:
    """One mini-batch: losses, gated teacher update, then one student step.

    ``force_gate`` overrides the gate decision; it is a test hook. The EMA arm always
    forces the update, and its log keeps the raw verdict next to ``forced``.
    """
    if not batch:
        raise ConfigurationError("batch must not be empty", "batch")
    if any(s.variant is not Variant.SOURCE for s in batch):
        raise ConfigurationError("training batches hold SOURCE samples only", "batch")
    cfg = state.config
    arm = cfg.ablation_arm
    dtype = cfg.backbone.dtype

    targets = [apply_domain_shift(s, draw_domain_spec(s.domain_id, state.rng, cfg.shift)) for s in batch]
    x_src, y_src = _stack(batch, dtype)
    x_trg, y_trg = _stack(targets, dtype)

    p_tea_src, z_tea_src = (tf.stop_gradient(t) for t in state.teacher(x_src))
    p_tea_trg, z_tea_trg = (tf.stop_gradient(t) for t in state.teacher(x_trg))

    variables = state.student.weights
    with tf.GradientTape(persistent=True) as tape:
        p_stu_src, z_stu_src = state.student(x_src)
        p_stu_trg, z_stu_trg = state.student(x_trg)

        l_stu_src = dce_loss(p_stu_src, y_src)
        l_stu_trg = dce_loss(p_stu_trg, y_trg)
        l_tea_src = dce_loss(p_tea_src, y_src)
        l_tea_trg = dce_loss(p_tea_trg, y_trg)

        l_c_z = l_c_b = None
        if arm.bacl is not BaclArm.NONE:
            volume_pairs, boundary_pairs = build_pair_sets(
                FeatureTensor(z_stu_src, Network.STUDENT, Variant.SOURCE),
                FeatureTensor(z_stu_trg, Network.STUDENT, Variant.TARGET),
                FeatureTensor(z_tea_src, Network.TEACHER, Variant.SOURCE),
                FeatureTensor(z_tea_trg, Network.TEACHER, Variant.TARGET),
                MaskSpec(cfg.cutoff_fraction),
            )
            if arm.uses_volume_contrast:
                l_c_z = contrastive_loss(volume_pairs, cfg.temperature)
            if arm.uses_boundary_contrast:
                l_c_b = contrastive_loss(boundary_pairs, cfg.temperature)

        supervised = [l_stu_src, l_stu_trg, l_tea_src, l_tea_trg]
        total = total_loss(
            supervised,
            l_c_z if l_c_z is not None else 0.0,
            l_c_b if l_c_b is not None else 0.0,
            cfg.weights,
        )

    lr = cfg.learning_rate(state.epoch)
    parts = [float(v) for v in supervised]
    c_z = None if l_c_z is None else float(l_c_z)
    c_b = None if l_c_b is None else float(l_c_b)
    record = RunRecord(
        state.step, state.epoch, *parts, c_z, c_b,
        total=total_loss(parts, c_z or 0.0, c_b or 0.0, cfg.weights),
        gate=None, lr=lr, teacher_updates=state.teacher_updates,
    )
    if not all(math.isfinite(v) for v in parts + [c_z or 0.0, c_b or 0.0]):
        del tape
        diagnostic = {**record.to_dict(), "error": "non-finite loss", "case_ids": [s.case_id for s in batch]}
        raise NonFiniteLossError(f"non-finite loss at step {state.step}", diagnostic)

    g_total = tape.gradient(total, variables)
    if any(g is not None for g in tape.gradient(total, state.teacher.weights)):
        raise InternalError("gradient reached the teacher")
    if any(g is None for g in g_total):
        raise InternalError("student parameter without gradient")

    decision = None
    if arm.ema is not EmaArm.NO_EMA:
        g_src = flatten_gradient(tape.gradient(l_stu_src, variables), state.student.layout, Origin.SRC)
        g_trg = flatten_gradient(tape.gradient(l_stu_trg, variables), state.student.layout, Origin.TRG)
        forced = force_gate
        if forced is None and arm.ema is EmaArm.EMA:
            forced = True
        try:
            decision = gate(g_src, g_trg, cfg.ema)
        except DegenerateInputError:
            if forced is None:
                raise
            decision = GateDecision(0.0, 0.0, False)
        if forced is not None:
            decision = dataclasses.replace(decision, forced=forced)
        if decision.applied:
            blended = ema_update(state.teacher.get_params(), state.student.get_params(), decision, cfg.ema)
            state.teacher.set_params(blended)
            state.teacher_updates += 1
    del tape

    state.optimizer.apply(g_total, variables, lr)
    state.step += 1
    return dataclasses.replace(record, gate=decision, teacher_updates=state.teacher_updates)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class RunLog:
    """Append-only JSONL writer, one record per line."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._file = None

    def __enter__(self) -> "RunLog":
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        self._file = open(self.path, "a", encoding="utf-8")
        return self

    def write(self, record: Dict) -> None:
        self._file.write(json.dumps(record) + "\n")
        self._file.flush()

    def __exit__(self, *exc) -> None:
        self._file.close()


def read_run_log(path: str) -> List[Dict]:
    if not os.path.exists(path):
        raise ConfigurationError(f"run log not found: {path}", "log")
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def make_batches(
    samples_by_domain: Dict[int, List[DomainSample]], batch_size: int, rng: np.random.Generator, mix_domains: bool
) -> List[List[DomainSample]]:
    """Shuffled mini-batches; without ``mix_domains`` every batch comes from one domain."""
    if mix_domains:
        pools = [[s for d in sorted(samples_by_domain) for s in samples_by_domain[d]]]
    else:
        pools = [samples_by_domain[d] for d in sorted(samples_by_domain)]

    batches = []
    for pool in pools:
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            batches.append([pool[i] for i in order[start:start + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def write_checkpoint(state: TrainState, directory: str) -> str:
    extra = {"step": state.step, "epoch": state.epoch}
    save_checkpoint(directory, Network.STUDENT.value, state.student, extra)
    save_checkpoint(directory, Network.TEACHER.value, state.teacher, extra)
    trainer_state = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": state.config.learning_rate(state.epoch),
        "teacher_updates": state.teacher_updates,
        "ablation_arm": state.config.ablation_arm.label,
        "evaluated_network": state.config.ablation_arm.evaluated_network.value,
        "held_out": state.held_out,
        "rng_state": state.rng.bit_generator.state,
    }
    with open(os.path.join(directory, TRAINER_STATE), "w", encoding="utf-8") as f:
        json.dump(trainer_state, f, indent=2)
    return directory


@dataclass
class TrainResult:
    run_dir: str
    checkpoint_dir: str
    records: List[RunRecord]
    state: TrainState


def train(
    config: TrainConfig, dataset: Dataset, held_out_domain: int, run_dir: str, progress: bool = True
) -> TrainResult:
    """Train on every domain except ``held_out_domain``."""
    if held_out_domain not in dataset.domains:
        raise ConfigurationError(f"domain {held_out_domain} not in dataset (have {dataset.domains})", "held_out")
    train_domains = [d for d in dataset.domains if d != held_out_domain]
    if not train_domains:
        raise ConfigurationError("no training domains left after holding one out", "held_out")

    samples = {d: list(dataset.samples([d])) for d in train_domains}
    shape = samples[train_domains[0]][0].image.shape
    if tuple(shape) != tuple(config.backbone.in_shape):
        raise ConfigurationError(f"dataset volumes are {shape}, backbone expects {config.backbone.in_shape}", "backbone.in_shape")

    if config.deterministic:
        configure_determinism(config.seed)
    if not config.ema.reference_alpha:
        logger.warning("EMA alpha %s is outside the reference values", config.ema.alpha)

    state = init_state(config)
    state.held_out = held_out_domain
    records: List[RunRecord] = []
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(to_mapping(config), f, indent=2)

    logger.info(
        "Training %s on domains %s (held out %d), %d parameters",
        config.ablation_arm.label, train_domains, held_out_domain, state.student.num_parameters,
    )
    checkpoints = os.path.join(run_dir, "checkpoints")
    with RunLog(os.path.join(run_dir, RUN_LOG)) as log:
        for epoch in range(config.epochs):
            state.epoch = epoch
            batches = make_batches(samples, config.batch_size, state.rng, config.mix_domains)
            if config.max_steps_per_epoch is not None:
                batches = batches[:config.max_steps_per_epoch]
            for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False):
                try:
                    record = train_step(batch, state)
                except NonFiniteLossError as exc:
                    log.write(exc.record)
                    logger.error("Aborting run: %s", exc)
                    raise
                log.write(record.to_dict())
                records.append(record)

            if (epoch + 1) % config.checkpoint_every == 0:
                write_checkpoint(state, os.path.join(checkpoints, f"epoch_{epoch:03d}"))
            logger.info(
                "epoch %d: total %.4f, teacher updates %d/%d",
                epoch, records[-1].total if records else float("nan"), state.teacher_updates, state.step,
            )

    final = write_checkpoint(state, os.path.join(checkpoints, "final"))
    return TrainResult(run_dir, final, records, state)
