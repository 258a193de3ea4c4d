"""Gradient-agreement gate and the exponential-moving-average teacher update."""
import enum
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, InternalError
from .vectors import GradientVector, ParamVector

REFERENCE_ALPHAS = (0.9999, 0.9)


class GateRule(str, enum.Enum):
    PROSE = "prose"  # update iff <g_src, g_trg> > 0
    PSEUDOCODE = "pseudocode"  # update iff <g_src, g_trg> <= 0


class Granularity(str, enum.Enum):
    GLOBAL = "global"
    PER_LAYER = "per_layer"


@dataclass(frozen=True)
class EMAConfig:
    alpha: float = 0.9999
    gate_rule: GateRule = GateRule.PROSE
    granularity: Granularity = Granularity.GLOBAL

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"must be in (0, 1), got {self.alpha}", "alpha")

    @property
    def reference_alpha(self) -> bool:
        return self.alpha in REFERENCE_ALPHAS


@dataclass(frozen=True)
class GateDecision:
    inner_product: float
    cos_angle: float
    updated: bool
    layer_updates: Optional[Tuple[bool, ...]] = None
    forced: Optional[bool] = None

    @property
    def applied(self) -> bool:
        """Whether the teacher moves. ``forced`` overrides the gate; ``updated`` stays the raw verdict."""
        return self.updated if self.forced is None else self.forced

    def to_dict(self) -> Dict:
        data = {"inner_product": self.inner_product, "cos_angle": self.cos_angle, "updated": self.updated}
        if self.layer_updates is not None:
            data["layer_updates"] = list(self.layer_updates)
        if self.forced is not None:
            data["forced"] = self.forced
        data["applied"] = self.applied
        return data


def _opens(inner_product: float, rule: GateRule) -> bool:
    if rule is GateRule.PROSE:
        return inner_product > 0.0
    return inner_product <= 0.0


def gate(g_src: GradientVector, g_trg: GradientVector, cfg: EMAConfig = EMAConfig()) -> GateDecision:
    a, b = g_src.values, g_trg.values
    if a.shape != b.shape:
        raise InternalError(f"gradient lengths differ: {a.size} vs {b.size}")
    if not (a.any() or b.any()):
        raise DegenerateInputError("both gradients are zero")

    inner = float(np.dot(a, b))
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    cos = inner / (na * nb) if na > 0 and nb > 0 else 0.0

    if cfg.granularity is Granularity.PER_LAYER:
        layout = g_src.layout or g_trg.layout
        if layout is None:
            raise InternalError("per-layer gating needs a parameter layout")
        layers = tuple(_opens(float(np.dot(a[sl], b[sl])), cfg.gate_rule) for _, sl, _ in layout.slices())
        return GateDecision(inner, cos, any(layers), layers)

    return GateDecision(inner, cos, _opens(inner, cfg.gate_rule))


def ema_update(
    theta_tea: ParamVector, theta_stu: ParamVector, decision: GateDecision, cfg: EMAConfig = EMAConfig()
) -> ParamVector:
    if theta_tea.layout.digest != theta_stu.layout.digest:
        raise InternalError("teacher and student parameter layouts differ")
    if not decision.applied:
        return theta_tea

    alpha = cfg.alpha
    tea = theta_tea.values.astype(np.float64)
    stu = theta_stu.values.astype(np.float64)
    blended = alpha * tea + (1.0 - alpha) * stu

    if decision.forced is None and decision.layer_updates is not None:
        out = tea.copy()
        for open_, (_, sl, _) in zip(decision.layer_updates, theta_tea.layout.slices()):
            if open_:
                out[sl] = blended[sl]
        blended = out

    return ParamVector(blended.astype(theta_tea.values.dtype), theta_tea.layout)
