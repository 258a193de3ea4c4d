"""Segmentation and boundary-aware contrastive losses.

Everything here is written with TensorFlow ops so the training step can
differentiate through it; the eager-only checks are skipped when traced.
"""
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import tensorflow as tf

from .datagen import Variant
from .errors import ConfigurationError, DegenerateInputError
from .model import FeatureTensor, Network

EPSILON = 1e-7

# Partner of the student's target-variant boundary in the positive set:
# the teacher's encoding of the same transformed instance. Recorded in
# every run manifest.
BOUNDARY_TARGET_PARTNER = "teacher_target"

Pair = Tuple[tf.Tensor, tf.Tensor]


@dataclass(frozen=True)
class MaskSpec:
    cutoff_fraction: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 < self.cutoff_fraction < 1.0:
            raise ConfigurationError(f"must be in (0, 1), got {self.cutoff_fraction}", "cutoff_fraction")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.25
    lambda2: float = 0.5

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ConfigurationError("must be nonnegative", name)


@dataclass
class PairSet:
    positives: List[Pair] = field(default_factory=list)
    negatives: List[Pair] = field(default_factory=list)

    @property
    def n_pos(self) -> int:
        return len(self.positives)

    @property
    def n_neg(self) -> int:
        return len(self.negatives)


def _is_eager() -> bool:
    return tf.executing_eagerly()


def dce_loss(p, y, eps: float = EPSILON) -> tf.Tensor:
    """Dice plus cross-entropy, averaged over the batch.

    Accepts (D, H, W) or (B, D, H, W). The cross-entropy term only scores
    foreground voxels, so an all-background target leaves just the dice term.

    The log reads ``log(clip(p, eps, 1))`` rather than ``log(p + eps)``: a perfect
    binary prediction scores exactly 0, and voxels with ``p < eps`` get no
    cross-entropy gradient.
    """
    p = tf.convert_to_tensor(p)
    y = tf.cast(y, p.dtype)
    if p.shape != y.shape:
        raise ConfigurationError(f"prediction {p.shape} and target {y.shape} differ", "shape")
    if p.shape.rank == 3:
        p, y = p[tf.newaxis], y[tf.newaxis]
    axes = list(range(1, p.shape.rank))

    intersection = tf.reduce_sum(p * y, axis=axes)
    dice = 1.0 - (2.0 * intersection + eps) / (tf.reduce_sum(p, axis=axes) + tf.reduce_sum(y, axis=axes) + eps)
    ce = -tf.reduce_mean(y * tf.math.log(tf.clip_by_value(p, eps, 1.0)), axis=axes)
    return tf.reduce_mean(dice + ce)


def cosine_similarity(u, v) -> tf.Tensor:
    u = tf.reshape(u, [-1])
    v = tf.reshape(v, [-1])
    nu = tf.norm(u)
    nv = tf.norm(v)
    if _is_eager() and (float(nu) == 0.0 or float(nv) == 0.0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    return tf.reduce_sum(u * v) / (nu * nv)


def contrastive_loss_from_similarities(pos, neg, temperature: float = 1.0) -> tf.Tensor:
    """-log(sum exp(pos) / (sum exp(pos) + sum exp(neg))) in log-sum-exp form."""
    pos = tf.reshape(tf.convert_to_tensor(pos), [-1])
    neg = tf.reshape(tf.cast(neg, pos.dtype), [-1])
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ConfigurationError("need at least one positive and one negative pair", "pairs")
    if temperature <= 0:
        raise ConfigurationError(f"must be positive, got {temperature}", "temperature")
    pos = pos / temperature
    neg = neg / temperature
    return tf.reduce_logsumexp(tf.concat([pos, neg], axis=0)) - tf.reduce_logsumexp(pos)


def contrastive_loss(pairs: PairSet, temperature: float = 1.0) -> tf.Tensor:
    if pairs.n_pos == 0 or pairs.n_neg == 0:
        raise ConfigurationError("need at least one positive and one negative pair", "pairs")
    pos = tf.stack([cosine_similarity(a, b) for a, b in pairs.positives])
    neg = tf.stack([cosine_similarity(a, b) for a, b in pairs.negatives])
    return contrastive_loss_from_similarities(pos, neg, temperature)


def high_pass_mask(shape: Sequence[int], cutoff_fraction: float) -> np.ndarray:
    """Frequency mask in unshifted (FFT) order: zero on the central low-frequency cube."""
    centered = np.ones(tuple(shape), dtype=np.float64)
    block = []
    for n in shape:
        side = min(n, math.ceil(cutoff_fraction * n))
        start = n // 2 - side // 2
        block.append(slice(start, start + side))
    centered[tuple(block)] = 0.0
    return np.fft.ifftshift(centered)


def boundary_extract(z: Union[FeatureTensor, tf.Tensor], mask: MaskSpec = MaskSpec()):
    """High-pass filter the three trailing spatial axes of a latent tensor.

    A FeatureTensor in gives a FeatureTensor out with the same tags.
    """
    data = z.data if isinstance(z, FeatureTensor) else tf.convert_to_tensor(z)
    complex_dtype = tf.complex128 if data.dtype == tf.float64 else tf.complex64
    m = tf.constant(high_pass_mask(data.shape[-3:], mask.cutoff_fraction), dtype=complex_dtype)
    spectrum = tf.signal.fft3d(tf.cast(data, complex_dtype))
    out = tf.cast(tf.math.real(tf.signal.ifft3d(spectrum * m)), data.dtype)
    if isinstance(z, FeatureTensor):
        return FeatureTensor(out, z.network, z.variant)
    return out


def _check_tags(z: FeatureTensor, network: Network, variant: Variant, role: str) -> None:
    if z.network != network or z.variant != variant:
        raise ConfigurationError(
            f"expected {network.name}/{variant.name} features, got {z.network.name}/{z.variant.name}", role
        )


def _pairs_for(zs_s, zs_t, zt_s, zt_t) -> PairSet:
    pairs = PairSet()
    for b in range(zs_s.shape[0]):
        pairs.positives += [(zs_s[b], zt_s[b]), (zs_t[b], zt_t[b])]
        pairs.negatives += [
            (zs_s[b], zs_t[b]),
            (zt_s[b], zt_t[b]),
            (zs_s[b], zt_t[b]),
            (zt_s[b], zs_t[b]),
        ]
    return pairs


def build_pair_sets(
    z_stu_src: FeatureTensor,
    z_stu_trg: FeatureTensor,
    z_tea_src: FeatureTensor,
    z_tea_trg: FeatureTensor,
    mask: MaskSpec = MaskSpec(),
) -> Tuple[PairSet, PairSet]:
    """Volume and boundary pair sets, pooled over the batch.

    Each item contributes two positives (same variant across networks) and
    four negatives (different variants).
    """
    _check_tags(z_stu_src, Network.STUDENT, Variant.SOURCE, "z_stu_src")
    _check_tags(z_stu_trg, Network.STUDENT, Variant.TARGET, "z_stu_trg")
    _check_tags(z_tea_src, Network.TEACHER, Variant.SOURCE, "z_tea_src")
    _check_tags(z_tea_trg, Network.TEACHER, Variant.TARGET, "z_tea_trg")

    feats = [z_stu_src, z_stu_trg, z_tea_src, z_tea_trg]
    shapes = {tuple(f.data.shape) for f in feats}
    if len(shapes) != 1:
        raise ConfigurationError(f"latent shapes differ: {sorted(shapes)}", "shape")

    volumes = [f.data if f.data.shape.rank == 5 else f.data[tf.newaxis] for f in feats]
    boundaries = [boundary_extract(v, mask) for v in volumes]
    return _pairs_for(*volumes), _pairs_for(*boundaries)


def total_loss(supervised: Sequence, l_c_z, l_c_b, w: LossWeights = LossWeights()):
    """Weighted sum of the four segmentation terms and the two contrastive terms."""
    if len(supervised) != 4:
        raise ConfigurationError(f"expected 4 supervised terms, got {len(supervised)}", "supervised")
    return w.lambda1 * sum(supervised) + w.lambda2 * (l_c_z + l_c_b)
