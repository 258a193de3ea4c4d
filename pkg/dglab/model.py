"""Small 3D encoder-decoder backbone shared by the student and the teacher.

Weights are plain ``tf.Variable`` objects in a fixed creation order, so the
flat parameter vector, the gradient vector and the checkpoint blob all share
one layout.
"""
import enum
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import tensorflow as tf

from .config import from_mapping, to_mapping
from .datagen import Variant, Volume
from .errors import ConfigurationError, InternalError
from .vectors import GradientVector, Origin, ParamLayout, ParamVector

logger = logging.getLogger(__name__)

ACTIVATIONS = {"relu": tf.nn.relu, "elu": tf.nn.elu}


class Network(str, enum.Enum):
    STUDENT = "student"
    TEACHER = "teacher"


@dataclass(frozen=True)
class BackboneConfig:
    in_shape: Tuple[int, int, int] = (32, 32, 32)
    base_channels: int = 8
    depth: int = 2
    latent_channels: int = 16
    channel_multiplier: int = 2
    kernel_size: int = 3
    activation: str = "relu"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.base_channels < 4:
            raise ConfigurationError(f"must be >= 4, got {self.base_channels}", "base_channels")
        if self.depth < 2:
            raise ConfigurationError(f"must be >= 2, got {self.depth}", "depth")
        if self.latent_channels < 1 or self.channel_multiplier < 1:
            raise ConfigurationError("channel counts must be positive", "latent_channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"must be a positive odd number, got {self.kernel_size}", "kernel_size")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"expected one of {sorted(ACTIVATIONS)}, got {self.activation!r}", "activation")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"expected float32 or float64, got {self.dtype!r}", "dtype")
        factor = 2 ** self.depth
        if len(self.in_shape) != 3 or any(n % factor or n < factor for n in self.in_shape):
            raise ConfigurationError(f"every axis must be a multiple of {factor}, got {self.in_shape}", "in_shape")

    def encoder_channels(self) -> List[int]:
        return [self.base_channels * self.channel_multiplier ** i for i in range(self.depth)]

    @property
    def latent_shape(self) -> Tuple[int, int, int, int]:
        factor = 2 ** self.depth
        return (self.latent_channels,) + tuple(n // factor for n in self.in_shape)


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Latent features, channels first: (C, D', H', W') or batched (B, C, D', H', W')."""

    data: tf.Tensor
    network: Network
    variant: Variant


@dataclass(frozen=True, eq=False)
class Prediction:
    probs: tf.Tensor


def _conv(x: tf.Tensor, kernel: tf.Tensor, bias: tf.Tensor) -> tf.Tensor:
    return tf.nn.conv3d(x, kernel, strides=[1, 1, 1, 1, 1], padding="SAME") + bias


def _downsample(x: tf.Tensor) -> tf.Tensor:
    return tf.nn.avg_pool3d(x, ksize=2, strides=2, padding="VALID")


def _upsample(x: tf.Tensor) -> tf.Tensor:
    for axis in (1, 2, 3):
        x = tf.repeat(x, 2, axis=axis)
    return x


def apply_backbone(
    config: BackboneConfig, weights: Sequence[tf.Tensor], images: tf.Tensor
) -> Tuple[tf.Tensor, tf.Tensor]:
    """Run the network on (B, D, H, W) images; returns probabilities and channels-first latent."""
    act = ACTIVATIONS[config.activation]
    w = iter(weights)
    x = images[..., tf.newaxis]

    skips = []
    for _ in range(config.depth):
        x = act(_conv(x, next(w), next(w)))
        skips.append(x)
        x = _downsample(x)

    z = act(_conv(x, next(w), next(w)))

    x = z
    for level in reversed(range(config.depth)):
        x = act(_conv(_upsample(x), next(w), next(w)) + skips[level])

    logits = _conv(x, next(w), next(w))[..., 0]
    return tf.sigmoid(logits), tf.transpose(z, [0, 4, 1, 2, 3])


def conv_shapes(config: BackboneConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Kernel shapes in creation order; each conv also owns a bias of its output width."""
    k = config.kernel_size
    channels = config.encoder_channels()
    shapes = []
    c_in = 1
    for i, c in enumerate(channels):
        shapes.append((f"enc{i}", (k, k, k, c_in, c)))
        c_in = c
    shapes.append(("bottleneck", (k, k, k, c_in, config.latent_channels)))
    c_in = config.latent_channels
    for i in reversed(range(config.depth)):
        shapes.append((f"dec{i}", (k, k, k, c_in, channels[i])))
        c_in = channels[i]
    shapes.append(("head", (1, 1, 1, c_in, 1)))
    return shapes


def layout_for(config: BackboneConfig) -> ParamLayout:
    entries = []
    for name, shape in conv_shapes(config):
        entries.append((f"{name}/kernel", shape))
        entries.append((f"{name}/bias", (shape[-1],)))
    return ParamLayout(tuple(entries))


class Backbone(tf.Module):
    def __init__(self, config: BackboneConfig, seed: int = 0, name: Optional[str] = None) -> None:
        super().__init__(name=name)
        self.config = config
        self.layout = layout_for(config)
        self.weights: List[tf.Variable] = []

        # He-normal kernels, zero biases
        rng = np.random.default_rng(seed)
        for conv, shape in conv_shapes(config):
            fan_in = int(np.prod(shape[:-1]))
            kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            self.weights.append(tf.Variable(kernel.astype(config.dtype), name=f"{conv}_kernel"))
            self.weights.append(tf.Variable(np.zeros(shape[-1], dtype=config.dtype), name=f"{conv}_bias"))

    @property
    def num_parameters(self) -> int:
        return self.layout.size

    def __call__(self, images: Union[np.ndarray, tf.Tensor]) -> Tuple[tf.Tensor, tf.Tensor]:
        images = tf.cast(images, self.config.dtype)
        if images.shape.rank == 3:
            images = images[tf.newaxis]
        if tuple(images.shape[1:]) != tuple(self.config.in_shape):
            raise ConfigurationError(f"expected volumes of shape {self.config.in_shape}, got {tuple(images.shape[1:])}", "in_shape")
        return apply_backbone(self.config, self.weights, images)

    def get_params(self) -> ParamVector:
        values = np.concatenate([v.numpy().ravel() for v in self.weights])
        return ParamVector(values, self.layout)

    def set_params(self, params: ParamVector) -> None:
        if params.layout.digest != self.layout.digest:
            raise InternalError("parameter layout does not match this network")
        for var, (_, sl, shape) in zip(self.weights, self.layout.slices()):
            var.assign(params.values[sl].reshape(shape).astype(self.config.dtype))

    def clone(self, name: Optional[str] = None) -> "Backbone":
        twin = Backbone(self.config, name=name)
        twin.set_params(self.get_params())
        return twin


def forward(
    config: BackboneConfig,
    params: ParamVector,
    image: Volume,
    network: Network = Network.STUDENT,
    variant: Variant = Variant.SOURCE,
) -> Tuple[Prediction, FeatureTensor]:
    """Stateless forward pass of one volume under the given parameter vector."""
    if params.layout.digest != layout_for(config).digest:
        raise InternalError("parameter vector does not match the backbone config")
    if tuple(image.shape) != tuple(config.in_shape):
        raise ConfigurationError(f"expected a volume of shape {config.in_shape}, got {image.shape}", "in_shape")
    weights = [tf.constant(v, dtype=config.dtype) for v in params.unflatten().values()]
    probs, latent = apply_backbone(config, weights, tf.constant(image.data[np.newaxis], dtype=config.dtype))
    return Prediction(probs[0]), FeatureTensor(latent[0], network, variant)


def flatten_gradient(
    grads: Sequence[Optional[tf.Tensor]], layout: ParamLayout, origin: Origin
) -> GradientVector:
    missing = [name for g, name in zip(grads, layout.names) if g is None]
    if missing:
        raise InternalError(f"no gradient for {', '.join(missing)}")
    values = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])
    return GradientVector(values, origin, layout)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory: str, name: str, network: Backbone, extra: Optional[Dict] = None) -> str:
    os.makedirs(directory, exist_ok=True)
    params = network.get_params()
    blob_path = os.path.join(directory, f"{name}.params.bin")
    with open(blob_path, "wb") as f:
        f.write(params.serialize())
    meta = {
        "config": to_mapping(network.config),
        "dtype": network.config.dtype,
        "layout": network.layout.to_list(),
        "layout_digest": network.layout.digest,
        **(extra or {}),
    }
    with open(os.path.join(directory, f"{name}.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    logger.debug("Saved %s (%d parameters) to %s", name, params.values.size, directory)
    return blob_path


def load_checkpoint(directory: str, name: str) -> Tuple[Backbone, Dict]:
    meta_path = os.path.join(directory, f"{name}.json")
    blob_path = os.path.join(directory, f"{name}.params.bin")
    if not (os.path.exists(meta_path) and os.path.exists(blob_path)):
        raise ConfigurationError(f"no checkpoint named {name!r} in {directory}", "checkpoint")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)

    network = Backbone(from_mapping(BackboneConfig, meta["config"]), name=name)
    if meta.get("layout_digest") != network.layout.digest:
        raise ConfigurationError("checkpoint layout does not match its backbone config", "checkpoint")
    with open(blob_path, "rb") as f:
        params = ParamVector.deserialize(f.read(), network.layout, meta["dtype"])
    network.set_params(params)
    return network, meta
