"""Synthetic multi-domain vessel/aneurysm phantoms and the source-to-target shift pipeline.

Every generator here is a pure function of its seed: the same seed and
DomainSpec always give bit-identical volumes, so datasets can be rebuilt
instead of shipped.
"""
import dataclasses
import enum
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

Shape3 = Tuple[int, int, int]

BACKGROUND_LEVEL = 0.1
VESSEL_LEVEL = 0.6
ANEURYSM_LEVEL = 0.9
MAX_FOREGROUND_FRACTION = 0.05
MANIFEST = "manifest.json"


class Variant(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or min(data.shape) < 8:
            raise ConfigurationError(f"volume must be 3D with every axis >= 8, got {data.shape}", "shape")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"spacing must be three positive values, got {self.spacing}", "spacing")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("volume intensities must be finite", "data")

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelMask:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ConfigurationError(f"mask must be 3D, got {data.shape}", "shape")
        if data.size and data.max() > 1:
            raise ConfigurationError("mask values must be 0 or 1", "data")

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)

    @property
    def foreground_fraction(self) -> float:
        return float(self.data.sum()) / float(self.data.size)


@dataclass(frozen=True)
class DomainSpec:
    """Acquisition appearance of one domain, or one simulated source->target shift."""

    domain_id: int = 0
    intensity_gain: float = 1.0
    intensity_offset: float = 0.0
    noise_sigma: float = 0.0
    smoothing_sigma: float = 0.0
    histogram_shift: float = 0.0
    bias_field_amplitude: float = 0.0
    resolution_scale: float = 1.0
    rng_seed: int = 0
    geometric: bool = False
    max_rotation_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self) -> None:
        if self.domain_id < 0:
            raise ConfigurationError("must be >= 0", "domain_id")
        if self.intensity_gain <= 0:
            raise ConfigurationError(f"must be positive, got {self.intensity_gain}", "intensity_gain")
        for name in ("noise_sigma", "smoothing_sigma", "bias_field_amplitude", "max_rotation_deg"):
            if getattr(self, name) < 0:
                raise ConfigurationError("must be nonnegative", name)
        if self.bias_field_amplitude >= 1:
            raise ConfigurationError("must be < 1 to keep the bias field positive", "bias_field_amplitude")
        if self.resolution_scale <= 0:
            raise ConfigurationError("must be positive", "resolution_scale")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"invalid range {self.scale_range}", "scale_range")

    def parameters(self) -> Tuple[float, ...]:
        return (
            self.intensity_gain,
            self.intensity_offset,
            self.noise_sigma,
            self.smoothing_sigma,
            self.histogram_shift,
            self.bias_field_amplitude,
            self.resolution_scale,
        )

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data["scale_range"] = list(self.scale_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "DomainSpec":
        data = dict(data)
        data["scale_range"] = tuple(data.get("scale_range", (0.9, 1.1)))
        return cls(**data)


@dataclass(frozen=True)
class ShiftRanges:
    """Default ranges the shift parameters are drawn from. Not calibrated against clinical data."""

    max_rotation_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    gain_range: Tuple[float, float] = (0.7, 1.4)
    offset_range: Tuple[float, float] = (-0.1, 0.1)
    noise_range: Tuple[float, float] = (0.0, 0.1)
    smoothing_range: Tuple[float, float] = (0.0, 1.0)
    histogram_range: Tuple[float, float] = (-0.3, 0.3)
    bias_range: Tuple[float, float] = (0.0, 0.3)
    resolution_range: Tuple[float, float] = (1.0, 1.5)

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple) and value[0] > value[1]:
                raise ConfigurationError(f"lower bound exceeds upper bound: {value}", f.name)
        if self.gain_range[0] <= 0:
            raise ConfigurationError("gain must stay positive", "gain_range")
        if self.bias_range[1] >= 1:
            raise ConfigurationError("bias amplitude must stay below 1", "bias_range")


@dataclass(frozen=True, eq=False)
class DomainSample:
    image: Volume
    mask: LabelMask
    domain_id: int
    variant: Variant = Variant.SOURCE
    seed: Optional[int] = None
    case_id: str = ""

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ConfigurationError(f"image {self.image.shape} and mask {self.mask.shape} differ", "shape")


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

def sphere_voxel_count(radius: float) -> int:
    """Number of integer lattice points within ``radius`` of the origin."""
    r = int(math.floor(radius))
    zz, yy, xx = np.ogrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return int(np.count_nonzero(zz ** 2 + yy ** 2 + xx ** 2 <= radius ** 2))


def _bezier(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    t = t[:, None]
    points = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    tangents = 2 * (1 - t) * (p1 - p0) + 2 * t * (p2 - p1)
    return points, tangents


def generate_phantom(
    seed: int,
    shape: Shape3 = (32, 32, 32),
    aneurysm_radius_range: Tuple[float, float] = (2.0, 4.0),
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    vessel_radius_range: Tuple[float, float] = (1.5, 2.5),
) -> DomainSample:
    """One curved tube (the vessel) with an attached sphere (the aneurysm).

    The mask labels the aneurysm only. The aneurysm centre sits on an
    integer voxel, so the labelled voxel count equals ``sphere_voxel_count``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ConfigurationError(f"every axis must be >= 16, got {shape}", "shape")
    r_lo, r_hi = (float(r) for r in aneurysm_radius_range)
    if not 1.0 <= r_lo <= r_hi <= min(shape) / 4.0:
        raise ConfigurationError(
            f"radius range must lie within [1, {min(shape) / 4.0}], got {aneurysm_radius_range}",
            "aneurysm_radius_range",
        )
    total = float(np.prod(shape))
    if sphere_voxel_count(r_hi) / total >= MAX_FOREGROUND_FRACTION:
        raise ConfigurationError(
            f"shape {shape} too small for a radius-{r_hi} aneurysm below "
            f"{MAX_FOREGROUND_FRACTION:.0%} foreground",
            "shape",
        )

    rng = np.random.default_rng(seed)
    dims = np.asarray(shape, dtype=np.float64)

    # Vessel centerline: quadratic Bezier crossing the volume along one axis
    axis = int(rng.integers(3))
    p0 = rng.uniform(0.3, 0.7, size=3) * (dims - 1)
    p2 = rng.uniform(0.3, 0.7, size=3) * (dims - 1)
    p0[axis], p2[axis] = 0.0, dims[axis] - 1
    p1 = rng.uniform(0.2, 0.8, size=3) * (dims - 1)
    t = np.linspace(0.0, 1.0, 8 * max(shape))
    points, tangents = _bezier(p0, p1, p2, t)
    vessel_radius = float(rng.uniform(*vessel_radius_range))

    centerline = np.zeros(shape, dtype=bool)
    idx = np.clip(np.rint(points).astype(int), 0, dims.astype(int) - 1)
    centerline[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    vessel = ndimage.distance_transform_edt(~centerline) <= vessel_radius

    # Aneurysm: sphere budding off the vessel wall
    radius = float(rng.uniform(r_lo, r_hi))
    k = int(rng.integers(int(0.35 * len(t)), int(0.65 * len(t))))
    tangent = tangents[k] / (np.linalg.norm(tangents[k]) + 1e-12)
    direction = rng.normal(size=3)
    direction -= direction.dot(tangent) * tangent
    direction /= np.linalg.norm(direction) + 1e-12
    centre = points[k] + direction * (vessel_radius + 0.5 * radius)
    margin = int(math.ceil(radius))
    centre = np.clip(np.rint(centre).astype(int), margin, np.asarray(shape) - 1 - margin)

    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    aneurysm = (zz - centre[0]) ** 2 + (yy - centre[1]) ** 2 + (xx - centre[2]) ** 2 <= radius ** 2

    image = np.full(shape, BACKGROUND_LEVEL, dtype=np.float64)
    image[vessel] = VESSEL_LEVEL
    image[aneurysm] = ANEURYSM_LEVEL
    image += rng.normal(0.0, 0.02, size=shape)
    image = ndimage.gaussian_filter(image, sigma=0.6)

    return DomainSample(
        image=Volume(image.astype(np.float32), spacing=tuple(float(s) for s in spacing)),
        mask=LabelMask(aneurysm.astype(np.uint8)),
        domain_id=0,
        variant=Variant.SOURCE,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# Domain shift
# ---------------------------------------------------------------------------

def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / (np.linalg.norm(axis) + 1e-12)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _bias_field(shape: Shape3, coefficients: np.ndarray) -> np.ndarray:
    z, y, x = (np.linspace(-1.0, 1.0, n) for n in shape)
    z, y, x = np.meshgrid(z, y, x, indexing="ij")
    terms = (x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    field = sum(c * term for c, term in zip(coefficients, terms))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def shift_arrays(image: np.ndarray, mask: np.ndarray, spec: DomainSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Geometric -> intensity -> smoothing -> noise -> histogram -> bias field.

    All random draws happen up front in a fixed order so enabling or
    disabling one stage never changes the randomness of another.
    """
    rng = np.random.default_rng(spec.rng_seed)
    rot_axis = rng.normal(size=3)
    rot_angle = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    scale = rng.uniform(*spec.scale_range)
    noise = rng.normal(size=image.shape)
    bias_coefficients = rng.uniform(-1.0, 1.0, size=9)

    x = image.astype(np.float64)
    y = mask

    if spec.geometric:
        matrix = _rotation_matrix(rot_axis, rot_angle).T / scale
        centre = (np.asarray(image.shape, dtype=np.float64) - 1) / 2.0
        offset = centre - matrix @ centre
        x = ndimage.affine_transform(x, matrix, offset=offset, order=1, mode="nearest")
        y = ndimage.affine_transform(y, matrix, offset=offset, order=0, mode="constant", cval=0)
    if spec.resolution_scale != 1.0:
        coarse = ndimage.zoom(x, 1.0 / spec.resolution_scale, order=1, mode="nearest")
        x = ndimage.zoom(coarse, np.asarray(image.shape) / np.asarray(coarse.shape), order=1, mode="nearest")

    if spec.intensity_gain != 1.0 or spec.intensity_offset != 0.0:
        x = x * spec.intensity_gain + spec.intensity_offset

    if spec.smoothing_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=spec.smoothing_sigma)

    if spec.noise_sigma > 0:
        span = float(x.max() - x.min()) or 1.0
        x = x + noise * spec.noise_sigma * span

    if spec.histogram_shift != 0.0:
        lo, hi = float(x.min()), float(x.max())
        if hi > lo:
            x = lo + (hi - lo) * ((x - lo) / (hi - lo)) ** math.exp(spec.histogram_shift)

    if spec.bias_field_amplitude > 0:
        x = x * (1.0 + spec.bias_field_amplitude * _bias_field(image.shape, bias_coefficients))

    return x.astype(np.float32), np.ascontiguousarray(y, dtype=np.uint8)


def apply_domain_shift(sample: DomainSample, spec: DomainSpec) -> DomainSample:
    if sample.variant != Variant.SOURCE:
        raise ConfigurationError("domain shift applies to SOURCE samples only", "variant")
    image, mask = shift_arrays(sample.image.data, sample.mask.data, spec)
    return DomainSample(
        image=Volume(image, spacing=sample.image.spacing),
        mask=LabelMask(mask),
        domain_id=sample.domain_id,
        variant=Variant.TARGET,
        seed=sample.seed,
        case_id=sample.case_id,
    )


def draw_domain_spec(domain_id: int, rng: np.random.Generator, ranges: ShiftRanges = ShiftRanges()) -> DomainSpec:
    return DomainSpec(
        domain_id=domain_id,
        intensity_gain=float(rng.uniform(*ranges.gain_range)),
        intensity_offset=float(rng.uniform(*ranges.offset_range)),
        noise_sigma=float(rng.uniform(*ranges.noise_range)),
        smoothing_sigma=float(rng.uniform(*ranges.smoothing_range)),
        histogram_shift=float(rng.uniform(*ranges.histogram_range)),
        bias_field_amplitude=float(rng.uniform(*ranges.bias_range)),
        resolution_scale=float(rng.uniform(*ranges.resolution_range)),
        rng_seed=int(rng.integers(2 ** 31 - 1)),
        geometric=True,
        max_rotation_deg=ranges.max_rotation_deg,
        scale_range=ranges.scale_range,
    )


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

def _sample_seed(master_seed: int, domain: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, domain, index]).generate_state(1)[0])


def _sample_paths(root: str, domain: int, index: int) -> Tuple[str, str, str]:
    stem = os.path.join(root, f"domain_{domain}", f"sample_{index}")
    return f"{stem}.img.raw", f"{stem}.msk.raw", f"{stem}.json"


def write_sample(root: str, index: int, sample: DomainSample, spec: DomainSpec) -> None:
    img_path, msk_path, meta_path = _sample_paths(root, sample.domain_id, index)
    os.makedirs(os.path.dirname(img_path), exist_ok=True)
    sample.image.data.astype("<f4").tofile(img_path)
    sample.mask.data.astype(np.uint8).tofile(msk_path)
    meta = {
        "shape": list(sample.image.shape),
        "spacing": list(sample.image.spacing),
        "domain_id": sample.domain_id,
        "domain_spec": spec.to_dict(),
        "seed": sample.seed,
        "variant": sample.variant.name,
        "foreground_fraction": sample.mask.foreground_fraction,
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def content_digest(root: str) -> str:
    """Git-style tree digest: sha1 over (path, blob sha1) of every file but the root manifest."""
    entries = []
    for dirpath, _dirs, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            if name == MANIFEST and os.path.samefile(dirpath, root):
                continue
            with open(path, "rb") as f:
                content = f.read()
            blob = hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()
            entries.append(f"{os.path.relpath(path, root).replace(os.sep, '/')} {blob}")
    tree = "\n".join(sorted(entries)).encode("utf-8")
    return hashlib.sha1(b"tree %d\0" % len(tree) + tree).hexdigest()


class Dataset:
    """Read-side handle over a dataset directory."""

    def __init__(self, root: str, index: Dict[int, List[int]], meta: Dict) -> None:
        self.root = root
        self._index = index
        self.meta = meta

    @classmethod
    def open(cls, root: str) -> "Dataset":
        if not os.path.isdir(root):
            raise ConfigurationError(f"dataset not found: {root}", "dataset")
        index: Dict[int, List[int]] = {}
        for entry in os.listdir(root):
            if not entry.startswith("domain_"):
                continue
            domain = int(entry.split("_", 1)[1])
            ids = sorted(
                int(name[len("sample_"):-len(".json")])
                for name in os.listdir(os.path.join(root, entry))
                if name.startswith("sample_") and name.endswith(".json")
            )
            index[domain] = ids
        if not index:
            raise ConfigurationError(f"no domain_<k> directories under {root}", "dataset")
        meta = {}
        meta_path = os.path.join(root, "dataset.json")
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="utf-8") as f:
                meta = json.load(f)
        return cls(root, dict(sorted(index.items())), meta)

    @property
    def domains(self) -> List[int]:
        return list(self._index)

    def sample_ids(self, domain: int) -> List[int]:
        if domain not in self._index:
            raise ConfigurationError(f"domain {domain} not in dataset (have {self.domains})", "domain")
        return list(self._index[domain])

    def __len__(self) -> int:
        return sum(len(ids) for ids in self._index.values())

    def load(self, domain: int, index: int) -> DomainSample:
        img_path, msk_path, meta_path = _sample_paths(self.root, domain, index)
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        shape = tuple(meta["shape"])
        image = np.fromfile(img_path, dtype="<f4").reshape(shape)
        mask = np.fromfile(msk_path, dtype=np.uint8).reshape(shape)
        return DomainSample(
            image=Volume(image.astype(np.float32), spacing=tuple(meta["spacing"])),
            mask=LabelMask(mask),
            domain_id=int(meta["domain_id"]),
            variant=Variant[meta["variant"]],
            seed=meta.get("seed"),
            case_id=f"domain_{domain}/sample_{index}",
        )

    def samples(self, domains: Optional[Sequence[int]] = None) -> Iterator[DomainSample]:
        for domain in domains if domains is not None else self.domains:
            for index in self.sample_ids(domain):
                yield self.load(domain, index)

    def domain_spec(self, domain: int) -> DomainSpec:
        specs = self.meta.get("domain_specs", {})
        if str(domain) not in specs:
            raise ConfigurationError(f"no spec recorded for domain {domain}", "domain")
        return DomainSpec.from_dict(specs[str(domain)])

    def digest(self) -> str:
        return content_digest(self.root)


def build_dataset(
    root: str,
    num_domains: int,
    samples_per_domain: int,
    master_seed: int,
    shape: Shape3 = (32, 32, 32),
    aneurysm_radius_range: Tuple[float, float] = (2.0, 4.0),
    ranges: ShiftRanges = ShiftRanges(),
    workers: int = 1,
) -> Dataset:
    if num_domains < 2:
        raise ConfigurationError(f"need at least 2 domains, got {num_domains}", "num_domains")
    if samples_per_domain < 1:
        raise ConfigurationError("must be >= 1", "samples_per_domain")
    if os.path.isdir(root) and os.listdir(root):
        raise ConfigurationError(f"output directory exists and is not empty: {root}", "dataset")

    rng = np.random.default_rng(master_seed)
    specs: List[DomainSpec] = []
    for k in range(num_domains):
        spec = draw_domain_spec(k, rng, ranges)
        while any(spec.parameters() == other.parameters() for other in specs):
            spec = draw_domain_spec(k, rng, ranges)
        specs.append(spec)

    def render(job: Tuple[int, int]) -> DomainSample:
        k, i = job
        seed = _sample_seed(master_seed, k, i)
        phantom = generate_phantom(seed, shape, aneurysm_radius_range)
        spec = dataclasses.replace(specs[k], rng_seed=specs[k].rng_seed + i)
        image, mask = shift_arrays(phantom.image.data, phantom.mask.data, spec)
        return DomainSample(Volume(image, phantom.image.spacing), LabelMask(mask), k, Variant.SOURCE, seed)

    jobs = [(k, i) for k in range(num_domains) for i in range(samples_per_domain)]
    os.makedirs(root, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for (k, i), sample in zip(jobs, pool.map(render, jobs)):
            write_sample(root, i, sample, dataclasses.replace(specs[k], rng_seed=specs[k].rng_seed + i))

    meta = {
        "num_domains": num_domains,
        "samples_per_domain": samples_per_domain,
        "master_seed": master_seed,
        "shape": list(shape),
        "aneurysm_radius_range": list(aneurysm_radius_range),
        "domain_specs": {str(s.domain_id): s.to_dict() for s in specs},
    }
    with open(os.path.join(root, "dataset.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)

    logger.info("Wrote %d samples in %d domains to %s", len(jobs), num_domains, root)
    return Dataset.open(root)
