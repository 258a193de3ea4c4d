"""Latent feature export and the domain-overlap score."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from sklearn.metrics import balanced_accuracy_score
from sklearn.neighbors import NearestCentroid

from .datagen import DomainSample, ShiftRanges, Variant, apply_domain_shift, draw_domain_spec
from .errors import ConfigurationError, DegenerateInputError
from .model import Backbone, Network

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_DOMAIN = 3


@dataclass(frozen=True)
class FeatureLabel:
    domain_id: int
    variant: Variant
    network: Network
    case_id: str = ""

    def to_dict(self) -> Dict:
        return {**asdict(self), "variant": self.variant.name, "network": self.network.name}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureLabel":
        return cls(int(data["domain_id"]), Variant[data["variant"]], Network[data["network"]], data.get("case_id", ""))


@dataclass(eq=False)
class FeatureDump:
    """Row-per-sample matrix of flattened latent features with labels."""

    matrix: np.ndarray
    labels: List[FeatureLabel]
    meta: Dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.labels):
            raise ConfigurationError(
                f"matrix {self.matrix.shape} does not match {len(self.labels)} labels", "matrix"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def domains(self) -> np.ndarray:
        return np.array([label.domain_id for label in self.labels])

    def select(self, network: Optional[Network] = None, variant: Optional[Variant] = None) -> "FeatureDump":
        keep = [
            i for i, label in enumerate(self.labels)
            if (network is None or label.network == network) and (variant is None or label.variant == variant)
        ]
        return FeatureDump(self.matrix[keep], [self.labels[i] for i in keep], dict(self.meta))

    def save(self, stem: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
        self.matrix.astype("<f4").tofile(f"{stem}.f32")
        sidecar = {
            "shape": list(self.matrix.shape),
            "labels": [label.to_dict() for label in self.labels],
            "meta": self.meta,
        }
        with open(f"{stem}.json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2)
        return stem

    @classmethod
    def load(cls, stem: str) -> "FeatureDump":
        if stem.endswith(".json") or stem.endswith(".f32"):
            stem = os.path.splitext(stem)[0]
        if not os.path.exists(f"{stem}.json"):
            raise ConfigurationError(f"feature dump not found: {stem}", "dump")
        with open(f"{stem}.json", "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        matrix = np.fromfile(f"{stem}.f32", dtype="<f4").reshape(sidecar["shape"])
        labels = [FeatureLabel.from_dict(d) for d in sidecar["labels"]]
        return cls(matrix, labels, sidecar.get("meta", {}))


def export_features(
    networks: Mapping[Network, Backbone],
    samples: Sequence[DomainSample],
    variants: Sequence[Variant] = (Variant.SOURCE,),
    shift: ShiftRanges = ShiftRanges(),
    seed: int = 0,
) -> FeatureDump:
    """Bottleneck features for every (network, variant, sample), in that nesting order.

    TARGET rows are derived from the SOURCE sample with a shift drawn from ``seed``,
    the same shift for every network.
    """
    rng = np.random.default_rng(seed)
    inputs: Dict[Variant, List[DomainSample]] = {}
    for variant in variants:
        if variant is Variant.SOURCE:
            inputs[variant] = list(samples)
        else:
            inputs[variant] = [apply_domain_shift(s, draw_domain_spec(s.domain_id, rng, shift)) for s in samples]

    rows, labels = [], []
    for network, model in networks.items():
        for variant in variants:
            for sample in inputs[variant]:
                _, latent = model(sample.image.data[np.newaxis])
                rows.append(np.asarray(latent, dtype=np.float32).ravel())
                labels.append(FeatureLabel(sample.domain_id, variant, network, sample.case_id))

    if not rows:
        raise ConfigurationError("nothing to export", "samples")
    logger.info("Exported %d feature rows of width %d", len(rows), rows[0].size)
    return FeatureDump(np.stack(rows), labels)


def domain_overlap_score(dump: FeatureDump) -> float:
    """How indistinguishable the domains are in feature space, in [0, 1].

    A nearest-centroid domain classifier is fit and scored on the same rows;
    its balanced accuracy above chance is rescaled so chance gives 1 (full
    overlap) and perfect separation gives 0.
    """
    domains = dump.domains
    ids, counts = np.unique(domains, return_counts=True)
    if ids.size < 2:
        raise DegenerateInputError("overlap needs at least two domains")
    if counts.min() < MIN_SAMPLES_PER_DOMAIN:
        raise DegenerateInputError(f"every domain needs at least {MIN_SAMPLES_PER_DOMAIN} samples")

    features = dump.matrix.astype(np.float64)
    predicted = NearestCentroid().fit(features, domains).predict(features)
    accuracy = balanced_accuracy_score(domains, predicted)
    chance = 1.0 / ids.size
    excess = np.clip((accuracy - chance) / (1.0 - chance), 0.0, 1.0)
    return float(1.0 - excess)
