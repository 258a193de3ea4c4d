"""Flat parameter and gradient vectors shared by the model and the teacher update."""
import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InternalError


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) list; the flat vector is the C-order concatenation."""

    entries: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.entries))

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def slices(self) -> Iterator[Tuple[str, slice, Tuple[int, ...]]]:
        start = 0
        for name, shape in self.entries:
            stop = start + int(np.prod(shape))
            yield name, slice(start, stop), shape
            start = stop

    @property
    def digest(self) -> str:
        payload = json.dumps([[name, list(shape)] for name, shape in self.entries])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_list(self) -> List:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_list(cls, entries: Sequence) -> "ParamLayout":
        return cls(tuple((str(name), tuple(int(s) for s in shape)) for name, shape in entries))


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 1 or values.size != self.layout.size:
            raise InternalError(f"vector of size {values.size} does not match layout of size {self.layout.size}")
        object.__setattr__(self, "values", values)

    def unflatten(self) -> Dict[str, np.ndarray]:
        return {name: self.values[sl].reshape(shape) for name, sl, shape in self.layout.slices()}

    def serialize(self) -> bytes:
        return self.values.astype(self.values.dtype.newbyteorder("<")).tobytes()

    @classmethod
    def deserialize(cls, blob: bytes, layout: ParamLayout, dtype: str = "float32") -> "ParamVector":
        values = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
        return cls(values, layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


class Origin(str, enum.Enum):
    SRC = "src"
    TRG = "trg"
    TOTAL = "total"


@dataclass(frozen=True, eq=False)
class GradientVector:
    values: np.ndarray
    origin: Origin
    layout: Optional[ParamLayout] = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InternalError("gradient vector must be flat")
        if not np.all(np.isfinite(values)):
            raise InternalError(f"non-finite entries in {self.origin.name} gradient")
        if self.layout is not None and values.size != self.layout.size:
            raise InternalError("gradient vector does not match its layout")
        object.__setattr__(self, "values", values)
