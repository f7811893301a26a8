"""Feature sequences: T x D frame matrices tagged with where they came from."""
from __future__ import annotations

import numpy as np

RAW = "raw"
AVENET = "avenet-output"
AVERAGE = "average"
PROVENANCES = (RAW, AVENET, AVERAGE)


class FeatureSequence:
    __slots__ = ("_values", "_provenance")

    def __init__(self, values, provenance: str = RAW):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"feature sequence must be 2-D (T, D), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature sequence contains non-finite values")
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self._values = arr
        self._provenance = provenance

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def provenance(self) -> str:
        return self._provenance

    @property
    def frames(self) -> int:
        return self._values.shape[0]

    @property
    def dim(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self):
        return self._values.shape

    def __repr__(self):
        return f"FeatureSequence(T={self.frames}, D={self.dim}, provenance={self.provenance!r})"
