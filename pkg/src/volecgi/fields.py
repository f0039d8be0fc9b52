"""Scalar fields sampled on mesh nodes over time.

A SourceField carries either volumetric equivalent sources on heart
nodes or epicardial surface potentials, tagged by domain so downstream
activation mapping knows which slope polarity marks local activation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UserInputError

HEART_VOLUME = "heart-volume"
EPICARDIAL_SURFACE = "epicardial-surface"
_DOMAINS = (HEART_VOLUME, EPICARDIAL_SURFACE)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SourceField:
    """Node-by-time scalar field.

    values: (P, T) float64.
    sample_rate: Hz.
    node_ids: (P,) indices into the owning mesh's vertex array.
    domain: one of 'heart-volume' or 'epicardial-surface'.
    time_zero: time of the first column in seconds.
    """

    values: np.ndarray
    sample_rate: float
    node_ids: np.ndarray
    domain: str
    time_zero: float = 0.0

    def __post_init__(self):
        x = np.ascontiguousarray(self.values, dtype=np.float64)
        if x.ndim != 2:
            raise UserInputError(f"values must be 2-d (nodes, time), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise UserInputError("field contains non-finite values")
        if not self.sample_rate > 0:
            raise UserInputError(f"sample rate must be positive, got {self.sample_rate}")
        ids = np.ascontiguousarray(self.node_ids, dtype=np.int64)
        if ids.shape != (len(x),):
            raise UserInputError(
                f"node_ids must have shape ({len(x)},), got {ids.shape}"
            )
        if self.domain not in _DOMAINS:
            raise UserInputError(
                f"domain must be one of {_DOMAINS}, got {self.domain!r}"
            )
        object.__setattr__(self, "values", _freeze(x))
        object.__setattr__(self, "node_ids", _freeze(ids))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def times(self) -> np.ndarray:
        return self.time_zero + np.arange(self.n_samples) / self.sample_rate

    def with_values(self, values: np.ndarray) -> "SourceField":
        return replace(self, values=values)
