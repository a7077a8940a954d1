"""Uniformly sampled multichannel signals with a provenance trail."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class FeatureSeries:
    """A named signal of shape ``(channels, samples)`` sampled at ``fs`` Hz.

    ``t0`` is the absolute time (s) of the first sample inside the source
    recording; it is non-zero only for split portions. ``provenance`` lists
    the processing steps applied so far, oldest first.
    """

    name: str
    data: np.ndarray
    fs: float
    provenance: tuple[str, ...] = ()
    t0: float = 0.0
    units: str = "a.u."
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ArgumentError(f"series {self.name!r} must be 1-D or 2-D, got shape {data.shape}")
        if not self.fs > 0:
            raise ArgumentError(f"series {self.name!r} has non-positive fs={self.fs}")
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def derive(self, data=None, step: str | None = None, **changes) -> "FeatureSeries":
        """Return a copy with new data and ``step`` appended to the provenance."""
        if data is not None:
            changes["data"] = data
        if step is not None:
            changes["provenance"] = self.provenance + (step,)
        return replace(self, **changes)
