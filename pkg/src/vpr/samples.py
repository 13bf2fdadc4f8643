from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def default_names(p: int, prefix: str = "theta") -> list[str]:
    return [f"{prefix}[{j}]" for j in range(p)]


@dataclass(frozen=True)
class SampleMatrix:
    """An ``L x p`` matrix of posterior draws with parameter names."""

    values: np.ndarray
    names: list[str] = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError("sample values must be a 2-d array")
        if not np.all(np.isfinite(values)):
            raise ValueError("samples contain NaN or Inf")
        names = list(self.names) if self.names is not None else default_names(values.shape[1])
        if len(names) != values.shape[1]:
            raise ValueError(f"{len(names)} names for {values.shape[1]} columns")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_params(self) -> int:
        return self.values.shape[1]

    def columns(self, names) -> "SampleMatrix":
        idx = [self.names.index(n) for n in names]
        return SampleMatrix(self.values[:, idx], [self.names[i] for i in idx])

    def concat(self, other: "SampleMatrix") -> "SampleMatrix":
        if other.names != self.names:
            raise ValueError("cannot concatenate samples with different parameter names")
        return SampleMatrix(np.vstack([self.values, other.values]), self.names)


def as_values(samples) -> np.ndarray:
    if isinstance(samples, SampleMatrix):
        return samples.values
    values = np.asarray(samples, dtype=float)
    return values[:, None] if values.ndim == 1 else values
