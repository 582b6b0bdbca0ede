"""Observation table with column roles.

A Dataset carries the outcome y, the binary treatment t, the subpopulation
covariates z (one column, or several for multi-binary Z), and the auxiliary
covariates v. Arrays are validated and frozen at construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    v: np.ndarray
    outcome_kind: str = "continuous"
    z_names: tuple[str, ...] = ()
    v_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = y.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if t.shape[0] != n:
            raise DataError("treatment length does not match outcome length")
        if not np.all((t == 0.0) | (t == 1.0)):
            bad = sorted(set(np.unique(t)) - {0.0, 1.0})
            raise DataError(f"treatment must be coded {{0, 1}}; saw values {bad}")
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if z.shape[0] != n:
            raise DataError("z rows do not match outcome length")
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if v.size == 0:
            v = v.reshape(n, 0)
        if v.shape[0] != n:
            raise DataError("v rows do not match outcome length")
        for name, arr in (("y", y), ("z", z), ("v", v)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite entries in {name}")
        if self.outcome_kind not in ("continuous", "binary"):
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.outcome_kind == "binary" and not np.all((y == 0.0) | (y == 1.0)):
            raise DataError("binary outcome must be coded {0, 1}")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "v", _frozen(v))
        object.__setattr__(self, "z_names", tuple(self.z_names))
        object.__setattr__(self, "v_names", tuple(self.v_names))

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def num_v(self) -> int:
        return self.v.shape[1]

    @property
    def z1(self) -> np.ndarray:
        """The single z column, for scalar-Z workflows."""
        if self.z.shape[1] != 1:
            raise DataError("z has several columns; a scalar-Z workflow was requested")
        return self.z[:, 0]

    def treated_count(self) -> int:
        return int(self.t.sum())
