"""Bridge-function representations and feature-basis construction.

An outcome bridge maps (s3, s2, a, x) to a predicted long-term outcome; a
selection bridge maps (s2, s1, a, x) to a nonnegative reweighting factor.
Both exist in a coefficient form (linear, or log-linear plus offset) over a
declared feature basis, and in a tabular form over small finite alphabets.
Fitters return whichever form matches the basis kind; estimators only ever
call ``evaluate``.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

VALID_BASIS_KINDS = ("linear", "linear_with_interactions", "indicator")

# Exponents beyond this would overflow float64 shortly after exp(); a fit
# that needs them is pathological and should fail loudly.
_MAX_EXPONENT = 300.0


@dataclass(frozen=True)
class BasisSpec:
    """Declaration of the feature map used by bridge fitters.

    ``linear`` is the raw coordinates; ``linear_with_interactions`` adds
    pairwise products between coordinates of distinct variable blocks;
    ``indicator`` is a one-hot encoding of the joint cell of integer-valued
    scalar blocks, for tabular fits. ``per_arm`` fits separate coefficients
    per treatment arm; otherwise a shared fit with a treatment term.
    """

    kind: str = "linear"
    include_intercept: bool = True
    per_arm: bool = True

    def __post_init__(self) -> None:
        if self.kind not in VALID_BASIS_KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; expected one of "
                             f"{VALID_BASIS_KINDS}")


def _as_blocks(blocks: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    n = None
    for b in blocks:
        arr = np.asarray(b, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError("feature blocks must be 1-D or 2-D arrays")
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            raise ValueError("feature blocks must share their row count")
        out.append(arr)
    return out


def _cross_products(blocks: list[np.ndarray]) -> list[np.ndarray]:
    """Pairwise products between coordinates of distinct blocks only."""
    out = []
    for p in range(len(blocks)):
        for q in range(p + 1, len(blocks)):
            for i in range(blocks[p].shape[1]):
                for j in range(blocks[q].shape[1]):
                    out.append(blocks[p][:, i] * blocks[q][:, j])
    return [c[:, None] for c in out]


def infer_levels(blocks: Sequence[np.ndarray]) -> tuple[int, ...]:
    """Number of levels per scalar block, for the indicator basis."""
    levels = []
    for b in _as_blocks(blocks):
        if b.shape[1] != 1:
            raise ValueError("indicator basis requires scalar blocks")
        codes = np.rint(b[:, 0])
        if np.max(np.abs(codes - b[:, 0])) > 1e-9 or codes.min() < 0:
            raise ValueError("indicator basis requires nonnegative integer levels")
        levels.append(int(codes.max()) + 1)
    return tuple(levels)


def _one_hot_cells(blocks: list[np.ndarray], levels: Sequence[int]) -> np.ndarray:
    if len(levels) != len(blocks):
        raise ValueError("levels must match the number of blocks")
    n = blocks[0].shape[0]
    idx = np.zeros(n, dtype=np.intp)
    for b, m in zip(blocks, levels):
        if b.shape[1] != 1:
            raise ValueError("indicator basis requires scalar blocks")
        codes = np.rint(b[:, 0]).astype(np.intp)
        if codes.min() < 0 or codes.max() >= m:
            raise ValueError("level outside declared range for indicator basis")
        idx = idx * m + codes
    cells = int(np.prod(levels))
    out = np.zeros((n, cells))
    out[np.arange(n), idx] = 1.0
    return out


def build_basis(blocks: Sequence[np.ndarray], spec: BasisSpec,
                levels: Optional[Sequence[int]] = None) -> np.ndarray:
    """Feature matrix for the given variable blocks under ``spec``.

    For the indicator kind, ``levels`` fixes the cell grid (inferred from
    the data when omitted) and the intercept flag is ignored since the
    cells already span constants. For linear kinds the intercept column,
    when requested, comes last.
    """
    blks = _as_blocks(blocks)
    if spec.kind == "indicator":
        if levels is None:
            levels = infer_levels(blks)
        return _one_hot_cells(blks, levels)
    cols = list(blks)
    if spec.kind == "linear_with_interactions":
        cols.extend(_cross_products(blks))
    if spec.include_intercept:
        cols.append(np.ones((blks[0].shape[0], 1)))
    return np.hstack(cols)


def _arm_array(a, n: int) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim == 0:
        arr = np.full(n, int(arr))
    arr = arr.astype(np.intp)
    if arr.shape != (n,):
        raise ValueError("treatment must be a scalar or match the row count")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("treatment arms must be 0 or 1")
    return arr


def _frozen_array(value, name: str, ndim: int) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D")
    arr.setflags(write=False)
    return arr


def _level_codes(values, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Integer level codes plus an in-range-support mask precursor."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"tabular bridges require scalar {name}")
        arr = arr[:, 0]
    codes = np.rint(arr).astype(np.intp)
    return codes, np.abs(arr - codes) <= 1e-9


def _table_lookup(table: np.ndarray, first, second, a, x, default: float) -> np.ndarray:
    i1, ok1 = _level_codes(first, "wave values")
    i2, ok2 = _level_codes(second, "wave values")
    ix, okx = _level_codes(x, "covariates")
    n = i1.shape[0]
    arms = _arm_array(a, n)
    m1, m2, _, mx = table.shape
    inside = (ok1 & ok2 & okx
              & (i1 >= 0) & (i1 < m1) & (i2 >= 0) & (i2 < m2)
              & (ix >= 0) & (ix < mx))
    out = np.full(n, default)
    out[inside] = table[i1[inside], i2[inside], arms[inside], ix[inside]]
    return out


# -- outcome bridges -------------------------------------------------------------------


class OutcomeBridge(abc.ABC):
    """Predicts the long-term outcome from (s3, s2, a, x)."""

    @abc.abstractmethod
    def evaluate(self, s3: np.ndarray, s2: np.ndarray, a, x: np.ndarray) -> np.ndarray:
        """Bridge values per row; ``a`` may be a scalar arm or a per-row array."""

    @abc.abstractmethod
    def to_dict(self) -> dict:
        """JSON-ready description of the fitted bridge."""


@dataclass(frozen=True)
class LinearOutcomeBridge(OutcomeBridge):
    """Outcome bridge linear in a feature basis over (s3, s2, x).

    ``theta`` has one coefficient row per arm, ordered like the basis
    columns: raw coordinates in block order (s3, s2, x), then any
    interaction products, then the intercept last.
    """

    theta: np.ndarray
    basis: BasisSpec = field(default_factory=BasisSpec)
    diagnostics: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", _frozen_array(self.theta, "theta", 2))
        if self.theta.shape[0] != 2:
            raise ValueError("theta must have one row per arm")
        if self.basis.kind == "indicator":
            raise ValueError("indicator bases are represented by tabular bridges")

    def evaluate(self, s3, s2, a, x) -> np.ndarray:
        feats = build_basis((s3, s2, x), self.basis)
        if feats.shape[1] != self.theta.shape[1]:
            raise ValueError(
                f"basis produces {feats.shape[1]} features but theta has "
                f"{self.theta.shape[1]} coefficients"
            )
        arms = _arm_array(a, feats.shape[0])
        return np.einsum("nk,nk->n", feats, self.theta[arms])

    def to_dict(self) -> dict:
        out = {
            "form": "linear",
            "theta": self.theta.tolist(),
            "basis": {"kind": self.basis.kind,
                      "include_intercept": self.basis.include_intercept,
                      "per_arm": self.basis.per_arm},
        }
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics
        return out


@dataclass(frozen=True)
class TableOutcomeBridge(OutcomeBridge):
    """Tabular outcome bridge over integer levels, axes (s3, s2, a, x).

    Lookups outside the table return ``default`` (0.0), so evaluation never
    fails on a level unseen during fitting.
    """

    table: np.ndarray
    diagnostics: Optional[dict] = field(default=None, compare=False)
    default: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", _frozen_array(self.table, "table", 4))
        if self.table.shape[2] != 2:
            raise ValueError("table's third axis must index the two arms")

    def evaluate(self, s3, s2, a, x) -> np.ndarray:
        return _table_lookup(self.table, s3, s2, a, x, self.default)

    def to_dict(self) -> dict:
        out = {"form": "table", "axes": ["s3", "s2", "a", "x"],
               "table": self.table.tolist(), "default": self.default}
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics
        return out


# -- selection bridges -----------------------------------------------------------------


class SelectionBridge(abc.ABC):
    """Reweighting factor from (s2, s1, a, x)."""

    @abc.abstractmethod
    def evaluate(self, s2: np.ndarray, s1: np.ndarray, a, x: np.ndarray) -> np.ndarray:
        """Bridge values per row; ``a`` may be a scalar arm or a per-row array."""

    @abc.abstractmethod
    def to_dict(self) -> dict:
        """JSON-ready description of the fitted bridge."""


@dataclass(frozen=True)
class LoglinearSelectionBridge(SelectionBridge):
    """Selection bridge exp(gamma_a + beta_a . features) + c0_a.

    Features are the basis columns over (s2, s1, x) without an intercept;
    ``gamma`` is the per-arm log-scale intercept and ``c0`` an additive
    offset. Exponents above 300 raise instead of silently overflowing.
    """

    beta: np.ndarray
    gamma: np.ndarray
    c0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    basis: BasisSpec = field(default_factory=BasisSpec)
    diagnostics: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", _frozen_array(self.beta, "beta", 2))
        gamma = np.ascontiguousarray(self.gamma, dtype=np.float64)
        c0 = np.ascontiguousarray(self.c0, dtype=np.float64)
        gamma.setflags(write=False)
        c0.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "c0", c0)
        if self.beta.shape[0] != 2 or gamma.shape != (2,) or c0.shape != (2,):
            raise ValueError("beta, gamma, c0 must have one entry per arm")
        if self.basis.kind == "indicator":
            raise ValueError("indicator bases are represented by tabular bridges")

    def evaluate(self, s2, s1, a, x) -> np.ndarray:
        feats = build_basis((s2, s1, x), replace(self.basis, include_intercept=False))
        if feats.shape[1] != self.beta.shape[1]:
            raise ValueError(
                f"basis produces {feats.shape[1]} features but beta has "
                f"{self.beta.shape[1]} coefficients"
            )
        arms = _arm_array(a, feats.shape[0])
        expo = self.gamma[arms] + np.einsum("nk,nk->n", feats, self.beta[arms])
        if np.max(expo, initial=-np.inf) > _MAX_EXPONENT:
            raise OverflowError(
                "selection bridge exponent exceeds 300; rescale features or "
                "refit with stronger regularization"
            )
        return np.exp(expo) + self.c0[arms]

    def to_dict(self) -> dict:
        out = {
            "form": "loglinear",
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "c0": self.c0.tolist(),
            "basis": {"kind": self.basis.kind,
                      "include_intercept": self.basis.include_intercept,
                      "per_arm": self.basis.per_arm},
        }
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics
        return out


@dataclass(frozen=True)
class TableSelectionBridge(SelectionBridge):
    """Tabular selection bridge over integer levels, axes (s1, s2, a, x).

    Lookups outside the table return ``default`` (1.0), the neutral
    reweighting factor.
    """

    table: np.ndarray
    diagnostics: Optional[dict] = field(default=None, compare=False)
    default: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", _frozen_array(self.table, "table", 4))
        if self.table.shape[2] != 2:
            raise ValueError("table's third axis must index the two arms")

    def evaluate(self, s2, s1, a, x) -> np.ndarray:
        return _table_lookup(self.table, s1, s2, a, x, self.default)

    def to_dict(self) -> dict:
        out = {"form": "table", "axes": ["s1", "s2", "a", "x"],
               "table": self.table.tolist(), "default": self.default}
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics
        return out


# -- constant bridges for exact reductions ----------------------------------------------


def constant_outcome_bridge(value: float, d3: int, d2: int, dx: int) -> LinearOutcomeBridge:
    """Outcome bridge identically equal to ``value``."""
    theta = np.zeros((2, d3 + d2 + dx + 1))
    theta[:, -1] = value
    return LinearOutcomeBridge(theta=theta)


def constant_selection_bridge(value: float, d2: int, d1: int,
                              dx: int) -> LoglinearSelectionBridge:
    """Selection bridge identically equal to ``value`` (any sign)."""
    beta = np.zeros((2, d2 + d1 + dx))
    if value > 0:
        gamma = np.full(2, np.log(value))
        c0 = np.zeros(2)
    else:
        gamma = np.full(2, -np.inf)
        c0 = np.full(2, float(value))
    return LoglinearSelectionBridge(beta=beta, gamma=gamma, c0=c0)
