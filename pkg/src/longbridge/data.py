"""Combined experimental/observational sample container, CSV IO, and fold splits.

The long-term outcome is only ever stored for observational rows: experimental
rows carry the treatment, covariates, and the three short-term outcome waves,
and nothing else. Keeping the outcome in a separate O-aligned array (rather
than a sentinel-filled full column) makes accidental use of experimental
outcomes a type error instead of a silent bug.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

GROUP_E = "E"
GROUP_O = "O"

#: Number of significant digits written by save_csv; round-trips at this precision.
CSV_SIG_DIGITS = 12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a seeded counter-based generator for a named substream.

    Uses the Philox 4x64 bit generator (a 64-bit counter-based PRNG with
    fixed, documented round constants), keyed through
    ``SeedSequence(seed, spawn_key=stream)``. The same ``(seed, *stream)``
    therefore yields an identical draw sequence on every platform, and
    distinct substreams are statistically independent.

    Parameters
    ----------
    seed : int
        Base seed (any nonnegative 64-bit integer).
    *stream : int
        Optional substream path, e.g. ``make_rng(seed, replication)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ObservationRow:
    """One unit: group label, treatment, covariates, and outcome waves.

    ``y`` must be provided exactly when ``group == "O"``.
    """

    group: str
    a: int
    x: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    y: Optional[float] = None

    def __post_init__(self) -> None:
        if self.group not in (GROUP_E, GROUP_O):
            raise ValueError(f"group must be 'E' or 'O', got {self.group!r}")
        if self.a not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {self.a!r}")
        if self.group == GROUP_E and self.y is not None:
            raise ValueError("experimental rows must not carry a long-term outcome")
        if self.group == GROUP_O and self.y is None:
            raise ValueError("observational rows must carry a long-term outcome")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CombinedSample:
    """Immutable array-backed container for one combined two-sample dataset.

    Attributes
    ----------
    is_e : (n,) bool array
        True for experimental rows.
    a : (n,) int8 array
        Treatment indicator.
    x, s1, s2, s3 : 2-D float arrays
        Covariates and the three short-term outcome waves, one row per unit.
    y_o : (n_o,) float array
        Long-term outcomes of the observational rows, in row order.
    """

    is_e: np.ndarray
    a: np.ndarray
    x: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    y_o: np.ndarray

    def __post_init__(self) -> None:
        is_e = np.ascontiguousarray(self.is_e, dtype=bool)
        a = np.ascontiguousarray(self.a, dtype=np.int8)
        is_e.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "is_e", is_e)
        object.__setattr__(self, "a", a)
        for name in ("x", "s1", "s2", "s3"):
            arr = np.atleast_2d(getattr(self, name))
            object.__setattr__(self, name, _freeze(arr))
        object.__setattr__(self, "y_o", _freeze(np.atleast_1d(self.y_o)))

        n = self.is_e.shape[0]
        for name in ("a", "x", "s1", "s2", "s3"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if not np.all(np.isin(self.a, (0, 1))):
            raise ValueError("treatment values must be 0 or 1")
        n_o = int(np.count_nonzero(~self.is_e))
        if self.y_o.shape[0] != n_o:
            raise ValueError(
                f"y_o has {self.y_o.shape[0]} entries but there are {n_o} observational rows"
            )
        for grp, mask in ((GROUP_E, self.is_e), (GROUP_O, ~self.is_e)):
            for arm in (0, 1):
                if not np.any(mask & (self.a == arm)):
                    raise ValueError(
                        f"sample has no rows with group={grp}, treatment={arm}; "
                        "both arms are required in both samples"
                    )
        bad = [
            name
            for name in ("x", "s1", "s2", "s3", "y_o")
            if not np.all(np.isfinite(getattr(self, name)))
        ]
        if bad:
            raise ValueError(f"non-finite values in {', '.join(bad)}")

    # -- shape and count accessors -------------------------------------------------

    @property
    def n(self) -> int:
        return int(self.is_e.shape[0])

    @property
    def n_e(self) -> int:
        return int(np.count_nonzero(self.is_e))

    @property
    def n_o(self) -> int:
        return self.n - self.n_e

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(d1, d2, d3, dx)."""
        return (self.s1.shape[1], self.s2.shape[1], self.s3.shape[1], self.x.shape[1])

    def arm_counts(self) -> dict[tuple[str, int], int]:
        """Counts per (group, treatment) cell."""
        out: dict[tuple[str, int], int] = {}
        for grp, mask in ((GROUP_E, self.is_e), (GROUP_O, ~self.is_e)):
            for arm in (0, 1):
                out[(grp, arm)] = int(np.count_nonzero(mask & (self.a == arm)))
        return out

    @property
    def o_indices(self) -> np.ndarray:
        """Positions of observational rows; ``y_o[i]`` belongs to row ``o_indices[i]``."""
        return np.flatnonzero(~self.is_e)

    # -- construction and iteration ------------------------------------------------

    @classmethod
    def from_rows(cls, rows: Sequence[ObservationRow]) -> "CombinedSample":
        if not rows:
            raise ValueError("empty sample")
        is_e = np.array([r.group == GROUP_E for r in rows], dtype=bool)
        a = np.array([r.a for r in rows], dtype=np.int8)
        x = np.vstack([np.atleast_1d(r.x) for r in rows])
        s1 = np.vstack([np.atleast_1d(r.s1) for r in rows])
        s2 = np.vstack([np.atleast_1d(r.s2) for r in rows])
        s3 = np.vstack([np.atleast_1d(r.s3) for r in rows])
        y_o = np.array([r.y for r in rows if r.group == GROUP_O], dtype=np.float64)
        return cls(is_e=is_e, a=a, x=x, s1=s1, s2=s2, s3=s3, y_o=y_o)

    def rows(self) -> Iterator[ObservationRow]:
        y_iter = iter(self.y_o)
        for i in range(self.n):
            grp = GROUP_E if self.is_e[i] else GROUP_O
            yield ObservationRow(
                group=grp,
                a=int(self.a[i]),
                x=self.x[i],
                s1=self.s1[i],
                s2=self.s2[i],
                s3=self.s3[i],
                y=None if grp == GROUP_E else float(next(y_iter)),
            )

    def take(self, indices: np.ndarray) -> "CombinedSample":
        """New sample containing the given row positions, in the given order."""
        indices = np.asarray(indices, dtype=np.intp)
        o_pos = np.full(self.n, -1, dtype=np.intp)
        o_pos[self.o_indices] = np.arange(self.n_o)
        sel_o = o_pos[indices]
        return CombinedSample(
            is_e=self.is_e[indices],
            a=self.a[indices],
            x=self.x[indices],
            s1=self.s1[indices],
            s2=self.s2[indices],
            s3=self.s3[indices],
            y_o=self.y_o[sel_o[sel_o >= 0]],
        )


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate`: counts plus non-fatal warnings."""

    n_e: int
    n_o: int
    arm_counts: dict[tuple[str, int], int]
    fraction_e_with_y: float
    warnings: tuple[str, ...]


def validate(sample: CombinedSample, small_arm_threshold: int = 30) -> ValidationReport:
    """Check structural invariants and report per-cell counts.

    Hard failures (empty group or an empty group x treatment cell) raise
    ``ValueError``; small arms only produce WARNING-level log records and
    entries in the report.
    """
    counts = sample.arm_counts()
    if sample.n_e == 0 or sample.n_o == 0:
        raise ValueError("both an experimental and an observational sample are required")
    for cell, cnt in counts.items():
        if cnt == 0:
            raise ValueError(f"empty cell: group={cell[0]}, treatment={cell[1]}")
    warnings: list[str] = []
    for cell, cnt in counts.items():
        if cnt < small_arm_threshold:
            msg = f"group={cell[0]} treatment={cell[1]} has only {cnt} rows"
            warnings.append(msg)
            logger.warning("%s", msg)
    return ValidationReport(
        n_e=sample.n_e,
        n_o=sample.n_o,
        arm_counts=counts,
        fraction_e_with_y=0.0,
        warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class FoldAssignment:
    """Fold labels for the observational rows only.

    ``o_fold[i]`` is the fold of ``sample.o_indices[i]``; experimental rows are
    never split. Fold sizes differ by at most one.
    """

    n_folds: int
    o_fold: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        fold = np.ascontiguousarray(self.o_fold, dtype=np.intp)
        fold.setflags(write=False)
        object.__setattr__(self, "o_fold", fold)
        if self.n_folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.n_folds}")
        if fold.size < self.n_folds:
            raise ValueError("fewer observational rows than folds")
        if fold.min() < 0 or fold.max() >= self.n_folds:
            raise ValueError("fold labels out of range")
        sizes = np.bincount(fold, minlength=self.n_folds)
        if sizes.max() - sizes.min() > 1:
            raise ValueError("fold sizes differ by more than one")

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.o_fold, minlength=self.n_folds)


def split_folds(sample: CombinedSample, n_folds: int, seed: int) -> FoldAssignment:
    """Assign observational rows to ``n_folds`` folds, reproducibly.

    A Philox-seeded shuffle (see :func:`make_rng`) followed by round-robin
    assignment: fold sizes differ by at most one, and the same
    ``(sample, n_folds, seed)`` gives the same assignment on every platform.
    """
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    n_o = sample.n_o
    if n_folds > n_o:
        raise ValueError(f"cannot split {n_o} observational rows into {n_folds} folds")
    perm = make_rng(seed, 0x0F).permutation(n_o)
    fold = np.empty(n_o, dtype=np.intp)
    fold[perm] = np.arange(n_o) % n_folds
    return FoldAssignment(n_folds=n_folds, o_fold=fold, seed=seed)


# -- CSV IO -------------------------------------------------------------------------


def _expected_header(d1: int, d2: int, d3: int, dx: int) -> list[str]:
    cols = ["g", "a", "y"]
    for prefix, d in (("s1", d1), ("s2", d2), ("s3", d3), ("x", dx)):
        cols.extend(f"{prefix}_{j}" for j in range(1, d + 1))
    return cols


def _parse_header(header: list[str]) -> tuple[int, int, int, int]:
    if header[:3] != ["g", "a", "y"]:
        raise ValueError(f"line 1: header must start with g,a,y, got {header[:3]}")
    dims: dict[str, int] = {}
    pos = 3
    for prefix in ("s1", "s2", "s3", "x"):
        d = 0
        while pos < len(header) and header[pos] == f"{prefix}_{d + 1}":
            d += 1
            pos += 1
        if d == 0:
            raise ValueError(f"line 1: expected at least one {prefix}_* column at position {pos + 1}")
        dims[prefix] = d
    if pos != len(header):
        raise ValueError(f"line 1: unexpected trailing column {header[pos]!r}")
    return dims["s1"], dims["s2"], dims["s3"], dims["x"]


def load_csv(path: str) -> CombinedSample:
    """Load a combined sample from ``path``.

    The header must be exactly ``g,a,y,s1_1..s1_{d1},s2_1..s2_{d2},
    s3_1..s3_{d3},x_1..x_{dx}``. The ``y`` field must be empty exactly on
    experimental rows. Malformed input raises ``ValueError`` naming the
    offending 1-based line number.
    """
    groups: list[bool] = []
    arms: list[int] = []
    ys: list[float] = []
    blocks: dict[str, list[list[float]]] = {"s1": [], "s2": [], "s3": [], "x": []}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("line 1: empty file") from None
        d1, d2, d3, dx = _parse_header([h.strip() for h in header])
        ncol = 3 + d1 + d2 + d3 + dx

        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != ncol:
                raise ValueError(f"line {lineno}: expected {ncol} fields, got {len(rec)}")
            g = rec[0].strip()
            if g not in (GROUP_E, GROUP_O):
                raise ValueError(f"line {lineno}: group must be E or O, got {g!r}")
            try:
                arm = int(rec[1])
            except ValueError:
                raise ValueError(f"line {lineno}: treatment must be 0 or 1, got {rec[1]!r}") from None
            if arm not in (0, 1):
                raise ValueError(f"line {lineno}: treatment must be 0 or 1, got {arm}")
            y_field = rec[2].strip()
            if g == GROUP_E:
                if y_field != "":
                    raise ValueError(
                        f"line {lineno}: experimental row must have an empty y field, got {y_field!r}"
                    )
            else:
                if y_field == "":
                    raise ValueError(f"line {lineno}: observational row is missing y")
                try:
                    y_val = float(y_field)
                except ValueError:
                    raise ValueError(f"line {lineno}: y is not a number: {y_field!r}") from None
                if not math.isfinite(y_val):
                    raise ValueError(f"line {lineno}: y is not finite: {y_field!r}")
                ys.append(y_val)
            vals: list[float] = []
            for j, fieldtxt in enumerate(rec[3:], start=4):
                try:
                    v = float(fieldtxt)
                except ValueError:
                    raise ValueError(
                        f"line {lineno}: column {j} is not a number: {fieldtxt!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(f"line {lineno}: column {j} is not finite: {fieldtxt!r}")
                vals.append(v)
            groups.append(g == GROUP_E)
            arms.append(arm)
            off = 0
            for prefix, d in (("s1", d1), ("s2", d2), ("s3", d3), ("x", dx)):
                blocks[prefix].append(vals[off : off + d])
                off += d

    if not groups:
        raise ValueError("line 2: no data rows")
    return CombinedSample(
        is_e=np.array(groups, dtype=bool),
        a=np.array(arms, dtype=np.int8),
        x=np.array(blocks["x"], dtype=np.float64),
        s1=np.array(blocks["s1"], dtype=np.float64),
        s2=np.array(blocks["s2"], dtype=np.float64),
        s3=np.array(blocks["s3"], dtype=np.float64),
        y_o=np.array(ys, dtype=np.float64),
    )


def save_csv(sample: CombinedSample, path: str) -> None:
    """Write ``sample`` to ``path`` in the format :func:`load_csv` reads.

    Floats are written with 12 significant digits, so save/load round-trips
    agree to that precision.
    """
    d1, d2, d3, dx = sample.dims
    fmt = f"%.{CSV_SIG_DIGITS}g"
    y_iter = iter(sample.y_o)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(d1, d2, d3, dx))
        for i in range(sample.n):
            is_e = bool(sample.is_e[i])
            rec = [
                GROUP_E if is_e else GROUP_O,
                str(int(sample.a[i])),
                "" if is_e else fmt % next(y_iter),
            ]
            for block in (sample.s1, sample.s2, sample.s3, sample.x):
                rec.extend(fmt % v for v in block[i])
            writer.writerow(rec)
