"""Tensor-train (TT) and tensor-train-matrix (TTM) representations of weight matrices.

A weight matrix of logical shape (rows, cols) is reshaped into an order-2d
tensor whose row modes multiply to a padded row count and whose column modes
multiply to a padded column count.  The TT format stores 2d order-3 cores
(row cores followed by column cores); the TTM format stores d order-4 cores,
each carrying one row mode and one column mode jointly.

Dense reconstruction here is the reference path: it is used by oracles and
tests, never by the training or inference hot path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class PlanError(ValueError):
    """Raised when a factorization plan cannot be built or validated."""


class StructureError(ValueError):
    """Raised when cores are inconsistent with their plan."""


class TTFormat(str, Enum):
    TT = "tt"
    TTM = "ttm"


@dataclass(frozen=True)
class TensorShapePlan:
    """Blueprint for compressing one (rows x cols) matrix.

    ``row_factors`` multiply to ``padded_rows >= rows`` and ``col_factors``
    to ``padded_cols >= cols``.  ``ranks`` has length 2d+1 for TT (leading
    and trailing entries are 1) and d+1 for TTM (same boundary rule).
    """

    rows: int
    cols: int
    row_factors: tuple[int, ...]
    col_factors: tuple[int, ...]
    ranks: tuple[int, ...]
    format: TTFormat = TTFormat.TT

    def __post_init__(self):
        object.__setattr__(self, "row_factors", tuple(int(f) for f in self.row_factors))
        object.__setattr__(self, "col_factors", tuple(int(f) for f in self.col_factors))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "format", TTFormat(self.format))
        self._validate()

    def _validate(self):
        d = len(self.row_factors)
        if d < 1 or len(self.col_factors) != d:
            raise PlanError("row and column factor lists must have equal length >= 1")
        if self.rows < 1 or self.cols < 1:
            raise PlanError("logical dims must be positive")
        if any(f < 1 for f in self.row_factors + self.col_factors):
            raise PlanError("factors must be positive")
        if self.padded_rows < self.rows or self.padded_cols < self.cols:
            raise PlanError(
                f"factor products ({self.padded_rows}, {self.padded_cols}) must cover "
                f"logical dims ({self.rows}, {self.cols})"
            )
        if any(r < 1 for r in self.ranks):
            raise PlanError("ranks must be positive")
        if self.format is TTFormat.TT:
            if len(self.ranks) != 2 * d + 1:
                raise PlanError(f"TT plan with d={d} needs {2 * d + 1} ranks, got {len(self.ranks)}")
        else:
            if len(self.ranks) != d + 1:
                raise PlanError(f"TTM plan with d={d} needs {d + 1} ranks, got {len(self.ranks)}")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise PlanError("boundary ranks must equal 1")

    @property
    def order(self) -> int:
        return len(self.row_factors)

    @property
    def padded_rows(self) -> int:
        return math.prod(self.row_factors)

    @property
    def padded_cols(self) -> int:
        return math.prod(self.col_factors)

    @property
    def has_padding(self) -> bool:
        return self.padded_rows != self.rows or self.padded_cols != self.cols

    def core_shapes(self) -> list[tuple[int, ...]]:
        d = self.order
        if self.format is TTFormat.TT:
            modes = self.row_factors + self.col_factors
            return [
                (self.ranks[i], modes[i], self.ranks[i + 1]) for i in range(2 * d)
            ]
        return [
            (self.ranks[i], self.row_factors[i], self.col_factors[i], self.ranks[i + 1])
            for i in range(d)
        ]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "row_factors": list(self.row_factors),
            "col_factors": list(self.col_factors),
            "ranks": list(self.ranks),
            "format": self.format.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TensorShapePlan":
        return cls(
            rows=d["rows"],
            cols=d["cols"],
            row_factors=tuple(d["row_factors"]),
            col_factors=tuple(d["col_factors"]),
            ranks=tuple(d["ranks"]),
            format=TTFormat(d["format"]),
        )


def uniform_ranks(d: int, rank: int, fmt: TTFormat) -> tuple[int, ...]:
    """Boundary-1 rank tuple with constant interior rank."""
    n = 2 * d if fmt is TTFormat.TT else d
    if n == 1:
        return (1, 1)
    return (1,) + (rank,) * (n - 1) + (1,)


def _bounded_factors(n: int, d: int, lo: int, hi: int) -> tuple[int, ...] | None:
    """Most-balanced multiset of d factors, each in [lo, hi], with product n."""
    best: tuple[int, ...] | None = None

    def search(remaining: int, k: int, min_f: int, acc: list[int]):
        nonlocal best
        if k == 1:
            if min_f <= remaining <= hi:
                cand = tuple(acc + [remaining])
                if best is None or max(cand) - min(cand) < max(best) - min(best):
                    best = cand
            return
        f = min_f
        while f <= hi and f ** k <= remaining:
            if remaining % f == 0:
                search(remaining // f, k - 1, f, acc + [f])
            f += 1

    search(n, d, max(lo, 2), [])
    return best


def _plan_axis(n: int, d: int) -> tuple[int, ...]:
    """Factors for one axis: least padding among near-balanced splits.

    Scans padded products upward from n, accepting the first product that
    splits into d factors each within a factor of two of n**(1/d); falls back
    to the uniform ceil-root split, which always covers n.
    """
    if n == 1:
        return (1,) * d
    if d == 1:
        return (n,)
    if 2 ** d > n:
        raise PlanError(f"cannot split dim {n} into {d} factors >= 2")
    root = n ** (1.0 / d)
    lo, hi = max(2, int(root / 2)), max(2, math.ceil(root * 2))
    ceiling = math.ceil(root) ** d
    for padded in range(n, ceiling + 1):
        fac = _bounded_factors(padded, d, lo, hi)
        if fac is not None:
            return tuple(sorted(fac))
    return (math.ceil(root),) * d


def plan_factorization(
    rows: int,
    cols: int,
    d: int,
    rank: int,
    fmt: TTFormat | str = TTFormat.TT,
    row_factors: Sequence[int] | None = None,
    col_factors: Sequence[int] | None = None,
    ranks: Sequence[int] | None = None,
) -> TensorShapePlan:
    """Build a compression plan for a (rows x cols) matrix.

    Without explicit factors, each axis is split into d near-balanced factors
    with the least padding.  Explicit ``row_factors``/``col_factors`` override
    the search (used to reproduce published shape settings); explicit
    ``ranks`` override the uniform rank tuple.
    """
    fmt = TTFormat(fmt)
    if rows < 1 or cols < 1 or d < 1 or rank < 1:
        raise PlanError("rows, cols, d and rank must all be >= 1")
    rf = tuple(row_factors) if row_factors is not None else _plan_axis(rows, d)
    cf = tuple(col_factors) if col_factors is not None else _plan_axis(cols, d)
    if len(rf) != len(cf):
        raise PlanError("row and column factor lists must have equal length")
    rk = tuple(ranks) if ranks is not None else uniform_ranks(len(rf), rank, fmt)
    return TensorShapePlan(rows=rows, cols=cols, row_factors=rf, col_factors=cf, ranks=rk, format=fmt)


# ---------------------------------------------------------------------------
# Core containers


def _check_tt_cores(cores: Sequence[np.ndarray], plan: TensorShapePlan):
    if plan.format is not TTFormat.TT:
        raise StructureError("plan is not TT format")
    shapes = plan.core_shapes()
    if len(cores) != len(shapes):
        raise StructureError(f"expected {len(shapes)} cores, got {len(cores)}")
    for i, (core, shape) in enumerate(zip(cores, shapes)):
        if tuple(core.shape) != shape:
            raise StructureError(f"core {i} has shape {core.shape}, expected {shape}")


def _check_ttm_cores(cores: Sequence[np.ndarray], plan: TensorShapePlan):
    if plan.format is not TTFormat.TTM:
        raise StructureError("plan is not TTM format")
    shapes = plan.core_shapes()
    if len(cores) != len(shapes):
        raise StructureError(f"expected {len(shapes)} cores, got {len(cores)}")
    for i, (core, shape) in enumerate(zip(cores, shapes)):
        if tuple(core.shape) != shape:
            raise StructureError(f"core {i} has shape {core.shape}, expected {shape}")


@dataclass
class TTCores:
    """2d order-3 factors of a TT-compressed matrix."""

    cores: list[np.ndarray]
    plan: TensorShapePlan = field(repr=False)

    def __post_init__(self):
        _check_tt_cores(self.cores, self.plan)

    def __iter__(self):
        return iter(self.cores)

    def __len__(self):
        return len(self.cores)


@dataclass
class TTMCores:
    """d order-4 factors of a TTM-compressed matrix."""

    cores: list[np.ndarray]
    plan: TensorShapePlan = field(repr=False)

    def __post_init__(self):
        _check_ttm_cores(self.cores, self.plan)

    def __iter__(self):
        return iter(self.cores)

    def __len__(self):
        return len(self.cores)


def init_tt_cores(
    plan: TensorShapePlan,
    rng: np.random.Generator,
    target_std: float | None = None,
    dtype=np.float64,
) -> TTCores:
    """Random Gaussian cores scaled so the reconstructed matrix has roughly
    the requested elementwise std (fan-in rule when unspecified).

    The reconstructed entry is a product chain over 2d cores with the interior
    ranks summed out, so each core draws i.i.d. values with std set to the
    (2d)-th root of the target std after dividing out the accumulated rank
    volume.
    """
    if target_std is None:
        target_std = 1.0 / math.sqrt(plan.cols)
    shapes = plan.core_shapes()
    n = len(shapes)
    # Each summed product of k i.i.d. factors has variance prod(core_var) * rank_volume.
    rank_volume = math.prod(plan.ranks[1:-1]) if len(plan.ranks) > 2 else 1
    per_core_std = (target_std / math.sqrt(rank_volume)) ** (1.0 / n)
    cores = [rng.normal(0.0, per_core_std, size=s).astype(dtype) for s in shapes]
    return TTCores(cores, plan)


def init_ttm_cores(
    plan: TensorShapePlan,
    rng: np.random.Generator,
    target_std: float = 0.02,
    dtype=np.float64,
) -> TTMCores:
    shapes = plan.core_shapes()
    n = len(shapes)
    rank_volume = math.prod(plan.ranks[1:-1]) if len(plan.ranks) > 2 else 1
    per_core_std = (target_std / math.sqrt(rank_volume)) ** (1.0 / n)
    cores = [rng.normal(0.0, per_core_std, size=s).astype(dtype) for s in shapes]
    return TTMCores(cores, plan)


# ---------------------------------------------------------------------------
# Dense reconstruction (oracle path, FP64)


def tt_to_dense(cores: TTCores | Sequence[np.ndarray], plan: TensorShapePlan) -> np.ndarray:
    """Materialize the full (rows x cols) matrix from TT cores.

    Slice-product reconstruction: chain the cores into the order-2d tensor,
    reshape to the padded matrix, crop to the logical shape.
    """
    core_list = list(cores.cores if isinstance(cores, TTCores) else cores)
    _check_tt_cores(core_list, plan)
    d = plan.order
    out = np.asarray(core_list[0], dtype=np.float64)  # (1, m1, r1)
    acc = out.reshape(out.shape[1], out.shape[2])
    modes = [core_list[0].shape[1]]
    for core in core_list[1:]:
        c = np.asarray(core, dtype=np.float64)
        acc = np.tensordot(acc, c, axes=([acc.ndim - 1], [0]))
        modes.append(c.shape[1])
    acc = acc.reshape(modes)  # trailing rank is 1
    padded = acc.reshape(plan.padded_rows, plan.padded_cols)
    return padded[: plan.rows, : plan.cols]


def ttm_to_dense(cores: TTMCores | Sequence[np.ndarray], plan: TensorShapePlan) -> np.ndarray:
    """Materialize the full matrix from TTM cores via joint (row, col) slices."""
    core_list = list(cores.cores if isinstance(cores, TTMCores) else cores)
    _check_ttm_cores(core_list, plan)
    first = np.asarray(core_list[0], dtype=np.float64)
    acc = first.reshape(first.shape[1], first.shape[2], first.shape[3])  # (m1, n1, p1)
    row_modes = [first.shape[1]]
    col_modes = [first.shape[2]]
    for core in core_list[1:]:
        c = np.asarray(core, dtype=np.float64)
        acc = np.tensordot(acc, c, axes=([acc.ndim - 1], [0]))
        row_modes.append(c.shape[1])
        col_modes.append(c.shape[2])
    # modes are interleaved (m1, n1, m2, n2, ...); bring rows forward
    acc = acc.reshape([x for pair in zip(row_modes, col_modes) for x in pair])
    order = list(range(0, 2 * len(row_modes), 2)) + list(range(1, 2 * len(row_modes), 2))
    tensor = acc.transpose(order)
    padded = tensor.reshape(plan.padded_rows, plan.padded_cols)
    return padded[: plan.rows, : plan.cols]


# ---------------------------------------------------------------------------
# Factorized matvec / lookup (hot path)


def tt_matvec(
    cores: TTCores | Sequence[np.ndarray],
    plan: TensorShapePlan,
    x: np.ndarray,
    count_ops: bool = False,
):
    """y = W x without materializing W.

    x (length cols) is zero-padded to the padded column count, reshaped into
    the column modes, and the cores are contracted from the last one down to
    the first, keeping an intermediate of size (rank x remaining modes).
    Returns the length-rows result, optionally with the multiply count.
    """
    core_list = list(cores.cores if isinstance(cores, TTCores) else cores)
    _check_tt_cores(core_list, plan)
    x = np.asarray(x)
    if x.shape != (plan.cols,):
        raise ValueError(f"expected input of length {plan.cols}, got shape {x.shape}")
    d = plan.order
    if plan.padded_cols != plan.cols:
        x = np.concatenate([x, np.zeros(plan.padded_cols - plan.cols, dtype=x.dtype)])
    mults = 0
    acc = x.reshape(plan.col_factors)  # (n1, ..., nd)
    # column sweep: contract cores 2d..d+1, consuming modes right to left
    for k in range(2 * d, d, -1):
        core = core_list[k - 1]  # (r_{k-1}, n_{k-d}, r_k)
        # acc: (n1, ..., n_{k-d}, r_k) with the trailing rank absent on the first step
        if k == 2 * d:
            acc = np.tensordot(acc, core[:, :, 0].T, axes=([acc.ndim - 1], [0]))
        else:
            acc = np.tensordot(acc, core, axes=([acc.ndim - 2, acc.ndim - 1], [1, 2]))
        mults += acc.size * core.shape[1] * (core.shape[2] if k != 2 * d else 1)
    v = acc.reshape(-1)  # (r_d,)
    # row sweep: cores d..1 emit output modes
    out = v
    for k in range(d, 0, -1):
        core = core_list[k - 1]  # (r_{k-1}, m_k, r_k)
        out = np.tensordot(core, out, axes=([2], [0]))  # (r_{k-1}, m_k, out_modes...)
        mults += out.size * core.shape[2]
        out = out.reshape((core.shape[0], -1)) if k > 1 else out
    y = out.reshape(plan.padded_rows)[: plan.rows]
    if count_ops:
        return y, mults
    return y


def tt_matvec_mult_count(plan: TensorShapePlan) -> int:
    """Analytic multiply count of the tt_matvec contraction order."""
    d = plan.order
    nf, mf, ranks = plan.col_factors, plan.row_factors, plan.ranks
    mults = 0
    for k in range(2 * d, d, -1):
        left = math.prod(nf[: k - d - 1]) if k - d - 1 > 0 else 1
        mults += left * ranks[k - 1] * nf[k - d - 1] * ranks[k]
    out_modes = 1
    for k in range(d, 0, -1):
        mults += ranks[k - 1] * mf[k - 1] * ranks[k] * out_modes
        out_modes *= mf[k - 1]
    return mults


def ttm_lookup_mult_count(plan: TensorShapePlan) -> int:
    """Analytic multiply count of one ttm_row_lookup chain contraction."""
    nf, ranks = plan.col_factors, plan.ranks
    mults = 0
    left = nf[0]
    for k in range(1, plan.order):
        mults += left * ranks[k] * nf[k] * ranks[k + 1]
        left *= nf[k]
    return mults


def row_digits(row: int, row_factors: Sequence[int]) -> tuple[int, ...]:
    """Mixed-radix digits of a padded row index, most significant first."""
    digits = []
    for base in reversed(row_factors):
        digits.append(row % base)
        row //= base
    return tuple(reversed(digits))


def ttm_row_lookup(
    cores: TTMCores | Sequence[np.ndarray], plan: TensorShapePlan, row: int
) -> np.ndarray:
    """Row ``row`` of the represented matrix, from core slices only."""
    core_list = list(cores.cores if isinstance(cores, TTMCores) else cores)
    _check_ttm_cores(core_list, plan)
    if not 0 <= row < plan.rows:
        raise IndexError(f"row {row} out of range [0, {plan.rows})")
    digits = row_digits(row, plan.row_factors)
    acc = core_list[0][0, digits[0], :, :]  # (n1, p1)
    for k in range(1, plan.order):
        sl = core_list[k][:, digits[k], :, :]  # (p_{k-1}, n_k, p_k)
        acc = np.tensordot(acc, sl, axes=([acc.ndim - 1], [0]))
    return acc.reshape(plan.padded_cols)[: plan.cols]


# ---------------------------------------------------------------------------
# Exact high-rank embeddings of dense matrices (oracle constructions)


def tt_from_dense_exact(w: np.ndarray, row_factors, col_factors) -> tuple[TTCores, TensorShapePlan]:
    """Exact TT representation of a dense matrix by index encoding.

    Row cores are identity encoders of the row digits, the first column core
    holds the data, and remaining column cores decode the column digits.  The
    ranks are full (no approximation); useful for constructing students that
    reproduce a dense teacher bit-for-bit modulo arithmetic order.
    """
    w = np.asarray(w)
    rows, cols = w.shape
    rf, cf = tuple(row_factors), tuple(col_factors)
    d = len(rf)
    pr, pc = math.prod(rf), math.prod(cf)
    if pr < rows or pc < cols:
        raise PlanError("factors do not cover the matrix")
    padded = np.zeros((pr, pc), dtype=w.dtype)
    padded[:rows, :cols] = w
    ranks = [1]
    left = 1
    for k in range(d):
        left *= rf[k]
        ranks.append(left)
    right_tail = [1]
    for k in range(d - 1, 0, -1):
        right_tail.append(right_tail[-1] * cf[k])
    right_tail = list(reversed(right_tail))  # prod(cf[k:]) for k = 1..d, then 1
    ranks.extend(right_tail)
    plan = TensorShapePlan(rows=rows, cols=cols, row_factors=rf, col_factors=cf,
                           ranks=tuple(ranks), format=TTFormat.TT)
    cores: list[np.ndarray] = []
    left = 1
    for k in range(d):
        core = np.zeros((left, rf[k], left * rf[k]), dtype=w.dtype)
        for a in range(left):
            for i in range(rf[k]):
                core[a, i, a * rf[k] + i] = 1.0
        cores.append(core)
        left *= rf[k]
    # data core: (pr, cf[0], prod(cf[1:]))
    data = padded.reshape((pr, cf[0], math.prod(cf[1:]) if d > 1 else 1))
    cores.append(data)
    right = math.prod(cf[1:]) if d > 1 else 1
    for k in range(1, d):
        tail = math.prod(cf[k + 1:]) if k + 1 < d else 1
        core = np.zeros((right, cf[k], tail), dtype=w.dtype)
        for j in range(cf[k]):
            for b in range(tail):
                core[j * tail + b, j, b] = 1.0
        cores.append(core)
        right = tail
    return TTCores(cores, plan), plan


def ttm_from_dense_exact(w: np.ndarray, row_factors, col_factors) -> tuple[TTMCores, TensorShapePlan]:
    """Exact TTM representation: leading cores encode (row, col) digit pairs,
    the final core carries the data."""
    w = np.asarray(w)
    rows, cols = w.shape
    rf, cf = tuple(row_factors), tuple(col_factors)
    d = len(rf)
    pr, pc = math.prod(rf), math.prod(cf)
    if pr < rows or pc < cols:
        raise PlanError("factors do not cover the matrix")
    padded = np.zeros((pr, pc), dtype=w.dtype)
    padded[:rows, :cols] = w
    ranks = [1]
    vol = 1
    for k in range(d - 1):
        vol *= rf[k] * cf[k]
        ranks.append(vol)
    ranks.append(1)
    plan = TensorShapePlan(rows=rows, cols=cols, row_factors=rf, col_factors=cf,
                           ranks=tuple(ranks), format=TTFormat.TTM)
    if d == 1:
        return TTMCores([padded.reshape(1, pr, pc, 1)], plan), plan
    cores = []
    left = 1
    for k in range(d - 1):
        core = np.zeros((left, rf[k], cf[k], left * rf[k] * cf[k]), dtype=w.dtype)
        for a in range(left):
            for i in range(rf[k]):
                for j in range(cf[k]):
                    core[a, i, j, (a * rf[k] + i) * cf[k] + j] = 1.0
        cores.append(core)
        left *= rf[k] * cf[k]
    # final core: rank index enumerates (i1, j1, ..., i_{d-1}, j_{d-1})
    tensor = padded.reshape(list(rf) + list(cf))
    perm = [ax for k in range(d) for ax in (k, d + k)]
    interleaved = np.ascontiguousarray(tensor.transpose(perm))
    cores.append(interleaved.reshape(left, rf[-1], cf[-1], 1))
    return TTMCores(cores, plan), plan
