"""Semantic-gated 2D position bias for attention.

The pipeline, per axis: sigmoid gates from content similarity, suffix-summed
into fractional positions, clamped, mapped through a learnable position table
by linear interpolation, and dotted with the patch's own projector to give a
per-patch axis vector. The attention bias between two patches is the sum of
the Euclidean distances between their x-axis and y-axis vectors.

Patches are raster-ordered, row-major with x fastest: i = y*W + x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Rectangular patch layout: h rows by w columns."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid sides must be positive, got {self.h}x{self.w}")

    @property
    def n(self) -> int:
        return self.h * self.w

    def coords(self, i: int) -> tuple[int, int]:
        """(y, x) of raster index i."""
        return divmod(i, self.w)

    def index(self, y: int, x: int) -> int:
        return y * self.w + x


class PositionTable:
    """Learnable embeddings for integer positions 0..m, shared across heads.

    clamp_bound caps accumulated positions; the default m-1 reproduces the
    reference behavior, m is the permissive alternative.
    """

    def __init__(self, m: int, d: int, rng=None, std: float = 0.02,
                 dtype=np.float32, clamp_bound: float | None = None):
        if m < 1:
            raise ValueError(f"table needs m >= 1, got {m}")
        if clamp_bound is not None and not (0.0 < clamp_bound <= m):
            raise ValueError(f"clamp_bound {clamp_bound} outside (0, {m}]")
        self.m = m
        self.clamp_bound = float(m - 1) if clamp_bound is None else float(clamp_bound)
        data = (trunc_normal(rng, (m + 1, d), std=std, dtype=dtype)
                if rng is not None else np.zeros((m + 1, d), dtype=dtype))
        self.e = Tensor(data, requires_grad=True)


def compute_gates(q_axis: Tensor, k_axis: Tensor, scale: float) -> Tensor:
    """Content gates sigmoid(scale * q k^T) over every pair inside each slice.

    q_axis, k_axis: (..., L, d) where each (L, d) slice is one grid line.
    Returns (..., L, L); no causal masking, the full line participates.
    """
    if q_axis.shape != k_axis.shape:
        raise ValueError(f"slice shapes differ: {q_axis.shape} vs {k_axis.shape}")
    nd = k_axis.ndim
    kt = T.transpose(k_axis, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return T.sigmoid(T.mul(T.matmul(q_axis, kt), scale))


def accumulate_positions(gates: Tensor, clamp_bound: float) -> Tensor:
    """Fractional positions: suffix sums of gates along the line, clamped.

    out[..., i, r] = min(sum of gates[..., i, s] for s >= r, clamp_bound);
    non-increasing in r for fixed i.
    """
    return T.clamp_max(T.reverse_cumsum(gates, axis=-1), clamp_bound)


def interpolate_logits(z_int: Tensor, p: Tensor) -> Tensor:
    """Evaluate per-position logits at fractional positions.

    z_int: (..., L, m+1) logits at integer positions; p: (..., L, L)
    fractional positions. Linear interpolation between the two bracketing
    integers; the bracketing indices are locally constant, so gradient flows
    through the fractional weight and the gathered logits only.
    """
    m = z_int.shape[-1] - 1
    pd = p.data
    if np.any(pd < 0.0) or np.any(pd > m):
        raise ValueError(f"positions outside [0, {m}]: range [{pd.min()}, {pd.max()}]")
    lo = np.floor(pd)
    hi = np.ceil(pd)
    z_lo = T.take_last(z_int, lo.astype(np.int64))
    z_hi = T.take_last(z_int, hi.astype(np.int64))
    frac = T.add(p, Tensor(-lo))
    return T.add(z_lo, T.mul(frac, T.add(z_hi, T.neg(z_lo))))


def _fold_batch(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-2]
    n, d = x.shape[-2], x.shape[-1]
    b = int(np.prod(lead)) if lead else 1
    return T.reshape(x, (b, n, d)), lead


def build_axis_vectors(q: Tensor, k: Tensor, table: PositionTable, axis: str,
                       grid: PatchGrid, mode: str = "key",
                       scale: float | None = None) -> Tensor:
    """Per-patch axis vectors for one axis.

    q, k: (..., N, d). Each patch's vector has one entry per slot along its
    grid line (length W for axis x, H for axis y): the interpolated position
    logit of that slot, projected with the patch's own key (key mode) or
    query (query mode). Gates always come from q.k regardless of mode.
    """
    if mode not in ("query", "key"):
        raise ValueError(f"mode must be 'query' or 'key', got {mode!r}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    if q.shape[-2] != grid.n:
        raise ValueError(f"{q.shape[-2]} tokens do not fill a {grid.h}x{grid.w} grid")
    d = q.shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    qf, lead = _fold_batch(q)
    kf, _ = _fold_batch(k)
    b = qf.shape[0]
    h, w = grid.h, grid.w
    qs = T.reshape(qf, (b, h, w, d))
    ks = T.reshape(kf, (b, h, w, d))
    if axis == "y":
        qs = T.transpose(qs, (0, 2, 1, 3))
        ks = T.transpose(ks, (0, 2, 1, 3))
    gates = compute_gates(qs, ks, scale)
    pos = accumulate_positions(gates, table.clamp_bound)
    proj = ks if mode == "key" else qs
    z_int = T.matmul(proj, T.transpose(table.e))
    z = interpolate_logits(z_int, pos)
    if axis == "y":
        z = T.transpose(z, (0, 2, 1, 3))
    length = w if axis == "x" else h
    return T.reshape(z, lead + (grid.n, length))


def axis_bias(vectors: Tensor) -> Tensor:
    """All-pairs Euclidean distances between per-patch axis vectors."""
    return T.pairwise_l2(vectors)


def sape2_bias(q: Tensor, k: Tensor,
               tables: tuple[PositionTable, PositionTable],
               grid: PatchGrid, mode: str = "key",
               scale: float | None = None) -> Tensor:
    """Full positional bias: x-axis distances plus y-axis distances.

    q, k: (..., N, d) with N == grid.n; tables is the (x, y) pair. Returns
    (..., N, N), symmetric, zero-diagonal, non-negative.
    """
    table_x, table_y = tables
    vx = build_axis_vectors(q, k, table_x, "x", grid, mode, scale)
    vy = build_axis_vectors(q, k, table_y, "y", grid, mode, scale)
    return T.add(axis_bias(vx), axis_bias(vy))


class Sape2Encoding:
    """Attention-level strategy owning the learnable x/y position tables.

    mode picks the projector (key is the default, query optional); sign
    lets the bias be subtracted instead of added.
    """

    kind = "sape2"
    rewrites_qk = False

    def __init__(self, grid: PatchGrid, d_head: int, mode: str = "key",
                 m_x: int | None = None, m_y: int | None = None,
                 rng=None, dtype=np.float32, clamp_to_extent: bool = False,
                 sign: float = 1.0):
        if mode not in ("query", "key"):
            raise ValueError(f"mode must be 'query' or 'key', got {mode!r}")
        self.grid = grid
        self.mode = mode
        self.sign = float(sign)
        m_x = grid.w if m_x is None else m_x
        m_y = grid.h if m_y is None else m_y
        cb_x = float(m_x) if clamp_to_extent else None
        cb_y = float(m_y) if clamp_to_extent else None
        self.table_x = PositionTable(m_x, d_head, rng=rng, dtype=dtype, clamp_bound=cb_x)
        self.table_y = PositionTable(m_y, d_head, rng=rng, dtype=dtype, clamp_bound=cb_y)

    def rewrite_qk(self, q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
        return q, k

    def bias(self, q: Tensor, k: Tensor) -> Tensor:
        b = sape2_bias(q, k, (self.table_x, self.table_y), self.grid, self.mode)
        return b if self.sign == 1.0 else T.mul(b, self.sign)

    def parameters(self) -> list[Tensor]:
        return [self.table_x.e, self.table_y.e]


def attention_with_pe(q: Tensor, k: Tensor, v: Tensor, pe=None,
                      bias_after_scale: bool = False) -> Tensor:
    """Scaled-dot-product attention with a pluggable position encoding.

    q, k, v: (..., T, d). ``pe`` may rewrite q/k (rotations) and/or supply
    an additive (..., T, T) logit bias; None means content-only attention.
    The bias joins the logits before the 1/sqrt(d) scaling by default;
    ``bias_after_scale`` adds it to the already-scaled logits instead.
    """
    d = q.shape[-1]
    if pe is not None:
        q, k = pe.rewrite_qk(q, k)
    nd = k.ndim
    logits = T.matmul(q, T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2)))
    inv = 1.0 / math.sqrt(d)
    bias = pe.bias(q, k) if pe is not None else None
    if bias is None:
        scaled = T.mul(logits, inv)
    elif bias_after_scale:
        scaled = T.add(T.mul(logits, inv), bias)
    else:
        scaled = T.mul(T.add(logits, bias), inv)
    return T.matmul(T.softmax(scaled, axis=-1), v)
