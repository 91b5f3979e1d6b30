"""Comparison position encodings behind one pluggable interface.

Two attachment points exist: embedding-level encodings add a vector per
token before the transformer (absolute, sinusoidal or learnable), and
attention-level strategies either rewrite q/k (rotations) or contribute an
additive logit bias (relative tables, contextual gating). A strategy object
exposes ``rewrite_qk``, ``bias`` and ``parameters``; ``kind`` names it.
"""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np

from . import tensor as T
from .core import PatchGrid, PositionTable, accumulate_positions, interpolate_logits
from .rng import trunc_normal
from .tensor import Tensor


class PEStrategy(Protocol):
    kind: str
    rewrites_qk: bool

    def rewrite_qk(self, q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]: ...

    def bias(self, q: Tensor, k: Tensor) -> Tensor | None: ...

    def parameters(self) -> list[Tensor]: ...


# -- absolute embedding-level encodings -----------------------------------


def sinusoidal_ape(position: int, dim: int) -> np.ndarray:
    """Fixed sin/cos vector for one token index.

    Entry 2j is sin(i / 10000^(2j/dim)), entry 2j+1 the matching cos.
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs even dim, got {dim}")
    if position < 0:
        raise ValueError(f"position must be non-negative, got {position}")
    j = np.arange(dim // 2, dtype=np.float64)
    ang = position / np.power(10000.0, 2.0 * j / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def sinusoidal_table(count: int, dim: int, dtype=np.float32) -> np.ndarray:
    return np.stack([sinusoidal_ape(i, dim) for i in range(count)]).astype(dtype)


class ApeSinusoidal:
    """Fixed per-token offsets; an optional leading class token gets zeros."""

    kind = "ape-sinusoidal"

    def __init__(self, grid: PatchGrid, d_model: int, extra_tokens: int = 0,
                 dtype=np.float32):
        patches = sinusoidal_table(grid.n, d_model, dtype)
        rows = np.zeros((extra_tokens + grid.n, d_model), dtype=dtype)
        rows[extra_tokens:] = patches
        self.table = Tensor(rows)

    def offsets(self) -> Tensor:
        return self.table

    def parameters(self) -> list[Tensor]:
        return []


class ApeLearnable:
    """Trainable per-token offsets, truncated-normal initialized."""

    kind = "ape-learnable"

    def __init__(self, grid: PatchGrid, d_model: int, rng, extra_tokens: int = 0,
                 std: float = 0.02, dtype=np.float32):
        self.table = Tensor(trunc_normal(rng, (extra_tokens + grid.n, d_model),
                                         std=std, dtype=dtype),
                            requires_grad=True)

    def offsets(self) -> Tensor:
        return self.table

    def parameters(self) -> list[Tensor]:
        return [self.table]


def learnable_ape(grid: PatchGrid, d_model: int, rng) -> Tensor:
    """The trainable offset table for a grid, one row per patch."""
    return ApeLearnable(grid, d_model, rng).table


# -- relative table bias --------------------------------------------------


def _offset_one_hot(deltas: np.ndarray, span: int, dtype) -> np.ndarray:
    """(N*N, 2*span-1) one-hot of offset indices; matmul against it is a
    gather whose transpose accumulates duplicate offsets correctly."""
    idx = deltas.reshape(-1) + span - 1
    hot = np.zeros((idx.size, 2 * span - 1), dtype=dtype)
    hot[np.arange(idx.size), idx] = 1.0
    return hot


def rpe_bias(grid: PatchGrid, table_x: Tensor, table_y: Tensor) -> Tensor:
    """Offset-indexed additive bias: r_x[x_i - x_j] + r_y[y_i - y_j].

    table_x: (heads, 2W-1), table_y: (heads, 2H-1), offset 0 at the center
    index. Returns (heads, N, N); depends on coordinate differences only.
    """
    ys, xs = np.divmod(np.arange(grid.n), grid.w)
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    heads = table_x.shape[0]
    hot_x = _offset_one_hot(dx, grid.w, table_x.dtype)
    hot_y = _offset_one_hot(dy, grid.h, table_y.dtype)
    bx = T.matmul(table_x, Tensor(hot_x.T))
    by = T.matmul(table_y, Tensor(hot_y.T))
    return T.reshape(T.add(bx, by), (heads, grid.n, grid.n))


class RpeEncoding:
    """Learnable relative-offset bias tables, one pair per head."""

    kind = "rpe"
    rewrites_qk = False

    def __init__(self, grid: PatchGrid, heads: int, rng, std: float = 0.02,
                 dtype=np.float32):
        self.grid = grid
        self.table_x = Tensor(trunc_normal(rng, (heads, 2 * grid.w - 1), std=std,
                                           dtype=dtype), requires_grad=True)
        self.table_y = Tensor(trunc_normal(rng, (heads, 2 * grid.h - 1), std=std,
                                           dtype=dtype), requires_grad=True)

    def rewrite_qk(self, q, k):
        return q, k

    def bias(self, q, k):
        return rpe_bias(self.grid, self.table_x, self.table_y)

    def parameters(self):
        return [self.table_x, self.table_y]


# -- axial 2D rotations ---------------------------------------------------


def _rope2d_angles(grid: PatchGrid, d_head: int) -> np.ndarray:
    """(N, d_head/2) rotation angles: first half of the pairs turn with the
    x coordinate, second half with y, geometric frequencies per pair."""
    d_axis = d_head // 2
    t = np.arange(d_axis // 2, dtype=np.float64)
    theta = np.power(10000.0, -t / (d_axis / 2.0))
    ys, xs = np.divmod(np.arange(grid.n), grid.w)
    return np.concatenate([xs[:, None] * theta[None, :],
                           ys[:, None] * theta[None, :]], axis=1)


def rope2d_axial(qk: Tensor, grid: PatchGrid) -> Tensor:
    """Rotate adjacent feature pairs of each patch token by axis-dependent
    angles; logits between rotated q and k depend only on coordinate offsets.

    qk: (..., N, d_head) with d_head divisible by 4.
    """
    d = qk.shape[-1]
    if d % 4 != 0:
        raise ValueError(f"axial rotation needs head dim divisible by 4, got {d}")
    if qk.shape[-2] != grid.n:
        raise ValueError(f"{qk.shape[-2]} tokens do not fill a {grid.h}x{grid.w} grid")
    ang = _rope2d_angles(grid, d)
    cos = np.cos(ang).astype(qk.dtype)
    sin = np.sin(ang).astype(qk.dtype)
    pairs = T.reshape(qk, qk.shape[:-1] + (d // 2, 2))
    even = pairs[..., 0]
    odd = pairs[..., 1]
    rot_even = T.add(T.mul(even, cos), T.neg(T.mul(odd, sin)))
    rot_odd = T.add(T.mul(odd, cos), T.mul(even, sin))
    stacked = T.concat([T.reshape(rot_even, rot_even.shape + (1,)),
                        T.reshape(rot_odd, rot_odd.shape + (1,))], axis=-1)
    return T.reshape(stacked, qk.shape)


class Rope2dAxial:
    """Rotation-only strategy; contributes no additive bias."""

    kind = "rope2d-axial"
    rewrites_qk = True

    def __init__(self, grid: PatchGrid):
        self.grid = grid

    def rewrite_qk(self, q, k):
        return rope2d_axial(q, self.grid), rope2d_axial(k, self.grid)

    def bias(self, q, k):
        return None

    def parameters(self):
        return []


# -- contextual gating over the raster sequence ---------------------------


def cope1d(q: Tensor, k: Tensor, table: PositionTable,
           scale: float = 1.0) -> Tensor:
    """Causal contextual-position bias over a 1D token order.

    Gates sigmoid(scale * q_i.k_j) for j <= i accumulate into fractional
    positions p_ij counting from j up to i; the bias is the q-projected
    table logit interpolated at p_ij, zero above the diagonal.

    q, k: (..., T, d). Returns (..., T, T).
    """
    t = q.shape[-2]
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = T.mul(T.matmul(q, kt), scale)
    tril = np.tril(np.ones((t, t), dtype=q.dtype))
    gates = T.mul(T.sigmoid(logits), tril)
    pos = accumulate_positions(gates, table.clamp_bound)
    z_int = T.matmul(q, T.transpose(table.e))
    return T.mul(interpolate_logits(z_int, pos), tril)


class CopeEncoding:
    """cope1d as an attention strategy over raster-ordered patches.

    Gate logits are scaled by 1/sqrt(d_head) inside the model, like every
    other logit path; pass scale=1.0 for the bare definition.
    """

    kind = "cope1d"
    rewrites_qk = False

    def __init__(self, grid: PatchGrid, d_head: int, m: int | None = None,
                 rng=None, dtype=np.float32, scale: float | None = None):
        self.grid = grid
        m = grid.n if m is None else m
        self.table = PositionTable(m, d_head, rng=rng, dtype=dtype)
        self.scale = 1.0 / math.sqrt(d_head) if scale is None else float(scale)

    def rewrite_qk(self, q, k):
        return q, k

    def bias(self, q, k):
        return cope1d(q, k, self.table, self.scale)

    def parameters(self):
        return [self.table.e]
