"""Slow, obviously-correct reference implementations used only by tests.

Everything here is scalar-loop python arithmetic: no kernel is shared with the
fast path, so agreement between the two is evidence rather than tautology.
Instances are expected to be small (grid side <= 16, N <= 64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _dot(a, b) -> float:
    s = 0.0
    for x, y in zip(a, b):
        s += float(x) * float(y)
    return s


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _line_indices(grid: tuple[int, int], axis: str) -> list[list[int]]:
    """Raster indices grouped into rows (axis x) or columns (axis y)."""
    h, w = grid
    if axis == "x":
        return [[y * w + x for x in range(w)] for y in range(h)]
    if axis == "y":
        return [[y * w + x for y in range(h)] for x in range(w)]
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def direct_sape_vector(q: np.ndarray, k: np.ndarray, table: np.ndarray,
                       axis: str, grid: tuple[int, int], mode: str = "key",
                       scale: float | None = None,
                       clamp_bound: float | None = None) -> np.ndarray:
    """Per-patch axis vectors, evaluated literally.

    For each patch i and each target slot r along its grid line: sum the
    sigmoid gates over line positions >= r, clamp, build the interpolated
    table embedding as an explicit vector, then dot it with the projector
    (k_i in key mode, q_i in query mode). No integer-precompute shortcut.

    q, k: (N, d) for one head. table: (M+1, d). Returns (N, L) where L is
    the line length of ``axis``.
    """
    if mode not in ("query", "key"):
        raise ValueError(f"mode must be 'query' or 'key', got {mode!r}")
    n, d = q.shape
    m_max = table.shape[0] - 1
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    if clamp_bound is None:
        clamp_bound = float(m_max - 1)
    lines = _line_indices(grid, axis)
    length = len(lines[0])
    out = np.zeros((n, length), dtype=np.float64)
    for line in lines:
        for i in line:
            proj = k[i] if mode == "key" else q[i]
            gates = [_sigmoid(scale * _dot(q[i], k[j])) for j in line]
            for r in range(length):
                p = 0.0
                for s in range(r, length):
                    p += gates[s]
                p = min(p, clamp_bound)
                lo = math.floor(p)
                hi = math.ceil(p)
                frac = p - lo
                emb = [frac * float(table[hi][c]) + (1.0 - frac) * float(table[lo][c])
                       for c in range(d)]
                out[i, r] = _dot(proj, emb)
    return out


def brute_force_bias(q: np.ndarray, k: np.ndarray,
                     table_x: np.ndarray, table_y: np.ndarray,
                     grid: tuple[int, int], mode: str = "key",
                     scale: float | None = None,
                     clamp_x: float | None = None,
                     clamp_y: float | None = None) -> np.ndarray:
    """All-pairs positional bias by scalar loops: axis vectors per patch,
    then the sum of x- and y-axis Euclidean distances for every pair."""
    vx = direct_sape_vector(q, k, table_x, "x", grid, mode, scale, clamp_x)
    vy = direct_sape_vector(q, k, table_y, "y", grid, mode, scale, clamp_y)
    n = q.shape[0]
    bias = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            dx = 0.0
            for r in range(vx.shape[1]):
                t = float(vx[i, r]) - float(vx[j, r])
                dx += t * t
            dy = 0.0
            for r in range(vy.shape[1]):
                t = float(vy[i, r]) - float(vy[j, r])
                dy += t * t
            bias[i, j] = math.sqrt(dx) + math.sqrt(dy)
    return bias


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    bias: np.ndarray | None = None,
                    bias_after_scale: bool = False) -> np.ndarray:
    """Scalar-loop softmax attention for one head.

    Logits are (q_i.k_j + b_ij) / sqrt(d) by default, or q_i.k_j / sqrt(d)
    + b_ij when ``bias_after_scale`` is set.
    """
    t, d = q.shape
    inv = 1.0 / math.sqrt(d)
    out = np.zeros_like(v, dtype=np.float64)
    for i in range(t):
        logits = []
        for j in range(t):
            b = float(bias[i, j]) if bias is not None else 0.0
            if bias_after_scale:
                logits.append(_dot(q[i], k[j]) * inv + b)
            else:
                logits.append((_dot(q[i], k[j]) + b) * inv)
        mx = max(logits)
        ex = [math.exp(x - mx) for x in logits]
        z = sum(ex)
        for j in range(t):
            wj = ex[j] / z
            for c in range(v.shape[1]):
                out[i, c] += wj * float(v[j, c])
    return out


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences (f(x+e) - f(x-e)) / (2 step), one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = float(f(x))
        x[idx] = orig - step
        fm = float(f(x))
        x[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at index {idx}")
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class OracleReport:
    """Elementwise comparison summary between a fast path and its oracle."""

    max_abs_err: float
    max_rel_err: float
    location: tuple[int, ...]
    tolerance: float
    passed: bool

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict}: max_abs={self.max_abs_err:.3e} "
                f"max_rel={self.max_rel_err:.3e} at {self.location} "
                f"(tol {self.tolerance:.1e})")


def compare(actual: np.ndarray, expected: np.ndarray,
            tolerance: float) -> OracleReport:
    """Relative error per element, falling back to absolute error where the
    expected magnitude is below 1e-12."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {e.shape}")
    abs_err = np.abs(a - e)
    denom = np.abs(e)
    rel = np.where(denom < 1e-12, abs_err, abs_err / np.maximum(denom, 1e-300))
    flat = int(np.argmax(rel)) if rel.size else 0
    loc = tuple(int(i) for i in np.unravel_index(flat, rel.shape)) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    return OracleReport(max_abs_err=max_abs, max_rel_err=max_rel,
                        location=loc, tolerance=tolerance,
                        passed=max_rel <= tolerance)


# -- golden files ---------------------------------------------------------
#
# Text format, one record per line: `index value`, with `#`-prefixed header
# lines recording how the array was produced (seed, dims). Tests recompute
# from the recorded inputs and compare; stored values guard against drift.


def write_golden(path, array: np.ndarray, meta: dict | None = None) -> None:
    arr = np.asarray(array, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key} {val}\n")
        fh.write(f"# shape {' '.join(str(s) for s in arr.shape)}\n")
        for idx, val in enumerate(arr.reshape(-1)):
            fh.write(f"{idx} {float(val)!r}\n")


def read_golden(path) -> tuple[np.ndarray, dict]:
    meta: dict[str, str] = {}
    values: list[float] = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                meta[key] = val
                continue
            idx_s, val_s = line.split()
            idx = int(idx_s)
            if idx != len(values):
                raise ValueError(f"golden file {path}: record {idx} out of order")
            values.append(float(val_s))
    shape = tuple(int(s) for s in meta.get("shape", "").split()) if "shape" in meta else (len(values),)
    arr = np.array(values, dtype=np.float64).reshape(shape)
    return arr, meta
