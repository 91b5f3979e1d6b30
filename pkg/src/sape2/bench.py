"""Timing and analytic-memory benchmark for the pairwise bias kernel.

Times the forward bias computation at growing square token counts, fits a
log-log slope, and reports per-head intermediate sizes: the N*W gate and
position arrays per axis against the two N*N distance matrices, which
dominate from small N on.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .core import PatchGrid, PositionTable, sape2_bias
from .rng import make_rng
from .tensor import Tensor, no_grad


@dataclass
class BenchRow:
    n: int
    side: int
    wall_min: float
    wall_median: float
    wall_max: float
    mem_gates: int
    mem_positions: int
    mem_bias: int

    @property
    def mem_total(self) -> int:
        return self.mem_gates + self.mem_positions + self.mem_bias


def analytic_memory(n: int, side: int) -> tuple[int, int, int]:
    """Per-head float counts of the main intermediates: gates and positions
    are N*W per axis (two axes), the distance matrices 2*N*N."""
    gates = 2 * n * side
    positions = 2 * n * side
    bias = 2 * n * n
    return gates, positions, bias


def _square_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"token count {n} is not a square grid")
    return side


def bench_bias(sizes=(16, 64, 256, 1024), d_head: int = 64, heads: int = 6,
               batch: int = 8, repeats: int = 5, seed: int = 0,
               threads: int = 1, mode: str = "key") -> tuple[list[BenchRow], float]:
    """Returns per-size rows and the fitted log-log time slope (min times)."""
    rows = []
    rng = make_rng(seed, stream=99)
    with threadpool_limits(limits=threads):
        for n in sizes:
            side = _square_side(n)
            grid = PatchGrid(side, side)
            q = Tensor(rng.standard_normal((batch, heads, n, d_head)))
            k = Tensor(rng.standard_normal((batch, heads, n, d_head)))
            tx = PositionTable(side, d_head, rng=rng, dtype=np.float64)
            ty = PositionTable(side, d_head, rng=rng, dtype=np.float64)
            walls = []
            with no_grad():
                sape2_bias(q, k, (tx, ty), grid, mode)  # warm caches
                for _ in range(repeats):
                    tic = time.perf_counter()
                    sape2_bias(q, k, (tx, ty), grid, mode)
                    walls.append(time.perf_counter() - tic)
            walls.sort()
            g, p, b = analytic_memory(n, side)
            rows.append(BenchRow(n, side, walls[0], walls[len(walls) // 2],
                                 walls[-1], g, p, b))
    xs = np.log([r.n for r in rows])
    ys = np.log([r.wall_min for r in rows])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return rows, slope


def write_report(path: str, rows: list[BenchRow], slope: float,
                 threads: int) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# sape2-bench-v1 threads={threads} slope={slope:.4f}\n")
        fh.write("n,side,wall_min,wall_median,wall_max,"
                 "mem_gates,mem_positions,mem_bias,mem_total\n")
        for r in rows:
            fh.write(f"{r.n},{r.side},{r.wall_min:.6f},{r.wall_median:.6f},"
                     f"{r.wall_max:.6f},{r.mem_gates},{r.mem_positions},"
                     f"{r.mem_bias},{r.mem_total}\n")
