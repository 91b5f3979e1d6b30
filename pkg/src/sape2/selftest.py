"""In-process verification suite: kernel trivia, baseline properties, the
bias pipeline against its scalar oracles, and the frozen golden instance.

Everything runs at 64-bit on small instances; the whole suite is meant to
finish in well under a minute.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .baselines import cope1d, rope2d_axial, rpe_bias, sinusoidal_ape
from .core import (PatchGrid, PositionTable, Sape2Encoding, accumulate_positions,
                   attention_with_pe, build_axis_vectors, compute_gates, sape2_bias)
from .optim import Adam
from .oracles import (brute_force_bias, compare, direct_sape_vector,
                      finite_difference_grad, naive_attention, read_golden,
                      write_golden)
from .rng import make_rng
from .tensor import Tensor
from .vit import VitConfig, VitModel

DEFAULT_GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

# frozen golden instance: seeded 2x2 grid, d=4, m=2, key mode
GOLDEN_NAME = "bias_2x2_seed7.txt"
_GOLDEN_SEED, _GOLDEN_GRID, _GOLDEN_D, _GOLDEN_M = 7, (2, 2), 4, 2


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand_instance(rng, n, d, m, dtype=np.float64):
    q = rng.standard_normal((n, d)).astype(dtype)
    k = rng.standard_normal((n, d)).astype(dtype)
    tx = rng.standard_normal((m + 1, d)).astype(dtype)
    ty = rng.standard_normal((m + 1, d)).astype(dtype)
    return q, k, tx, ty


def _table(values: np.ndarray) -> PositionTable:
    t = PositionTable(values.shape[0] - 1, values.shape[1], dtype=np.float64)
    t.e.data = np.asarray(values, dtype=np.float64)
    return t


def golden_instance():
    rng = make_rng(_GOLDEN_SEED, stream=3)
    n = _GOLDEN_GRID[0] * _GOLDEN_GRID[1]
    return _rand_instance(rng, n, _GOLDEN_D, _GOLDEN_M)


def ensure_golden(golden_dir: str = DEFAULT_GOLDEN_DIR) -> str:
    """Write the golden bias file on first computation; afterwards frozen."""
    path = os.path.join(golden_dir, GOLDEN_NAME)
    if not os.path.exists(path):
        os.makedirs(golden_dir, exist_ok=True)
        q, k, tx, ty = golden_instance()
        bias = brute_force_bias(q, k, tx, ty, _GOLDEN_GRID)
        write_golden(path, bias, meta={
            "seed": _GOLDEN_SEED, "grid": f"{_GOLDEN_GRID[0]} {_GOLDEN_GRID[1]}",
            "d": _GOLDEN_D, "m": _GOLDEN_M, "mode": "key",
        })
    return path


# -- individual checks ----------------------------------------------------


def check_matmul():
    eye = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    if not np.array_equal(eye.data, [[1.0, 2.0], [3.0, 4.0]]):
        return False, "identity product broken"
    one = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    if one.data[0, 0] != 11.0:
        return False, f"[[1,2]]@[[3],[4]] gave {one.data[0, 0]}"
    rng = make_rng(0, stream=5)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    naive = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for l in range(7):
                naive[i, j] += a[i, l] * b[l, j]
    rep = compare(T.matmul(Tensor(a), Tensor(b)).data, naive, 1e-12)
    return rep.passed, f"5x7 @ 7x3 vs triple loop: {rep}"


def check_sigmoid():
    vals = T.sigmoid(Tensor([0.0, math.log(3.0), -math.log(3.0)])).data
    if not (abs(vals[0] - 0.5) < 1e-15 and abs(vals[1] - 0.75) < 1e-15
            and abs(vals[2] - 0.25) < 1e-15):
        return False, f"sigmoid(0, ln3, -ln3) = {vals}"
    # strict (0,1) holds through the representable regime; huge arguments
    # round to the boundary but stay finite
    strict = T.sigmoid(Tensor([30.0, -30.0])).data
    huge = T.sigmoid(Tensor([700.0, -700.0])).data
    ok = (0.0 < strict[1] and strict[0] < 1.0 and np.isfinite(huge).all()
          and 0.0 <= huge.min() and huge.max() <= 1.0)
    return ok, f"sigmoid(0, ln3, -ln3) = {vals}"


def check_reverse_cumsum():
    a = T.reverse_cumsum(Tensor([1.0, 2.0, 3.0]), axis=0).data
    b = T.reverse_cumsum(Tensor([[1.0, 1.0, 1.0, 1.0]]), axis=-1).data
    ok = np.array_equal(a, [6.0, 5.0, 3.0]) and np.array_equal(b, [[4.0, 3.0, 2.0, 1.0]])
    return ok, f"[1,2,3] -> {a}"


def check_clamp():
    a = T.clamp_max(Tensor([1.0, 5.0, 3.0]), 3.0).data
    b = T.clamp_max(Tensor([0.5, 2.0]), 10.0).data
    c = T.clamp_max(Tensor([0.0, 4.0]), 0.0).data
    ok = (np.array_equal(a, [1.0, 3.0, 3.0]) and np.array_equal(b, [0.5, 2.0])
          and np.array_equal(c, [0.0, 0.0]))
    return ok, f"clamp([1,5,3], 3) = {a}"


def check_pairwise():
    d = T.pairwise_l2(Tensor([[0.0, 0.0], [3.0, 4.0]])).data
    if abs(d[0, 1] - 5.0) > 1e-12 or d[0, 0] != 0.0 or d[1, 0] != d[0, 1]:
        return False, f"3-4-5 distance gave {d[0, 1]}"
    rng = make_rng(1, stream=5)
    rows = rng.standard_normal((6, 4))
    naive = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            naive[i, j] = math.sqrt(sum((rows[i, c] - rows[j, c]) ** 2 for c in range(4)))
    rep = compare(T.pairwise_l2(Tensor(rows)).data, naive, 1e-10)
    if not rep.passed:
        return False, f"random 6x4 vs double loop: {rep}"
    # sampled triangle inequality
    d = T.pairwise_l2(Tensor(rng.standard_normal((8, 3)))).data
    for _ in range(200):
        i, m, n = rng.integers(0, 8, size=3)
        if d[i, n] > d[i, m] + d[m, n] + 1e-9:
            return False, f"triangle violated at {(i, m, n)}"
    return True, "3-4-5, scalar-loop agreement, triangle inequality"


def check_softmax():
    u = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data
    if np.abs(u - 1.0 / 3.0).max() > 1e-15:
        return False, f"uniform case gave {u}"
    rng = make_rng(2, stream=5)
    x = rng.standard_normal((4, 6))
    s1 = T.softmax(Tensor(x), axis=-1).data
    s2 = T.softmax(Tensor(x + 13.7), axis=-1).data
    if np.abs(s1 - s2).max() > 1e-12:
        return False, "shift invariance broken"
    if np.abs(s1.sum(-1) - 1.0).max() > 1e-6:
        return False, "rows do not sum to 1"
    two = T.softmax(Tensor([1.0, 1.0 + 0.3]), axis=0).data
    sig = 1.0 / (1.0 + math.exp(0.3))
    return abs(two[0] - sig) < 1e-12, "uniform, shift-invariant, sums to 1"


def check_backward():
    x = Tensor([3.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    if abs(x.grad[0] - 6.0) > 1e-12:
        return False, f"d sum(x^2) at 3 gave {x.grad[0]}"
    y = Tensor([0.0], requires_grad=True)
    T.tsum(T.sigmoid(y)).backward()
    if abs(y.grad[0] - 0.25) > 1e-12:
        return False, f"d sum(sigmoid) at 0 gave {y.grad[0]}"
    rng = make_rng(3, stream=5)
    v = rng.standard_normal(5)

    def f(a):
        return float(np.sum(1.0 / (1.0 + np.exp(-a)) * a))

    z = Tensor(v, requires_grad=True)
    T.tsum(T.mul(T.sigmoid(z), z)).backward()
    fd = finite_difference_grad(f, v.copy())
    rep = compare(z.grad, fd, 1e-6)
    return rep.passed, f"x*sigmoid(x) grad vs finite differences: {rep}"


def check_adam():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([0.3, -0.7])
    opt.step()
    # first step moves by lr*sign(g) up to eps rounding
    expect = np.array([1.0 - 0.01 * (0.3 / (0.3 + 1e-8)),
                       -2.0 + 0.01 * (0.7 / (0.7 + 1e-8))])
    if np.abs(p.data - expect).max() > 1e-12:
        return False, f"first step gave {p.data}, expected {expect}"
    # zero gradient with fresh moments leaves the parameter in place
    z = Tensor(np.array([5.0]), requires_grad=True)
    opt2 = Adam([z], lr=0.01)
    z.grad = np.zeros(1)
    opt2.step()
    if abs(z.data[0] - 5.0) > 1e-12:
        return False, f"zero grad moved the parameter to {z.data[0]}"
    # many constant-grad steps descend
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt3 = Adam([w], lr=0.01)
    for _ in range(20):
        w.grad = np.array([2.0])
        opt3.step()
    return w.data[0] < 0.0, "closed-form first step, zero-grad hold, descent"


def check_sinusoidal():
    z = sinusoidal_ape(0, 8)
    if not (np.array_equal(z[0::2], np.zeros(4)) and np.array_equal(z[1::2], np.ones(4))):
        return False, f"index 0 gave {z}"
    o = sinusoidal_ape(1, 8)
    ok = abs(o[0] - math.sin(1.0)) < 1e-12 and abs(o[1] - math.cos(1.0)) < 1e-12
    return ok, f"first pair at index 1: ({o[0]:.5f}, {o[1]:.5f})"


def check_rpe():
    grid = PatchGrid(3, 3)
    rx = Tensor(np.arange(-2.0, 3.0)[None, :])  # r[delta] = delta
    ry = Tensor(np.arange(-2.0, 3.0)[None, :])
    bias = rpe_bias(grid, rx, ry).data[0]
    for i in range(9):
        for j in range(9):
            yi, xi = divmod(i, 3)
            yj, xj = divmod(j, 3)
            if abs(bias[i, j] - ((xi - xj) + (yi - yj))) > 1e-12:
                return False, f"offset table mismatch at {(i, j)}"
    return True, "3x3 enumeration with r[delta]=delta"


def check_rope():
    grid = PatchGrid(2, 4)
    rng = make_rng(4, stream=5)
    x = rng.standard_normal((grid.n, 8))
    rot = rope2d_axial(Tensor(x), grid).data
    if np.abs(rot[0] - x[0]).max() > 1e-12:
        return False, "patch (0,0) should be unrotated"
    pairs = x.reshape(grid.n, 4, 2)
    rpairs = rot.reshape(grid.n, 4, 2)
    if np.abs(np.linalg.norm(pairs, axis=-1) - np.linalg.norm(rpairs, axis=-1)).max() > 1e-12:
        return False, "pair norms not preserved"
    # logits depend only on coordinate offsets: compare (0,0)x(0,1) vs (1,1)x(1,2)
    grid2 = PatchGrid(4, 4)
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)
    base = np.zeros((grid2.n, 16))
    rot_q = rope2d_axial(Tensor(np.tile(q, (grid2.n, 1))), grid2).data
    rot_k = rope2d_axial(Tensor(np.tile(k, (grid2.n, 1))), grid2).data
    del base
    a = float(rot_q[grid2.index(0, 0)] @ rot_k[grid2.index(0, 1)])
    b = float(rot_q[grid2.index(1, 1)] @ rot_k[grid2.index(1, 2)])
    c = float(rot_q[grid2.index(2, 0)] @ rot_k[grid2.index(2, 1)])
    ok = abs(a - b) < 1e-9 and abs(a - c) < 1e-9
    return ok, f"identity at origin, norm-preserving, shift-invariant ({a:.6f})"


def check_cope():
    rng = make_rng(5, stream=5)
    t, d, m = 5, 4, 8
    q = rng.standard_normal((t, d))
    k = rng.standard_normal((t, d))
    tab = rng.standard_normal((m + 1, d))
    fast = cope1d(Tensor(q), Tensor(k), _table(tab)).data
    # scalar loop: causal gates, suffix-sum positions, q-projected interpolation
    slow = np.zeros((t, t))
    for i in range(t):
        gates = [1.0 / (1.0 + math.exp(-(q[i] @ k[j]))) for j in range(i + 1)]
        for j in range(i + 1):
            p = min(sum(gates[j:i + 1]), float(m - 1))
            lo, hi = math.floor(p), math.ceil(p)
            w = p - lo
            slow[i, j] = q[i] @ (w * tab[hi] + (1.0 - w) * tab[lo])
    rep = compare(fast, slow, 1e-10)
    if not rep.passed:
        return False, f"T=5 scalar oracle: {rep}"
    # all gates at 1: positions count tokens from j up to i
    ideal = np.zeros((t, t))
    for i in range(t):
        for j in range(i + 1):
            ideal[i, j] = min(i - j + 1, m - 1)
    tril = np.tril(np.ones((t, t)))
    pos = accumulate_positions(Tensor(tril), float(m - 1)).data * tril
    ok = np.abs(pos - ideal).max() < 1e-12
    return ok, f"scalar oracle + unit-gate counts: {rep}"


def check_path_equivalence():
    worst = 0.0
    for seed in range(10):
        rng = make_rng(seed, stream=6)
        for w in (2, 4, 8):
            for m in (2, 4, 8):
                grid = PatchGrid(1, w)
                q, k, tx, _ = _rand_instance(rng, w, 4, m)
                for mode in ("query", "key"):
                    direct = direct_sape_vector(q, k, tx, "x", (1, w), mode)
                    fast = build_axis_vectors(Tensor(q), Tensor(k), _table(tx),
                                              "x", grid, mode).data
                    rep = compare(fast, direct, 1e-12)
                    worst = max(worst, rep.max_rel_err)
                    if not rep.passed:
                        return False, f"seed {seed} W={w} M={m} {mode}: {rep}"
    return True, f"10 seeds, W/M in {{2,4,8}}, both modes; worst rel {worst:.2e}"


def check_bias_oracle():
    worst = 0.0
    for seed in range(5):
        rng = make_rng(seed, stream=7)
        for side in (2, 4):
            grid = PatchGrid(side, side)
            q, k, tx, ty = _rand_instance(rng, grid.n, 4, side)
            slow = brute_force_bias(q, k, tx, ty, (side, side))
            fast = sape2_bias(Tensor(q), Tensor(k), (_table(tx), _table(ty)),
                              grid).data
            rep = compare(fast, slow, 1e-10)
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                return False, f"seed {seed} {side}x{side}: {rep}"
    return True, f"5 seeds on 2x2 and 4x4; worst rel {worst:.2e}"


def check_invariants():
    rng = make_rng(6, stream=8)
    q = Tensor(rng.standard_normal((1, 4, 4, 8)))
    k = Tensor(rng.standard_normal((1, 4, 4, 8)))
    gates = compute_gates(q, k, scale=1.0 / math.sqrt(8)).data
    if not ((gates > 0.0).all() and (gates < 1.0).all()):
        return False, "gates left (0,1)"
    pos = accumulate_positions(Tensor(gates), 3.0).data
    if (np.diff(pos, axis=-1) > 1e-12).any() or (pos > 3.0).any():
        return False, "positions not non-increasing under the bound"
    forced = accumulate_positions(T.sigmoid(Tensor(np.full((1, 4, 4), 50.0))), 3.0).data
    ideal = np.minimum(np.arange(4, 0, -1, dtype=np.float64), 3.0)
    if np.abs(forced - ideal).max() > 1e-9:
        return False, f"saturated positions {forced[0, 0]} != {ideal}"
    return True, "gate bounds, monotonicity, saturated suffix counts"


def check_attention_oracle():
    rng = make_rng(7, stream=9)
    grid = PatchGrid(2, 2)
    q, k, tx, ty = _rand_instance(rng, grid.n, 4, 2)
    v = rng.standard_normal((grid.n, 4))
    enc = Sape2Encoding(grid, 4, dtype=np.float64)
    enc.table_x.e.data = tx
    enc.table_y.e.data = ty
    fast = attention_with_pe(Tensor(q[None]), Tensor(k[None]), Tensor(v[None]),
                             enc).data[0]
    slow = naive_attention(q, k, v, brute_force_bias(q, k, tx, ty, (2, 2)))
    rep = compare(fast, slow, 1e-9)
    single = attention_with_pe(Tensor(v[:1][None]), Tensor(v[:1][None]),
                               Tensor(v[:1][None])).data[0]
    ok = np.abs(single - v[:1]).max() < 1e-12
    return rep.passed and ok, f"2x2 grid vs scalar attention: {rep}"


def check_zero_table_equivalence():
    cfg = VitConfig(image_size=8, patch_size=4, hidden_dim=32, depth=2, heads=4,
                    num_classes=5, pe_strategy="sape2")
    sape = VitModel(cfg, seed=11, dtype=np.float64)
    for blk in sape.blocks:
        blk["pe"].table_x.e.data[:] = 0.0
        blk["pe"].table_y.e.data[:] = 0.0
    plain_cfg = VitConfig(image_size=8, patch_size=4, hidden_dim=32, depth=2,
                          heads=4, num_classes=5, pe_strategy="none")
    plain = VitModel(plain_cfg, seed=11, dtype=np.float64)
    named = dict(sape.named_parameters())
    for name, p in plain.named_parameters():
        p.data = named[name].data.copy()
    x = make_rng(12, stream=10).uniform(0.0, 1.0, size=(2, 8, 8, 3))
    with T.no_grad():
        a = sape(x).data
        b = plain(x).data
    diff = np.abs(a - b).max()
    return diff < 1e-10, f"max logit diff {diff:.2e}"


def check_bias_gradients():
    rng = make_rng(8, stream=11)
    grid = PatchGrid(2, 2)
    q, k, tx, ty = _rand_instance(rng, grid.n, 4, 2)

    qt = Tensor(q.copy(), requires_grad=True)
    kt = Tensor(k.copy(), requires_grad=True)
    tabx, taby = _table(tx), _table(ty)
    tabx.e.requires_grad = taby.e.requires_grad = True
    T.tsum(sape2_bias(qt, kt, (tabx, taby), grid)).backward()

    def loss_of(q_, k_, tx_, ty_):
        return float(brute_force_bias(q_, k_, tx_, ty_, (2, 2)).sum())

    pairs = [
        (qt.grad, finite_difference_grad(lambda a: loss_of(a, k, tx, ty), q.copy())),
        (kt.grad, finite_difference_grad(lambda a: loss_of(q, a, tx, ty), k.copy())),
        (tabx.e.grad, finite_difference_grad(lambda a: loss_of(q, k, a, ty), tx.copy())),
        (taby.e.grad, finite_difference_grad(lambda a: loss_of(q, k, tx, a), ty.copy())),
    ]
    worst = 0.0
    for got, want in pairs:
        rep = compare(got, want, 1e-6)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            return False, f"gradient mismatch: {rep}"
    return True, f"q, k and both tables vs finite differences; worst rel {worst:.2e}"


def check_golden(golden_dir: str):
    path = os.path.join(golden_dir, GOLDEN_NAME)
    if not os.path.exists(path):
        return False, f"golden file missing: {path}"
    stored, meta = read_golden(path)
    q, k, tx, ty = golden_instance()
    recomputed = brute_force_bias(q, k, tx, ty, _GOLDEN_GRID)
    rep = compare(recomputed, stored, 1e-12)
    if not rep.passed:
        return False, f"stored values drifted from the oracle: {rep}"
    grid = PatchGrid(*_GOLDEN_GRID)
    fast = sape2_bias(Tensor(q), Tensor(k), (_table(tx), _table(ty)), grid).data
    rep2 = compare(fast, stored, 1e-10)
    return rep2.passed, f"oracle {rep}; fast path {rep2}"


def run_selftest(golden_dir: str = DEFAULT_GOLDEN_DIR, log=print) -> list[CheckResult]:
    checks = [
        ("matmul", check_matmul),
        ("sigmoid", check_sigmoid),
        ("reverse_cumsum", check_reverse_cumsum),
        ("clamp_max", check_clamp),
        ("pairwise_l2", check_pairwise),
        ("softmax", check_softmax),
        ("backward", check_backward),
        ("adam", check_adam),
        ("sinusoidal_ape", check_sinusoidal),
        ("rpe_bias", check_rpe),
        ("rope2d_axial", check_rope),
        ("cope1d", check_cope),
        ("path_equivalence", check_path_equivalence),
        ("bias_vs_oracle", check_bias_oracle),
        ("pipeline_invariants", check_invariants),
        ("attention_vs_oracle", check_attention_oracle),
        ("zero_table_equivalence", check_zero_table_equivalence),
        ("bias_gradients", check_bias_gradients),
        ("golden_file", lambda: check_golden(golden_dir)),
    ]
    results = []
    for name, fn in checks:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail))
        if log:
            mark = "pass" if passed else "FAIL"
            log(f"  [{mark}] {name:24s} {detail}")
    if log:
        bad = sum(1 for r in results if not r.passed)
        log(f"{len(results) - bad}/{len(results)} checks passed")
    return results
