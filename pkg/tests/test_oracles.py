"""Reference-oracle behavior: these must stay slow, scalar, and independent."""

import numpy as np
import pytest

from sape2.oracles import (OracleReport, brute_force_bias, compare,
                           direct_sape_vector, finite_difference_grad,
                           naive_attention, read_golden, write_golden)

RNG = np.random.default_rng(7)


def rand_instance(grid, d, m):
    n = grid[0] * grid[1]
    return (RNG.standard_normal((n, d)), RNG.standard_normal((n, d)),
            RNG.standard_normal((m + 1, d)), RNG.standard_normal((m + 1, d)))


def test_direct_vector_shape_and_finiteness():
    grid = (2, 3)
    q, k, tx, _ = rand_instance(grid, 4, 3)
    vec = direct_sape_vector(q, k, tx, axis="x", grid=grid)
    assert vec.shape == (6, 3)  # one slot per column along the row
    assert np.all(np.isfinite(vec))
    vy = direct_sape_vector(q, k, tx, axis="y", grid=grid)
    assert vy.shape == (6, 2)


def test_direct_vector_modes_differ():
    grid = (2, 2)
    q, k, tx, _ = rand_instance(grid, 4, 2)
    a = direct_sape_vector(q, k, tx, "x", grid, mode="key")
    b = direct_sape_vector(q, k, tx, "x", grid, mode="query")
    assert np.abs(a - b).max() > 1e-6


def test_brute_force_bias_is_a_metric_sample():
    grid = (2, 2)
    q, k, tx, ty = rand_instance(grid, 4, 2)
    bias = brute_force_bias(q, k, tx, ty, grid)
    assert bias.shape == (4, 4)
    assert np.abs(bias - bias.T).max() < 1e-12
    assert np.abs(np.diag(bias)).max() == 0.0
    assert bias.min() >= 0.0


def test_naive_attention_uniform_rows():
    # identical keys: every query attends uniformly, output = mean of values
    q = RNG.standard_normal((3, 4))
    k = np.tile(RNG.standard_normal(4), (3, 1))
    v = RNG.standard_normal((3, 4))
    out = naive_attention(q, k, v)
    assert np.abs(out - v.mean(axis=0)).max() < 1e-12


def test_naive_attention_bias_shifts_weights():
    q = RNG.standard_normal((2, 4))
    k = RNG.standard_normal((2, 4))
    v = np.eye(2)
    hard = np.array([[0.0, 50.0], [50.0, 0.0]])
    out = naive_attention(q, k, v, bias=hard)
    # +50 off-diagonal bias forces attention to the other token
    assert np.abs(out - v[::-1]).max() < 1e-6


def test_finite_difference_on_quadratic_is_exact():
    a = RNG.standard_normal(5)

    def f(x):
        return float(0.5 * x @ x + a @ x)

    x0 = RNG.standard_normal(5)
    g = finite_difference_grad(f, x0.copy())
    assert np.abs(g - (x0 + a)).max() < 1e-8


def test_finite_difference_rejects_non_finite():
    def f(x):
        return float("nan")

    with pytest.raises(ValueError):
        finite_difference_grad(f, np.ones(2))


def test_compare_report_fields():
    rep = compare(np.array([1.0, 2.0]), np.array([1.0, 2.0 + 1e-12]), tolerance=1e-10)
    assert isinstance(rep, OracleReport)
    assert rep.passed
    assert "pass" in str(rep)
    bad = compare(np.array([1.0]), np.array([2.0]), tolerance=1e-10)
    assert not bad.passed
    assert bad.max_abs_err == 1.0


def test_golden_round_trip(tmp_path):
    arr = RNG.standard_normal((3, 3))
    path = tmp_path / "g.txt"
    write_golden(path, arr, {"seed": 7, "shape": "3 3"})
    back, meta = read_golden(path)
    assert np.array_equal(back.reshape(3, 3), arr)
    assert meta["seed"] == "7"


def test_golden_rejects_out_of_order_records(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# shape 2\n1 0.5\n0 0.25\n")
    with pytest.raises(ValueError):
        read_golden(path)
