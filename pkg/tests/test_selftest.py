"""The in-process check suite as an API: result objects and golden handling."""

import os

from sape2.oracles import read_golden
from sape2.selftest import (DEFAULT_GOLDEN_DIR, GOLDEN_NAME, check_golden,
                            golden_instance, run_selftest)


def test_all_checks_pass_silently():
    results = run_selftest(log=None)
    failed = [r.name for r in results if not r.passed]
    assert failed == []
    names = [r.name for r in results]
    assert len(names) == len(set(names))
    for must in ("matmul", "path_equivalence", "bias_vs_oracle",
                 "bias_gradients", "golden_file"):
        assert must in names
    assert all(r.detail for r in results)


def test_check_golden_missing_dir(tmp_path):
    passed, detail = check_golden(str(tmp_path / "nowhere"))
    assert not passed
    assert "missing" in detail


def test_golden_file_metadata():
    stored, meta = read_golden(os.path.join(DEFAULT_GOLDEN_DIR, GOLDEN_NAME))
    assert stored.shape == (4, 4)
    assert meta["mode"] == "key"
    assert meta["grid"] == "2 2"


def test_golden_instance_is_stable():
    a = golden_instance()
    b = golden_instance()
    for x, y in zip(a, b):
        assert (x == y).all()
