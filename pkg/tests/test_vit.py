"""Model assembly: patch extraction, losses, PE integration, checkpoints."""

import math

import numpy as np
import pytest

from sape2.optim import Adam
from sape2.rng import make_rng
from sape2.tensor import Tensor
from sape2.vit import (PE_COMBOS, VitConfig, VitModel, cross_entropy,
                       expected_param_count, load_checkpoint, patchify,
                       save_checkpoint, top_k_accuracy)

RNG = np.random.default_rng(23)


def tiny_cfg(**kw):
    base = dict(image_size=8, patch_size=4, hidden_dim=16, heads=2, depth=1,
                num_classes=4)
    base.update(kw)
    return VitConfig(**base)


# -- patchify --------------------------------------------------------------


def test_patchify_raster_order_values():
    cfg = tiny_cfg()
    img = RNG.random((1, 8, 8, 3)).astype(np.float32)
    tok = patchify(img, cfg)
    assert tok.shape == (1, 4, 48)
    # token 1 is the top-right patch: rows 0..3, cols 4..7
    assert np.array_equal(tok[0, 1], img[0, 0:4, 4:8, :].reshape(-1))
    assert np.array_equal(tok[0, 2], img[0, 4:8, 0:4, :].reshape(-1))


def test_patchify_single_token():
    cfg = VitConfig(image_size=8, patch_size=8, hidden_dim=16, heads=2,
                    depth=1, num_classes=4)
    img = RNG.random((2, 8, 8, 3)).astype(np.float32)
    tok = patchify(img, cfg)
    assert tok.shape == (2, 1, 192)
    assert np.array_equal(tok[0, 0], img[0].reshape(-1))


def test_patchify_constant_image_identical_tokens():
    cfg = tiny_cfg()
    img = np.full((1, 8, 8, 3), 0.25, dtype=np.float32)
    tok = patchify(img, cfg)
    assert np.abs(tok - tok[0, 0]).max() == 0.0


def test_patchify_divisibility_error():
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 9, 9, 3), dtype=np.float32), cfg)


# -- loss and accuracy -----------------------------------------------------


def test_cross_entropy_uniform_is_log_k():
    logits = Tensor(np.zeros((5, 8)))
    loss = float(cross_entropy(logits, np.arange(5) % 8).data)
    assert abs(loss - math.log(8)) < 1e-12


def test_cross_entropy_saturated_near_zero():
    logits = np.zeros((3, 4))
    labels = np.array([0, 1, 2])
    logits[np.arange(3), labels] = 50.0
    loss = float(cross_entropy(Tensor(logits), labels).data)
    assert loss < 1e-8


def test_cross_entropy_matches_scalar_loop():
    logits = RNG.standard_normal((6, 5))
    labels = RNG.integers(0, 5, size=6)
    got = float(cross_entropy(Tensor(logits), labels).data)
    ref = 0.0
    for i in range(6):
        row = logits[i]
        ref -= row[labels[i]] - math.log(np.exp(row - row.max()).sum()) - row.max()
    ref /= 6
    assert abs(got - ref) < 1e-10


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_top_k_enumeration():
    logits = np.array([[3.0, 1.0, 0.0],
                       [0.0, 3.0, 1.0],
                       [1.0, 0.0, 3.0],
                       [3.0, 2.0, 1.0]])
    labels = np.array([0, 1, 2, 2])  # exactly 3 of 4 right at k=1
    assert top_k_accuracy(logits, labels, 1) == 0.75
    assert top_k_accuracy(logits, labels, 3) == 1.0


def test_top_k_tie_breaks_low_index():
    logits = np.array([[1.0, 1.0]])
    assert top_k_accuracy(logits, np.array([0]), 1) == 1.0
    assert top_k_accuracy(logits, np.array([1]), 1) == 0.0


def test_top_k_validation():
    with pytest.raises(ValueError):
        top_k_accuracy(np.zeros((1, 3)), np.zeros(1, dtype=int), 0)
    with pytest.raises(ValueError):
        top_k_accuracy(np.zeros((1, 3)), np.zeros(1, dtype=int), 4)


# -- forward ---------------------------------------------------------------


def test_forward_shape_and_determinism():
    model = VitModel(tiny_cfg(), seed=0)
    img = RNG.random((3, 8, 8, 3)).astype(np.float32)
    out = model(img).data
    assert out.shape == (3, 4)
    dup = model(np.stack([img[0], img[0], img[2]])).data
    assert np.abs(dup[0] - dup[1]).max() < 1e-6


def test_forward_image_shape_error():
    model = VitModel(tiny_cfg(), seed=0)
    with pytest.raises(ValueError):
        model(np.zeros((1, 16, 16, 3), dtype=np.float32))


@pytest.mark.parametrize("pe", sorted(PE_COMBOS))
def test_every_combo_forward_and_param_count(pe):
    cfg = tiny_cfg(hidden_dim=16, heads=2, pe_strategy=pe)
    model = VitModel(cfg, seed=1)
    out = model(RNG.random((2, 8, 8, 3)).astype(np.float32)).data
    assert out.shape == (2, 4)
    assert np.all(np.isfinite(out))
    assert model.num_parameters() == expected_param_count(cfg)


def test_mean_pooling_runs():
    model = VitModel(tiny_cfg(pooling="mean"), seed=0)
    out = model(RNG.random((2, 8, 8, 3)).astype(np.float32)).data
    assert out.shape == (2, 4)


def test_float64_float32_agree():
    cfg = tiny_cfg(pe_strategy="sape2+ape")
    m32 = VitModel(cfg, seed=3, dtype=np.float32)
    m64 = VitModel(cfg, seed=3, dtype=np.float64)
    img = RNG.random((2, 8, 8, 3)).astype(np.float32)
    a = m32(img).data
    b = m64(img).data
    assert np.abs(a - b.astype(np.float32)).max() < 1e-3


def test_zero_table_strategy_equals_no_pe():
    cfg_pe = tiny_cfg(pe_strategy="sape2")
    cfg_none = tiny_cfg(pe_strategy="none")
    pe_model = VitModel(cfg_pe, seed=5, dtype=np.float64)
    none_model = VitModel(cfg_none, seed=7, dtype=np.float64)
    shared = dict(none_model.named_parameters())
    for name, p in pe_model.named_parameters():
        if ".pe." in name:
            p.data = np.zeros_like(p.data)
        else:
            p.data = shared[name].data.copy()
    img = RNG.random((2, 8, 8, 3)).astype(np.float64)
    diff = np.abs(pe_model(img).data - none_model(img).data).max()
    assert diff <= 1e-10


def test_one_step_decreases_batch_loss():
    for seed in range(5):
        model = VitModel(tiny_cfg(pe_strategy="sape2+ape"), seed=seed)
        opt = Adam([p for _, p in model.named_parameters()], lr=1e-4)
        img = np.random.default_rng(seed).random((8, 8, 8, 3)).astype(np.float32)
        labels = np.arange(8) % 4
        loss0 = cross_entropy(model(img), labels)
        opt.zero_grad()
        loss0.backward()
        opt.step()
        loss1 = cross_entropy(model(img), labels)
        assert float(loss1.data) < float(loss0.data)


def test_attention_bias_capture_shape():
    cfg = VitConfig(image_size=8, patch_size=4, hidden_dim=16, heads=2,
                    depth=2, num_classes=4, pe_strategy="sape2")
    model = VitModel(cfg, seed=0)
    model(RNG.random((3, 8, 8, 3)).astype(np.float32))
    for blk in model.blocks:
        assert blk["last_bias"].shape == (3, 2, 4, 4)


def test_query_key_modes_change_output():
    # depth 2 matters: with one block and cls pooling the class token sees
    # only its own zero-padded bias row, so patch-level bias cannot reach
    # the logits at all
    imgs = RNG.random((2, 8, 8, 3)).astype(np.float32)
    mk = VitModel(tiny_cfg(pe_strategy="sape2", sape_mode="key", depth=2), seed=0)
    mq = VitModel(tiny_cfg(pe_strategy="sape2", sape_mode="query", depth=2), seed=0)
    assert np.abs(mk(imgs).data - mq(imgs).data).max() > 1e-7


# -- config validation -----------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(patch_size=3)
    with pytest.raises(ValueError):
        tiny_cfg(hidden_dim=15)
    with pytest.raises(ValueError):
        tiny_cfg(pe_strategy="nope")
    with pytest.raises(ValueError):
        tiny_cfg(sape_mode="both")
    with pytest.raises(ValueError):
        tiny_cfg(pooling="max")


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(pe_strategy="sape2+ape")
    model = VitModel(cfg, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.cfg == cfg
    for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data.astype(np.float32), pb.data)
    img = RNG.random((1, 8, 8, 3)).astype(np.float32)
    assert np.abs(model(img).data - back(img).data).max() < 1e-6


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint\n\nxxxx")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_checkpoint_rejects_wrong_version(tmp_path):
    model = VitModel(tiny_cfg(), seed=0)
    p = tmp_path / "v.ckpt"
    save_checkpoint(p, model)
    blob = p.read_bytes().replace(b"SAPE2CKPT v1", b"SAPE2CKPT v9", 1)
    p.write_bytes(blob)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_checkpoint_rejects_truncated_payload(tmp_path):
    model = VitModel(tiny_cfg(), seed=0)
    p = tmp_path / "t.ckpt"
    save_checkpoint(p, model)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(p)
