"""Record decoding, the synthetic task's invariants, batching."""

import numpy as np
import pytest

from sape2.core import PatchGrid
from sape2.data import (BatchIterator, CLASS_NAMES, Dataset, _OFFSET_CELLS,
                        _decode_records, channel_stats_for,
                        compute_channel_stats, load_cifar_binary,
                        load_dataset_binary, load_stats_sidecar,
                        mean_pixel_probe_accuracy, normalize_augment,
                        save_dataset_binary, save_stats_sidecar,
                        synthesize_positional)


def _record(label, fill=None, planes=None, label_bytes=1):
    body = np.zeros(3072, dtype=np.uint8)
    if fill is not None:
        body[:] = fill
    if planes is not None:
        body = body.reshape(3, 1024)
        for c, v in enumerate(planes):
            body[c] = v
        body = body.reshape(-1)
    head = bytes(label) if isinstance(label, (list, tuple)) else bytes([label])
    assert len(head) == label_bytes
    return head + body.tobytes()


# -- record decoding -------------------------------------------------------


def test_decode_two_records():
    raw = _record(3, fill=30) + _record(7, fill=70)
    images, labels = _decode_records(raw, 1, "mem")
    assert images.shape == (2, 32, 32, 3)
    assert labels.tolist() == [3, 7]
    assert np.all(images[0] == np.float32(30 / 255.0))
    assert np.all(images[1] == np.float32(70 / 255.0))


def test_decode_channel_planar_order():
    raw = _record(0, planes=(10, 20, 30))
    images, _ = _decode_records(raw, 1, "mem")
    assert np.all(images[0, :, :, 0] == np.float32(10 / 255.0))
    assert np.all(images[0, :, :, 1] == np.float32(20 / 255.0))
    assert np.all(images[0, :, :, 2] == np.float32(30 / 255.0))


def test_decode_two_label_bytes_keeps_fine():
    raw = _record((5, 42), fill=1, label_bytes=2)
    _, labels = _decode_records(raw, 2, "mem")
    assert labels.tolist() == [42]


def test_decode_rejects_partial_record():
    with pytest.raises(ValueError):
        _decode_records(b"\x00" * 100, 1, "mem")


def test_load_single_file(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(_record(2, fill=9) + _record(9, fill=2))
    ds = load_cifar_binary(str(p), "cifar10", "train")
    assert len(ds) == 2
    assert ds.labels.tolist() == [2, 9]
    assert ds.num_classes == 10


def test_load_validation(tmp_path):
    with pytest.raises(ValueError):
        load_cifar_binary(str(tmp_path), "cifar11")
    with pytest.raises(ValueError):
        load_cifar_binary(str(tmp_path), "cifar10", "test")
    with pytest.raises(FileNotFoundError):
        load_cifar_binary(str(tmp_path), "cifar10", "train")


# -- synthetic positional task ---------------------------------------------


def test_synth_deterministic_and_round_robin():
    a = synthesize_positional(64, seed=5)
    b = synthesize_positional(64, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.labels.tolist() == [i % 8 for i in range(64)]


def test_synth_seed_changes_layouts():
    a = synthesize_positional(200, seed=0)
    b = synthesize_positional(200, seed=1)
    assert not np.array_equal(a.images, b.images)


def test_synth_class_balance():
    ds = synthesize_positional(100, seed=0)
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.max() - counts.min() <= 1


def test_synth_byte_quantized():
    ds = synthesize_positional(16, seed=3)
    scaled = ds.images * 255.0
    assert np.abs(scaled - np.round(scaled)).max() == 0.0
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synth_offset_matches_label():
    ds = synthesize_positional(80, seed=2)
    for img, label in zip(ds.images, ds.labels):
        ys, xs = np.nonzero(img.sum(axis=2))
        cells = sorted(set(zip(ys // 4, xs // 4)))
        assert len(cells) == 2
        (y0, x0), (y1, x1) = cells
        diff = (int(y1 - y0), int(x1 - x0))
        want = _OFFSET_CELLS[label]
        assert diff in (want, (-want[0], -want[1]))


def test_synth_patches_carry_no_class_signal():
    # every image is the same two cells' worth of texture on black, so a
    # positionless model cannot do better than chance
    ds = synthesize_positional(40, seed=0)
    per_image = np.sort(ds.images.reshape(40, -1), axis=1)
    assert np.abs(per_image - per_image[0]).max() == 0.0


def test_synth_validation():
    with pytest.raises(ValueError):
        synthesize_positional(8, num_classes=0)
    with pytest.raises(ValueError):
        synthesize_positional(8, num_classes=9)
    with pytest.raises(ValueError):
        synthesize_positional(8, grid=PatchGrid(4, 4))


def test_synth_color_probe_near_chance():
    train = synthesize_positional(400, seed=0)
    test = synthesize_positional(200, seed=1, split="eval")
    acc = mean_pixel_probe_accuracy(train, test)
    assert acc <= 1.0 / 8 + 0.10


def test_synth_binary_round_trip(tmp_path):
    ds = synthesize_positional(24, seed=7)
    stem = str(tmp_path / "synth")
    save_dataset_binary(ds, stem)
    back = load_dataset_binary(stem)
    assert np.array_equal(ds.images, back.images)
    assert np.array_equal(ds.labels, back.labels)
    assert back.name == "synthetic-positional"
    assert back.num_classes == 8


def test_synth_sidecar_names_classes(tmp_path):
    ds = synthesize_positional(8, seed=0)
    stem = str(tmp_path / "synth")
    save_dataset_binary(ds, stem)
    import json
    meta = json.loads((tmp_path / "synth.meta.json").read_text())
    assert meta["classes"] == CLASS_NAMES
    assert meta["count"] == 8


def test_save_rejects_wide_labels(tmp_path):
    ds = Dataset(np.zeros((1, 32, 32, 3), dtype=np.float32),
                 np.zeros(1, dtype=np.int64), "train", "x", 300)
    with pytest.raises(ValueError):
        save_dataset_binary(ds, str(tmp_path / "x"))


# -- stats and augmentation ------------------------------------------------


def test_channel_stats_constant_images():
    images = np.full((4, 32, 32, 3), 0.5, dtype=np.float32)
    mean, std = compute_channel_stats(images)
    assert np.allclose(mean, 0.5)
    assert np.all(std == 1e-8)  # floor keeps division safe


def test_stats_sidecar_round_trip(tmp_path):
    mean = np.array([0.1234567890123, 0.5, 0.9])
    std = np.array([0.25, 0.125, 1.0 / 3.0])
    p = str(tmp_path / "s.txt")
    save_stats_sidecar(p, mean, std)
    m2, s2 = load_stats_sidecar(p)
    assert np.array_equal(mean, m2)
    assert np.array_equal(std, s2)


def test_channel_stats_cache_is_used(tmp_path):
    ds = synthesize_positional(16, seed=0)
    m1, s1 = channel_stats_for(ds, cache_dir=str(tmp_path))
    ds.images = ds.images * 0.0  # would change the stats if recomputed
    m2, s2 = channel_stats_for(ds, cache_dir=str(tmp_path))
    assert np.array_equal(m1, m2)
    assert np.array_equal(s1, s2)


def test_normalize_centers_batch():
    batch = np.random.default_rng(0).random((32, 32, 32, 3)).astype(np.float32)
    mean, std = compute_channel_stats(batch)
    out = normalize_augment(batch, train=False, mean=mean, std=std)
    assert abs(out.mean()) < 1e-4
    assert abs(out.std() - 1.0) < 1e-3


def test_flip_is_involution():
    batch = np.random.default_rng(1).random((4, 32, 32, 3)).astype(np.float32)
    ident = np.zeros(3), np.ones(3)
    once = normalize_augment(batch, True, *ident, force_flip=True)
    twice = normalize_augment(once, True, *ident, force_flip=True)
    assert np.array_equal(twice, batch)
    assert not np.array_equal(once, batch)


def test_augment_requires_rng():
    batch = np.zeros((2, 32, 32, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        normalize_augment(batch, True, np.zeros(3), np.ones(3), augment=True)


def test_crop_shifts_content():
    batch = np.zeros((2, 32, 32, 3), dtype=np.float32)
    batch[:, 16, 16] = 1.0
    rng = np.random.default_rng(9)
    out = normalize_augment(batch, True, np.zeros(3), np.ones(3),
                            augment=True, rng=rng)
    assert out.shape == batch.shape
    for img in out:
        assert img.sum() in (0.0, 3.0)  # marker survives or falls off the edge


# -- batching --------------------------------------------------------------


def _toy_dataset(n=10):
    images = np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1)
    images = np.broadcast_to(images, (n, 32, 32, 3)).copy()
    return Dataset(images, np.arange(n, dtype=np.int64), "train", "toy", n)


def test_iterator_visits_each_sample_once():
    it = BatchIterator(_toy_dataset(), batch_size=3, shuffle=True, seed=4)
    seen = np.concatenate([lb for _, lb in it])
    assert sorted(seen.tolist()) == list(range(10))


def test_iterator_file_order_without_shuffle():
    it = BatchIterator(_toy_dataset(), batch_size=4, shuffle=False)
    batches = [lb.tolist() for _, lb in it]
    assert batches == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]


def test_iterator_drop_last():
    it = BatchIterator(_toy_dataset(), batch_size=4, shuffle=False,
                       drop_last=True)
    assert len(it) == 2
    batches = [lb.tolist() for _, lb in it]
    assert batches == [[0, 1, 2, 3], [4, 5, 6, 7]]


def test_iterator_len_rounds_up():
    assert len(BatchIterator(_toy_dataset(), batch_size=3)) == 4
    assert len(BatchIterator(_toy_dataset(), batch_size=10)) == 1


def test_iterator_epochs_reshuffle_deterministically():
    a = BatchIterator(_toy_dataset(), batch_size=10, shuffle=True, seed=0)
    b = BatchIterator(_toy_dataset(), batch_size=10, shuffle=True, seed=0)
    first_a = [lb.tolist() for _, lb in a]
    first_b = [lb.tolist() for _, lb in b]
    second_a = [lb.tolist() for _, lb in a]
    assert first_a == first_b
    assert first_a != second_a  # epoch counter feeds the permutation
