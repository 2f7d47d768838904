from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mdpr.config import AugmentConfig
from mdpr.data import (
    IMAGENET_MEAN,
    Augmenter,
    ImageRecord,
    PKSampler,
    augment,
    dump_records,
    generate_synthetic_dataset,
    hflip,
    load_directory_dataset,
    normalize,
    parse_filename,
    pk_batches,
    pk_sampler,
    random_erase,
    synthetic_splits,
)


def test_parse_standard_name():
    assert parse_filename("0002_c1s1_000451_03.jpg") == (2, 1)


def test_parse_junk_name():
    assert parse_filename("-1_c3s1_000001_00.jpg") == (-1, 3)


def test_parse_bad_name():
    with pytest.raises(ValueError):
        parse_filename("Thumbs.db")


def _write_tree(root, splits=("train", "query", "gallery")):
    recs = []
    for split in splits:
        for rec in generate_synthetic_dataset(2, 2, (32, 16), seed=1):
            rec.split = split
            recs.append(rec)
    dump_records(recs, root)


def test_load_directory(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "query" / "notes.png").write_bytes(b"")
    from PIL import Image

    Image.new("RGB", (16, 32)).save(tmp_path / "bounding_box_train" / "-1_c3s1_000001_00.png")
    recs = load_directory_dataset(tmp_path, (64, 32))
    assert {r.split for r in recs} == {"train", "query", "gallery"}
    assert all(r.pixels.shape == (64, 32, 3) for r in recs)
    junk = [r for r in recs if r.identity == -1]
    assert len(junk) == 1 and junk[0].camera == 3
    q = [r for r in recs if r.split == "query"]
    assert sorted({r.identity for r in q}) == [0, 1]


def test_train_only_directory(tmp_path):
    _write_tree(tmp_path, splits=("train",))
    assert len(load_directory_dataset(tmp_path, (32, 16), splits=("train",))) == 4
    with pytest.raises(ValueError, match="empty query split"):
        load_directory_dataset(tmp_path, (32, 16))


def test_synthetic_structure():
    recs = generate_synthetic_dataset(8, 8, (128, 64), seed=0)
    assert len(recs) == 64
    assert Counter(r.identity for r in recs) == {i: 8 for i in range(8)}
    assert [r.camera for r in recs[:8]] == [0, 1] * 4
    assert recs[0].pixels.shape == (128, 64, 3)
    assert all(0 <= r.pixels.min() and r.pixels.max() <= 1 for r in recs)


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(3, 3, (32, 16), seed=5)
    b = generate_synthetic_dataset(3, 3, (32, 16), seed=5)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    c = generate_synthetic_dataset(3, 3, (32, 16), seed=6)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_identities_separable(seed):
    recs = generate_synthetic_dataset(8, 8, (128, 64), seed=seed)
    x = np.stack([r.pixels.ravel() for r in recs]).astype(np.float64)
    y = np.array([r.identity for r in recs])
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    same = y[:, None] == y[None]
    off = ~np.eye(len(y), dtype=bool)
    assert d[~same].mean() > d[same & off].mean()


def test_synthetic_splits_are_held_out():
    train, query, gallery = synthetic_splits(4, 4, 3, (32, 16), seed=0)
    assert len(train) == 16 and len(query) == 4 and len(gallery) == 8
    assert all(q.camera == 0 for q in query)
    train_px = {r.pixels.tobytes() for r in train}
    assert not any(r.pixels.tobytes() in train_px for r in query + gallery)


def test_flip_involution():
    img = np.random.default_rng(0).random((8, 4, 3), dtype=np.float32)
    assert np.array_equal(hflip(hflip(img)), img)


def test_normalize_channel_means_to_zero():
    img = np.broadcast_to(IMAGENET_MEAN, (16, 8, 3)).copy()
    out = normalize(img)
    assert out.shape == (3, 16, 8)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_erasing_area_within_bounds(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((64, 32, 3), dtype=np.float32)
    out, rect = random_erase(img, rng, area=(0.02, 0.4), aspect=(0.3, 3.33))
    assert rect is not None
    top, left, h, w = rect
    changed = (out != img).any(axis=-1)
    assert changed.sum() == h * w
    assert changed[top : top + h, left : left + w].all()
    # rounding of the sampled side lengths allows a little slack
    frac = changed.mean()
    assert 0.02 * 0.8 <= frac <= 0.4 * 1.2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_augment_preserves_shape_and_finiteness(seed):
    rng = np.random.default_rng(seed)
    rec = ImageRecord(rng.random((40, 20, 3), dtype=np.float32), 0, 0, "train")
    pool = [rng.random((64, 32, 3), dtype=np.float32)]
    cfg = AugmentConfig(flip_prob=0.5, erase_prob=0.9, patch_prob=0.9)
    out = augment(rec, rng, (64, 32), cfg, pool)
    assert out.shape == (3, 64, 32)
    assert torch.isfinite(out).all()


def test_augmenter_uses_pool():
    rng = np.random.default_rng(0)
    rec = ImageRecord(np.zeros((64, 32, 3), dtype=np.float32), 0, 0, "train")
    aug = Augmenter((64, 32), AugmentConfig(flip_prob=0, erase_prob=0, patch_prob=1.0))
    aug.pool = [np.ones((64, 32, 3), dtype=np.float32)]
    out = aug(rec, rng)
    assert (out > normalize(rec.pixels)).any()


def _records(counts):
    recs = []
    for pid, n in enumerate(counts):
        recs += [ImageRecord(np.zeros((4, 2, 3), np.float32), pid, j % 2, "train") for j in range(n)]
    return recs


def test_pk_batch_structure():
    recs = _records([3, 2, 4])
    batches = list(pk_sampler(recs, P=2, S=2, seed=0, epochs=3))
    assert batches
    for b in batches:
        assert b.images.shape[0] == 4
        counts = Counter(b.labels.tolist())
        assert len(counts) == 2 and set(counts.values()) == {2}


def test_pk_duplicates_small_identity():
    recs = _records([1, 5, 5])
    sampler = PKSampler(recs, P=3, S=4, seed=0)
    batch = sampler.epoch(0)[0]
    assert Counter(batch)[0] == 4


def test_pk_deterministic():
    recs = _records([4, 4, 4, 4])
    a = [b for b in PKSampler(recs, 2, 2, seed=3).epoch(1)]
    b = [b for b in PKSampler(recs, 2, 2, seed=3).epoch(1)]
    assert a == b
    assert PKSampler(recs, 2, 2, seed=3).epoch(0) != PKSampler(recs, 2, 2, seed=3).epoch(1)


def test_pk_epoch_covers_every_identity():
    recs = _records([2] * 7)
    sampler = PKSampler(recs, P=3, S=2, seed=0)
    for e in range(5):
        seen = {recs[i].identity for batch in sampler.epoch(e) for i in batch}
        assert seen == set(range(7))


def test_pk_too_few_identities():
    with pytest.raises(ValueError, match="at least P"):
        PKSampler(_records([4]), P=2, S=2)


def test_pk_invariants_over_100_batches_and_no_junk():
    recs = _records([3, 6, 2, 5, 4])
    recs += [ImageRecord(np.zeros((4, 2, 3), np.float32), -1, 0, "train") for _ in range(10)]
    sampler = PKSampler(recs, P=3, S=3, seed=11)
    n = 0
    epoch = 0
    while n < 100:
        for b in pk_batches(recs, sampler, epoch):
            counts = Counter(b.labels.tolist())
            assert b.images.shape[0] == 9
            assert len(counts) == 3 and set(counts.values()) == {3}
            assert -1 not in counts
            n += 1
        epoch += 1
