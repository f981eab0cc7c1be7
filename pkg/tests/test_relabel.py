import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from ddbench.archs import ModelSpec
from ddbench.relabel import (AugmentationError, AugSpec, CacheIntegrityError, LabelCache, apply_trace,
                             augment_batch, cache_labels, cache_size_bytes, cutmix_box, epoch_batches, replay,
                             sample_trace, soft_labels)
from ddbench.synth import random_sample
from ddbench.teachers import TeacherHandle, TeacherPool

from conftest import make_toy_teacher


class _FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.register_buffer("z", torch.tensor(logits, dtype=torch.float32))
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.z.expand(len(x), -1).clone()


def _fixed(logits, name="f"):
    return TeacherHandle(ModelSpec("convnet-small", 32, len(logits)), _FixedLogits(logits).eval(), 0.0, name, 0,
                         "digits32")


def _batch(n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, 32, 32, generator=g), torch.arange(n) % 10


# --------------------------------------------------------------------------- AugSpec


def test_augspec_validation():
    with pytest.raises(AugmentationError):
        AugSpec(scale=(0.0, 1.0))
    with pytest.raises(AugmentationError):
        AugSpec(scale=(0.8, 0.5))
    with pytest.raises(AugmentationError):
        AugSpec(flip_p=1.5)
    with pytest.raises(AugmentationError):
        AugSpec(cutmix_beta=0)
    assert AugSpec().scale == (0.5, 1.0)
    x, y = _batch()
    with pytest.raises(AugmentationError, match="grid 3"):
        augment_batch(x, y, AugSpec(shuffle_grid=3), 0, 0)
    with pytest.raises(AugmentationError):
        augment_batch(x[:0], y[:0], AugSpec(), 0, 0)


# --------------------------------------------------------------------------- CutMix arithmetic


def test_degenerate_cutmix_leaves_images_unchanged():
    x, y = _batch()
    box = cutmix_box(1.0, 32, 32, 16, 16)
    trace = {"size": [32, 32], "flips": [False] * 6, "cutmix": {"draw": 1.0, "perm": [5, 4, 3, 2, 1, 0], "box": box}}
    out, partner, lam = apply_trace(x, y, trace)
    assert torch.equal(out, x)
    assert torch.equal(lam, torch.ones(6, dtype=torch.float64))


def test_quarter_box_gives_three_quarters():
    x, y = _batch()
    perm = [1, 2, 3, 4, 5, 0]
    trace = {"size": [32, 32], "flips": [False] * 6, "cutmix": {"draw": 0.75, "perm": perm, "box": [0, 16, 0, 16]}}
    out, partner, lam = apply_trace(x, y, trace)
    assert torch.equal(lam, torch.full((6,), 0.75, dtype=torch.float64))
    assert torch.equal(partner, y[perm])
    assert torch.equal(out[:, :, :16, :16], x[perm][:, :, :16, :16])
    assert torch.equal(out[:, :, 16:, :], x[:, :, 16:, :])
    assert cutmix_box(0.75, 32, 32, 16, 16) == [8, 24, 8, 24]


def test_patch_shuffle_swaps_aligned_cells():
    x, y = _batch(4)
    trace = {"size": [32, 32], "flips": [False] * 4, "shuffle": {"grid": 2, "swaps": [[0, 3, 1, 0]]}}
    out, _, lam = apply_trace(x, y, trace)
    assert torch.equal(out[0, :, 16:, :16], x[3, :, 16:, :16])
    assert torch.equal(out[3, :, 16:, :16], x[0, :, 16:, :16])
    assert torch.equal(out[0, :, :16, :], x[0, :, :16, :])
    assert torch.equal(out[1:3], x[1:3])
    assert torch.equal(lam, torch.ones(4, dtype=torch.float64))


def test_flip_only():
    x, y = _batch(3)
    out, _, _ = apply_trace(x, y, {"size": [32, 32], "flips": [True, False, True]})
    assert torch.equal(out[0], x[0].flip(-1)) and torch.equal(out[1], x[1])


@given(st.integers(0, 2**20), st.integers(0, 50), st.integers(0, 50), st.integers(1, 9))
@settings(max_examples=30, deadline=None)
def test_replay_is_bit_exact_and_lambda_is_preserved_area(seed, epoch, step, n):
    x, y = _batch(n, seed % 97)
    spec = AugSpec(seed=seed)
    ab = augment_batch(x, y, spec, epoch, step)
    again = replay(x, y, json.loads(json.dumps(ab.trace)))
    assert torch.equal(ab.images, again.images)
    assert torch.equal(ab.lam, again.lam) and torch.equal(ab.partner_labels, again.partner_labels)
    y1, y2, x1, x2 = ab.trace["cutmix"]["box"]
    assert torch.equal(ab.lam, torch.full((n,), 1 - (y2 - y1) * (x2 - x1) / 1024, dtype=torch.float64))
    assert bool(((ab.lam >= 0) & (ab.lam <= 1)).all())
    assert ab.trace == sample_trace(n, 32, 32, spec, epoch, step)


def test_streams_keyed_by_seed_epoch_step():
    x, y = _batch()
    s = AugSpec(seed=1)
    assert augment_batch(x, y, s, 2, 3).trace == augment_batch(x, y, s, 2, 3).trace
    assert augment_batch(x, y, s, 2, 3).trace != augment_batch(x, y, s, 2, 4).trace
    assert augment_batch(x, y, s, 2, 3).trace != augment_batch(x, y, AugSpec(seed=2), 2, 3).trace


def test_crop_scale_respected():
    spec = AugSpec(seed=0)
    areas = []
    for step in range(50):
        for top, left, h, w in sample_trace(8, 32, 32, spec, 0, step)["crops"]:
            assert 0 <= top and top + h <= 32 and 0 <= left and left + w <= 32
            areas.append(h * w / 1024)
    assert min(areas) > 0.4 and max(areas) <= 1.0


def test_epoch_batches_cover_each_index_once():
    batches = epoch_batches(23, 5, seed=4, epoch=2)
    assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
    assert sorted(np.concatenate(batches).tolist()) == list(range(23))
    assert not np.array_equal(np.concatenate(batches), np.concatenate(epoch_batches(23, 5, 4, 3)))


# --------------------------------------------------------------------------- soft labels


def test_two_fixed_teachers_hand_value():
    pool = TeacherPool([_fixed([2.0, 0.0], "a"), _fixed([0.0, 2.0], "b")])
    sl = soft_labels(pool, torch.zeros(3, 3, 32, 32), tau=1.0)
    assert torch.allclose(sl.probs, torch.full((3, 2), 0.5), atol=1e-7)
    assert sl.tau == 1.0 and sl.pool_fingerprint == pool.fingerprint()


def test_huge_temperature_is_uniform():
    pool = TeacherPool([_fixed([5.0, -3.0, 1.0, 0.0])])
    sl = soft_labels(pool, torch.zeros(2, 3, 32, 32), tau=1e6)
    assert torch.allclose(sl.probs, torch.full((2, 4), 0.25), atol=1e-3)


def test_identical_pool_equals_single_teacher_exactly():
    t = make_toy_teacher(dtype=torch.float32)
    x, _ = _batch(5)
    single = soft_labels(TeacherPool([t]), x, 20.0)
    for k in (2, 3, 5):
        many = soft_labels(TeacherPool([t] * k), x, 20.0)
        assert torch.equal(many.probs, single.probs)
        assert torch.equal(many.logits, single.logits)
    assert torch.equal(single.probs, torch.softmax(t.model(x) / 20.0, 1))


@given(st.integers(0, 1000), st.floats(0.5, 50))
@settings(max_examples=15, deadline=None)
def test_rows_normalized_and_permutation_equivariant(seed, tau):
    pool = TeacherPool([make_toy_teacher(dtype=torch.float32, seed=0), make_toy_teacher(dtype=torch.float32, seed=1)])
    x, _ = _batch(6, seed)
    sl = soft_labels(pool, x, tau)
    assert torch.allclose(sl.probs.sum(1), torch.ones(6), atol=1e-6)
    assert bool((sl.probs >= 0).all())
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
    assert torch.allclose(soft_labels(pool, x[perm], tau).probs, sl.probs[perm], atol=1e-6)


def test_soft_label_errors():
    pool = TeacherPool([make_toy_teacher(dtype=torch.float32)])
    with pytest.raises(ValueError):
        soft_labels(pool, torch.zeros(1, 3, 64, 64), 1.0)
    with pytest.raises(ValueError):
        soft_labels(pool, torch.zeros(1, 3, 32, 32), 0.0)


# --------------------------------------------------------------------------- label cache


@pytest.fixture(scope="module")
def small_set(digits):
    return random_sample(digits[0], 2, seed=0)


def _pool():
    return TeacherPool([make_toy_teacher(dtype=torch.float32)])


def test_cache_round_trip(tmp_path, small_set):
    spec = AugSpec(seed=3)
    cache_labels(_pool(), small_set, spec, 2, 4.0, tmp_path, batch_size=8, seed=1)
    cache = LabelCache(tmp_path)
    for epoch in range(2):
        for step, idx in enumerate(epoch_batches(20, 8, 1, epoch)):
            c_idx, trace, probs, logits = cache.get(epoch, step)
            assert np.array_equal(c_idx, idx)
            ab = augment_batch(small_set.images[idx], small_set.hard_labels[idx], spec, epoch, step)
            assert trace == ab.trace
            live = soft_labels(_pool(), ab, 4.0)
            assert torch.equal(probs, live.probs) and torch.equal(logits, live.logits)


def test_cache_size_linear_in_epochs(tmp_path, small_set):
    sizes = {}
    for e in (1, 2, 4):
        cache_labels(_pool(), small_set, AugSpec(), e, 20.0, tmp_path / str(e), batch_size=10, seed=0)
        sizes[e] = cache_size_bytes(tmp_path / str(e))
        assert len(list((tmp_path / str(e)).glob("labels_epoch_*.npz"))) == e
    assert sizes[2] / sizes[1] == pytest.approx(2, rel=0.05)
    assert sizes[4] / sizes[1] == pytest.approx(4, rel=0.05)


def test_corrupted_entry_names_epoch_and_step(tmp_path, small_set):
    cache_labels(_pool(), small_set, AugSpec(), 2, 20.0, tmp_path, batch_size=10, seed=0)
    f = tmp_path / "labels_epoch_0001.npz"
    with np.load(f) as z:
        arrays = {k: z[k] for k in z.files}
    arrays["probs_1"] = arrays["probs_1"] + np.float32(1e-3)
    np.savez(f, **arrays)
    cache = LabelCache(tmp_path)
    cache.get(1, 0)
    with pytest.raises(CacheIntegrityError, match="epoch 1 step 1"):
        cache.get(1, 1)
    (tmp_path / "labels_epoch_0000.npz").write_bytes(b"junk")
    with pytest.raises(CacheIntegrityError, match="epoch 0"):
        LabelCache(tmp_path).get(0, 0)


def test_cache_unwritable_path(tmp_path, small_set):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        cache_labels(_pool(), small_set, AugSpec(), 1, 20.0, blocker / "sub", 10, 0)
    with pytest.raises(ValueError):
        cache_labels(_pool(), small_set, AugSpec(), 0, 20.0, tmp_path / "c", 10, 0)
