import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddbench.archs import ModelSpec, build_model
from ddbench.datahub import ArraySplit
from ddbench.posteval import (ConfigError, MissingInputError, PostEvalConfig, RunResult, build_label_cache,
                              distill_loss, effective_batch_size, lr_multiplier, train_student)
from ddbench.relabel import soft_labels
from ddbench.synth import random_sample
from ddbench.teachers import DivergenceError, TeacherPool
from ddbench.utils import derive_seed

from conftest import make_toy_teacher

ARCH = ModelSpec("convnet-small", 32, 10)


# --------------------------------------------------------------------------- schedule


def test_lr_multiplier_values():
    assert lr_multiplier(0, 100) == 1.0
    assert lr_multiplier(50, 100) == pytest.approx(0.5, abs=1e-15)
    assert lr_multiplier(100, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_multiplier(100, 100, zeta=2) == pytest.approx(0.5, abs=1e-15)
    assert lr_multiplier(25, 100, zeta=1) == pytest.approx((1 + math.cos(math.pi / 4)) / 2, abs=1e-15)
    for bad in [(-1, 10, 1), (11, 10, 1), (0, 0, 1), (0, 10, 0)]:
        with pytest.raises(ValueError):
            lr_multiplier(*bad)


@given(st.integers(1, 500), st.floats(1.0, 4.0), st.data())
@settings(max_examples=60, deadline=None)
def test_lr_multiplier_monotone(n, zeta, data):
    i = data.draw(st.integers(0, n - 1))
    assert 0 <= lr_multiplier(i + 1, n, zeta) <= lr_multiplier(i, n, zeta) <= 1
    # a larger zeta decays more slowly, so the factor never drops
    assert lr_multiplier(i, n, zeta + 0.5) >= lr_multiplier(i, n, zeta)
    assert lr_multiplier(n, n, zeta) >= 0


def test_effective_batch_size():
    assert effective_batch_size(1000, 50) == 50
    assert effective_batch_size(10, 50) == 10
    assert effective_batch_size(50, 50) == 50
    assert effective_batch_size(100, 500) == 100
    with pytest.raises(ValueError):
        effective_batch_size(0, 50)


# --------------------------------------------------------------------------- losses


@given(st.integers(0, 10_000), st.floats(0.5, 30))
@settings(max_examples=40, deadline=None)
def test_kl_zero_iff_distributions_match(seed, tau):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 10, generator=g, dtype=torch.float64)
    p = torch.softmax(z / tau, 1)
    assert abs(distill_loss("kl", z, p, tau=tau).item()) < 1e-10
    other = torch.softmax(torch.randn(4, 10, generator=g, dtype=torch.float64), 1)
    if not torch.allclose(other, p, atol=1e-6):
        assert distill_loss("kl", z, other, tau=tau).item() > 0


def test_kl_temperature_switches():
    z = torch.tensor([[1.0, 2.0, 0.5]], dtype=torch.float64)
    p = torch.tensor([[0.2, 0.5, 0.3]], dtype=torch.float64)
    tau = 4.0
    ref = (p * (p.log() - torch.log_softmax(z / tau, 1))).sum()
    assert distill_loss("kl", z, p, tau=tau).item() == pytest.approx(ref.item() * 16, rel=1e-12)
    assert distill_loss("kl", z, p, tau=tau, tau_squared=False).item() == pytest.approx(ref.item(), rel=1e-12)
    ref1 = (p * (p.log() - torch.log_softmax(z, 1))).sum()
    assert distill_loss("kl", z, p, tau=tau, student_tau=False, tau_squared=False).item() == \
        pytest.approx(ref1.item(), rel=1e-12)


def test_mse_gt_hand_value():
    s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    y = torch.tensor([0])
    # MSE over two logits = 0.5; CE = log(1 + e^-1)
    expected = 0.5 + 0.025 * math.log1p(math.exp(-1))
    got = distill_loss("mse_gt", s, labels=y, teacher_logits=t, gamma=0.025).item()
    assert abs(got - expected) < 1e-9
    assert distill_loss("mse_gt", s, teacher_logits=t, gamma=0.0).item() == pytest.approx(0.5, abs=1e-15)


def test_hard_ce_mixing():
    s = torch.tensor([[2.0, 0.0, -1.0]], dtype=torch.float64)
    ce = -torch.log_softmax(s, 1)[0]
    got = distill_loss("hard_ce", s, labels=torch.tensor([0]), partner_labels=torch.tensor([2]),
                       lam=torch.tensor([0.75], dtype=torch.float64)).item()
    assert got == pytest.approx(0.75 * ce[0].item() + 0.25 * ce[2].item(), rel=1e-12)


def _fd_check(fn, z, eps=1e-6):
    z = z.clone().requires_grad_(True)
    fn(z).backward()
    analytic = z.grad.clone()
    numeric = torch.zeros_like(z)
    with torch.no_grad():
        for idx in np.ndindex(*z.shape):
            zp, zm = z.detach().clone(), z.detach().clone()
            zp[idx] += eps
            zm[idx] -= eps
            numeric[idx] = (fn(zp) - fn(zm)) / (2 * eps)
    rel = (analytic - numeric).norm() / numeric.norm().clamp_min(1e-12)
    return rel.item()


@pytest.mark.parametrize("mode", ["kl", "mse_gt", "hard_ce"])
def test_loss_gradients_match_finite_differences(mode):
    g = torch.Generator().manual_seed(7)
    z = torch.randn(3, 10, generator=g, dtype=torch.float64)
    t_logits = torch.randn(3, 10, generator=g, dtype=torch.float64)
    kw = dict(teacher_probs=torch.softmax(t_logits / 3.0, 1), teacher_logits=t_logits, labels=torch.tensor([1, 4, 9]),
              partner_labels=torch.tensor([2, 4, 0]), lam=torch.tensor([0.3, 1.0, 0.6], dtype=torch.float64),
              tau=3.0, gamma=0.025)
    assert _fd_check(lambda s: distill_loss(mode, s, **kw), z) <= 1e-4


def test_missing_inputs_raise():
    z = torch.zeros(2, 3)
    with pytest.raises(MissingInputError):
        distill_loss("kl", z)
    with pytest.raises(MissingInputError):
        distill_loss("mse_gt", z, labels=torch.tensor([0, 1]))
    with pytest.raises(MissingInputError):
        distill_loss("mse_gt", z, teacher_logits=z)
    with pytest.raises(MissingInputError):
        distill_loss("hard_ce", z)
    with pytest.raises(ConfigError):
        distill_loss("nope", z)
    with pytest.raises(ValueError):
        distill_loss("kl", z, torch.full((2, 4), 0.25))


# --------------------------------------------------------------------------- config


def test_config_validation_and_fingerprint():
    with pytest.raises(ConfigError):
        PostEvalConfig(label_mode="hard", loss="kl")
    with pytest.raises(ConfigError):
        PostEvalConfig(zeta=0)
    with pytest.raises(ConfigError):
        PostEvalConfig.from_dict({"epochs": 3, "lr_typo": 1})
    a = PostEvalConfig(seeds=[0], device="cpu", eval_batch_size=10)
    b = PostEvalConfig(seeds=[1, 2, 3], eval_batch_size=999)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != PostEvalConfig(lr=0.01).fingerprint()
    assert PostEvalConfig.from_dict(a.to_dict()) == a
    assert PostEvalConfig.cross_arch().batch_size == 100 and PostEvalConfig.cross_arch().zeta == 2.0
    assert PostEvalConfig.same_arch().batch_size == 50 and PostEvalConfig.same_arch().zeta == 1.0


# --------------------------------------------------------------------------- training


@pytest.fixture(scope="module")
def setup(digits):
    train, test, spec = digits
    distilled = random_sample(train, 2, seed=0)
    idx = np.arange(0, len(test.labels), 3)
    small_test = ArraySplit(test.pixels(idx), test.labels[idx], spec)
    return distilled, small_test


def _pool(*seeds):
    return TeacherPool([make_toy_teacher(dtype=torch.float32, seed=s) for s in seeds or (0,)])


def _cfg(**kw):
    return PostEvalConfig(**{"epochs": 3, "batch_size": 8, "seeds": [0], **kw})


def test_run_result_invariants_and_determinism(setup, tmp_path):
    distilled, test = setup
    cfg = _cfg()
    r1 = train_student(distilled, _pool(), ARCH, cfg, test, seed=0, log_path=tmp_path / "run.log")
    r2 = train_student(distilled, _pool(), ARCH, cfg, test, seed=0)
    r3 = train_student(distilled, _pool(), ARCH, cfg, test, seed=1)
    assert len(r1.test_accuracy) == len(r1.train_accuracy) == len(r1.losses) == 3
    assert all(0 <= a <= 100 for a in r1.test_accuracy + r1.train_accuracy)
    assert r1.final_accuracy == r1.test_accuracy[-1]
    assert r1.wall_clock_seconds > 0 and r1.config_fingerprint == cfg.fingerprint()
    assert (r1.test_accuracy, r1.losses) == (r2.test_accuracy, r2.losses)
    assert r1.losses != r3.losses
    assert len((tmp_path / "run.log").read_text().splitlines()) == 3
    back = RunResult.from_dict(r1.to_dict())
    assert back.test_accuracy == r1.test_accuracy and back.seed == 0


def test_step_zero_loss_uses_teacher_on_the_same_batch(setup):
    distilled, test = setup
    cfg = _cfg(epochs=1, tau=4.0)
    pool = _pool()
    seen = []
    train_student(distilled, pool, ARCH, cfg, test, seed=5, step_callback=seen.append)
    first = seen[0]
    ab = first["batch"]
    expected_probs = soft_labels(pool, ab.images, cfg.tau).probs
    assert torch.equal(first["teacher_probs"], expected_probs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(5, 2))
        student = build_model(ARCH, seed=derive_seed(5, 1)).train()
        ref = distill_loss("kl", student(ab.images), expected_probs, tau=cfg.tau)
    assert first["loss"] == pytest.approx(ref.item(), rel=1e-6)


def test_shared_augmentation_every_step(setup):
    distilled, test = setup
    shared, indep = [], []
    train_student(distilled, _pool(), ARCH, _cfg(epochs=2), test, step_callback=shared.append)
    train_student(distilled, _pool(), ARCH, _cfg(epochs=2, shared_augmentation=False), test,
                  step_callback=indep.append)
    assert len(shared) == 2 * math.ceil(20 / 8)
    assert all(s["teacher_input"] == s["student_input"] for s in shared)
    assert all(s["teacher_input"] != s["student_input"] for s in indep)


def test_cache_matches_on_the_fly(setup, tmp_path):
    distilled, test = setup
    cfg = _cfg(label_mode="hybrid")
    pool = _pool(0, 1)
    path = build_label_cache(pool, distilled, cfg, seed=2, path=tmp_path / "cache")
    live = train_student(distilled, pool, ARCH, cfg, test, seed=2)
    cached = train_student(distilled, pool, ARCH, cfg, test, seed=2, label_cache=path)
    assert (live.losses, live.test_accuracy) == (cached.losses, cached.test_accuracy)
    with pytest.raises(ConfigError):
        train_student(distilled, pool, ARCH, cfg, test, seed=3, label_cache=path)
    with pytest.raises(ConfigError):
        train_student(distilled, _pool(0, 5), ARCH, cfg, test, seed=2, label_cache=path)


def test_label_modes_select_pool_members(setup):
    distilled, test = setup
    soft_a = train_student(distilled, _pool(0, 1), ARCH, _cfg(), test)
    soft_b = train_student(distilled, _pool(0, 2), ARCH, _cfg(), test)
    hybrid = train_student(distilled, _pool(0, 1), ARCH, _cfg(label_mode="hybrid"), test)
    assert soft_a.losses == soft_b.losses
    assert hybrid.losses != soft_a.losses
    with pytest.raises(MissingInputError):
        train_student(distilled, None, ARCH, _cfg(), test)


def test_hard_mode_ignores_pool(setup):
    distilled, test = setup
    cfg = _cfg(label_mode="hard", loss="hard_ce")
    runs = [train_student(distilled, p, ARCH, cfg, test) for p in (None, _pool(0), _pool(3, 4))]
    assert runs[0].losses == runs[1].losses == runs[2].losses


def test_mse_gt_trains(setup):
    distilled, test = setup
    r = train_student(distilled, _pool(), ARCH, _cfg(loss="mse_gt"), test)
    assert all(math.isfinite(v) for v in r.losses)


def test_class_mismatch_and_divergence(setup):
    distilled, test = setup
    with pytest.raises(ConfigError):
        train_student(distilled, _pool(), ModelSpec("convnet-small", 32, 5), _cfg(), test)
    with pytest.raises(ConfigError):
        train_student(distilled, TeacherPool([make_toy_teacher(num_classes=5, dtype=torch.float32)]), ARCH,
                      _cfg(), test)
    bad = type(distilled)(distilled.images.clone(), distilled.hard_labels, distilled.dataset, distilled.ipc,
                          distilled.provenance)
    bad.images[3] = float("nan")
    with pytest.raises(DivergenceError, match="epoch 0"):
        train_student(bad, _pool(), ARCH, _cfg(), test)
