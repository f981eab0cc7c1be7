"""Post-evaluation: train a fresh student on a distilled set, test on real data."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .archs import ModelSpec, build_model
from .datahub import DistilledDataset
from .metrics import EmptySplitError, evaluate_accuracy  # noqa: F401  (re-exported)
from .relabel import (AugSpec, LabelCache, augment_batch, cache_labels, epoch_batches, replay, soft_labels)
from .teachers import DivergenceError, TeacherPool
from .utils import derive_seed, fingerprint, tensor_digest

log = logging.getLogger(__name__)

LOSS_MODES = ("kl", "mse_gt", "hard_ce")
LABEL_MODES = ("soft", "hybrid", "hard")


class ConfigError(ValueError):
    pass


class MissingInputError(ValueError):
    pass


# Fields that change how fast a run executes but not what it computes.
_NON_PROTOCOL = {"seeds", "device", "eval_batch_size"}


@dataclass
class PostEvalConfig:
    epochs: int = 400
    lr: float = 0.001
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    batch_size: int = 50
    zeta: float = 1.0
    loss: str = "kl"
    gamma: float = 0.025
    tau: float = 20.0
    student_tau: bool = True  # apply tau to the student branch of kl
    tau_squared: bool = True  # scale kl by tau^2
    label_mode: str = "soft"
    shared_augmentation: bool = True  # ablation switch only
    aug: AugSpec = field(default_factory=AugSpec)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    eval_batch_size: int = 500
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugSpec(**{**self.aug, "scale": tuple(self.aug.get("scale", (0.5, 1.0)))})
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.zeta <= 0:
            raise ConfigError("zeta must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss mode {self.loss!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {self.label_mode!r}")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.label_mode == "hard" and self.loss != "hard_ce":
            raise ConfigError("label_mode='hard' requires loss='hard_ce'")

    @classmethod
    def same_arch(cls, **kw) -> "PostEvalConfig":
        return cls(**{"batch_size": 50, "zeta": 1.0, **kw})

    @classmethod
    def cross_arch(cls, **kw) -> "PostEvalConfig":
        return cls(**{"batch_size": 100, "zeta": 2.0, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"] = self.aug.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PostEvalConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown post-eval config key(s): {sorted(unknown)}")
        return cls(**d)

    def protocol(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in _NON_PROTOCOL}

    def fingerprint(self) -> str:
        return fingerprint(self.protocol())


@dataclass
class RunResult:
    train_accuracy: list[float]
    test_accuracy: list[float]
    final_accuracy: float
    wall_clock_seconds: float
    config_fingerprint: str
    seed: int
    eval_arch: str = ""
    config: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    model: nn.Module | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


# --------------------------------------------------------------------------- schedule


def lr_multiplier(i: float, n: int, zeta: float = 1.0) -> float:
    """Smoothed cosine factor ``(1 + cos(pi * i / (zeta * n))) / 2`` at epoch ``i`` of ``n``."""
    if n <= 0 or zeta <= 0 or not 0 <= i <= n:
        raise ValueError(f"lr_multiplier needs 0 <= i <= N, N > 0, zeta > 0 (got i={i}, N={n}, zeta={zeta})")
    return (1.0 + math.cos(math.pi * i / (zeta * n))) / 2.0


def effective_batch_size(set_size: int, default_bs: int) -> int:
    if set_size < 1 or default_bs < 1:
        raise ValueError("set size and batch size must be >= 1")
    return min(default_bs, set_size)


# --------------------------------------------------------------------------- losses


def mixed_cross_entropy(logits, labels, partner_labels=None, lam=None) -> torch.Tensor:
    """``lam*CE(y_a) + (1-lam)*CE(y_b)`` per sample, averaged over the batch."""
    ce_a = nn.functional.cross_entropy(logits, labels, reduction="none")
    if partner_labels is None or lam is None:
        return ce_a.mean()
    lam = torch.as_tensor(lam, dtype=logits.dtype)
    ce_b = nn.functional.cross_entropy(logits, partner_labels, reduction="none")
    return (lam * ce_a + (1 - lam) * ce_b).mean()


def _kl(student_logits, teacher_probs=None, tau=1.0, student_tau=True, tau_squared=True, **_):
    if teacher_probs is None:
        raise MissingInputError("kl needs teacher probabilities")
    t = tau if student_tau else 1.0
    log_q = nn.functional.log_softmax(student_logits / t, dim=1)
    p = teacher_probs.to(student_logits.dtype)
    kl = (torch.xlogy(p, p) - p * log_q).sum(1).mean()
    return kl * (tau * tau if tau_squared else 1.0)


def _mse_gt(student_logits, teacher_logits=None, labels=None, partner_labels=None, lam=None, gamma=0.025, **_):
    if teacher_logits is None:
        raise MissingInputError("mse_gt needs teacher logits")
    mse = nn.functional.mse_loss(student_logits, teacher_logits.to(student_logits.dtype))
    if gamma == 0:
        return mse
    if labels is None:
        raise MissingInputError("mse_gt with gamma > 0 needs hard labels")
    return mse + gamma * mixed_cross_entropy(student_logits, labels, partner_labels, lam)


def _hard_ce(student_logits, labels=None, partner_labels=None, lam=None, **_):
    if labels is None:
        raise MissingInputError("hard_ce needs hard labels")
    return mixed_cross_entropy(student_logits, labels, partner_labels, lam)


LOSSES: dict[str, Callable[..., torch.Tensor]] = {"kl": _kl, "mse_gt": _mse_gt, "hard_ce": _hard_ce}


def register_loss(name: str, fn: Callable[..., torch.Tensor]) -> None:
    """Plug in another distillation loss; ``fn`` receives the keyword set of :func:`distill_loss`."""
    LOSSES[name] = fn


def distill_loss(mode: str, student_logits: torch.Tensor, teacher_probs=None, labels=None, partner_labels=None,
                 lam=None, gamma: float = 0.025, tau: float = 1.0, teacher_logits=None, student_tau: bool = True,
                 tau_squared: bool = True) -> torch.Tensor:
    """Loss for one step.

    * ``kl``: ``KL(teacher || student)`` with tau-scaled student softmax, times tau^2
    * ``mse_gt``: ``MSE(student logits, teacher logits) + gamma * CE(student, mixed hard labels)``
    * ``hard_ce``: CutMix-mixed cross-entropy against the hard labels
    """
    try:
        fn = LOSSES[mode]
    except KeyError:
        raise ConfigError(f"unknown loss mode {mode!r}") from None
    if teacher_probs is not None and teacher_probs.shape != student_logits.shape:
        raise ValueError("teacher and student shapes disagree")
    return fn(student_logits, teacher_probs=teacher_probs, labels=labels, partner_labels=partner_labels, lam=lam,
              gamma=gamma, tau=tau, teacher_logits=teacher_logits, student_tau=student_tau, tau_squared=tau_squared)


# --------------------------------------------------------------------------- training


def run_aug_spec(cfg: PostEvalConfig, seed: int) -> AugSpec:
    """Augmentation stream of one seeded run."""
    return dataclasses.replace(cfg.aug, seed=derive_seed(cfg.aug.seed, seed) % (2**31))


def run_batch_seed(seed: int) -> int:
    return derive_seed(seed, 0xBA7C4) % (2**31)


def label_pool(pool: TeacherPool | None, cfg: PostEvalConfig) -> TeacherPool | None:
    """The members that actually label: first teacher (soft), all (hybrid), none (hard)."""
    if cfg.label_mode == "hard":
        return None
    if pool is None:
        raise MissingInputError(f"label_mode={cfg.label_mode!r} needs a teacher pool")
    return pool if cfg.label_mode == "hybrid" else TeacherPool(pool.members[:1])


def build_label_cache(pool: TeacherPool, distilled: DistilledDataset, cfg: PostEvalConfig, seed: int, path) -> Path:
    """Cache the labels a ``train_student(..., seed=seed)`` run would compute."""
    bs = effective_batch_size(len(distilled), cfg.batch_size)
    return cache_labels(label_pool(pool, cfg), distilled, run_aug_spec(cfg, seed), cfg.epochs, cfg.tau, path,
                        bs, run_batch_seed(seed))


def _make_optimizer(cfg: PostEvalConfig, params):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)


def train_student(distilled: DistilledDataset, pool: TeacherPool | None, eval_arch: ModelSpec, cfg: PostEvalConfig,
                  test, seed: int = 0, label_cache=None, step_callback: Callable[[dict], None] | None = None,
                  log_path=None, keep_model: bool = False) -> RunResult:
    """Train a randomly initialized ``eval_arch`` on ``distilled`` and track real-test accuracy per epoch."""
    cfg.validate()
    if distilled.num_classes != eval_arch.num_classes:
        raise ConfigError(f"distilled set has {distilled.num_classes} classes, eval arch {eval_arch.num_classes}")
    labeler = label_pool(pool, cfg)
    if labeler is not None and labeler.num_classes != eval_arch.num_classes:
        raise ConfigError("teacher pool and eval arch disagree on num_classes")
    cache = LabelCache(label_cache) if label_cache is not None else None
    bs = effective_batch_size(len(distilled), cfg.batch_size)
    aug = run_aug_spec(cfg, seed)
    batch_seed = run_batch_seed(seed)
    if cache is not None:
        meta = cache.index
        if (meta["n"], meta["batch_size"], meta["seed"], meta["tau"]) != (len(distilled), bs, batch_seed, cfg.tau) \
                or meta["epochs"] < cfg.epochs or meta["aug"] != aug.to_dict():
            raise ConfigError("label cache was built for a different run schedule")
        if labeler is not None and meta["pool"] != labeler.fingerprint():
            raise ConfigError("label cache was built with a different teacher pool")
    device = torch.device(cfg.device)
    t0 = time.perf_counter()
    log_fh = open(log_path, "a") if log_path else None
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, 2))
            student = build_model(eval_arch, seed=derive_seed(seed, 1)).to(device)
            opt = _make_optimizer(cfg, student.parameters())
            train_acc, test_acc, losses = [], [], []
            images, hard = distilled.images, distilled.hard_labels
            for epoch in range(cfg.epochs):
                lr = cfg.lr * lr_multiplier(epoch, cfg.epochs, cfg.zeta)
                for g in opt.param_groups:
                    g["lr"] = lr
                student.train()
                correct = seen = 0
                epoch_loss = 0.0
                batches = epoch_batches(len(distilled), bs, batch_seed, epoch)
                for step, idx in enumerate(batches):
                    cached_probs = cached_logits = None
                    if cache is not None:
                        c_idx, trace, cached_probs, cached_logits = cache.get(epoch, step)
                        if not np.array_equal(c_idx, idx):
                            raise ConfigError(f"label cache batch order differs at epoch {epoch} step {step}")
                        ab = replay(images[idx], hard[idx], trace)
                    else:
                        ab = augment_batch(images[idx], hard[idx], aug, epoch, step, idx)
                    teacher_in = ab.images
                    if labeler is not None and not cfg.shared_augmentation and cache is None:
                        indep = dataclasses.replace(aug, seed=derive_seed(aug.seed, 7) % (2**31))
                        teacher_in = augment_batch(images[idx], hard[idx], indep, epoch, step).images
                    probs = t_logits = None
                    if labeler is not None:
                        if cache is not None:
                            probs, t_logits = cached_probs, cached_logits
                        else:
                            sl = soft_labels(labeler, teacher_in, cfg.tau)
                            probs, t_logits = sl.probs, sl.logits
                    x = ab.images.to(device)
                    out = student(x)
                    loss = distill_loss(cfg.loss, out, probs.to(device) if probs is not None else None,
                                        ab.labels.to(device), ab.partner_labels.to(device), ab.lam.to(device),
                                        cfg.gamma, cfg.tau,
                                        t_logits.to(device) if t_logits is not None else None,
                                        cfg.student_tau, cfg.tau_squared)
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise DivergenceError(epoch, step)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    correct += int((out.detach().argmax(1).cpu() == ab.labels).sum())
                    seen += len(idx)
                    epoch_loss += loss_value
                    if step_callback is not None:
                        step_callback({
                            "epoch": epoch, "step": step, "batch": ab, "loss": loss_value, "lr": lr,
                            "teacher_probs": probs, "teacher_input": tensor_digest(teacher_in),
                            "student_input": tensor_digest(x),
                        })
                train_acc.append(100.0 * correct / seen)
                test_acc.append(evaluate_accuracy(student, test, cfg.eval_batch_size))
                losses.append(epoch_loss / len(batches))
                line = f"epoch={epoch} lr={lr:.6g} loss={losses[-1]:.6f} train_acc={train_acc[-1]:.2f} " \
                       f"test_acc={test_acc[-1]:.2f}"
                log.debug(line)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                    log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return RunResult(train_acc, test_acc, test_acc[-1], time.perf_counter() - t0, cfg.fingerprint(), seed,
                     eval_arch.arch, cfg.protocol(), losses, student if keep_model else None)
