"""Squeeze phase: teacher training/loading, BN statistics and teacher pools."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.modules.batchnorm import _BatchNorm

from .archs import ModelSpec, build_model
from .metrics import evaluate_accuracy
from .utils import fingerprint, torch_generator, write_json

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int | None = None, what: str = "loss"):
        self.epoch, self.step = epoch, step
        where = f"epoch {epoch}" + (f", step {step}" if step is not None else "")
        super().__init__(f"non-finite {what} at {where}")


class NoBNStatistics(Exception):
    """The architecture has no batch-normalization layers (e.g. pure attention)."""


class PoolError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherRecipe:
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "sgd"  # sgd | adamw
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    label_smoothing: float = 0.0
    augment: bool = True  # pad-4 random crop + horizontal flip
    seed: int = 0

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass(frozen=True)
class TeacherHandle:
    spec: ModelSpec
    model: nn.Module = field(compare=False, repr=False)
    test_accuracy: float
    recipe_fingerprint: str
    seed: int
    dataset: str = ""
    checkpoint: str | None = None

    @property
    def teacher_id(self) -> str:
        return f"{self.spec.arch}-{self.dataset}-{self.recipe_fingerprint[:8]}"


@dataclass(frozen=True)
class BNLayerStats:
    layer_id: str
    mean: torch.Tensor
    var: torch.Tensor


BNStats = list  # ordered list[BNLayerStats], model traversal order


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = nn.functional.pad(x, (4, 4, 4, 4))
    offs = torch.randint(0, 9, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out


def train_teacher(spec: ModelSpec, train, recipe: TeacherRecipe = TeacherRecipe(), test=None,
                  dataset: str = "") -> TeacherHandle:
    """Train ``spec`` from scratch on a real train split. Deterministic given ``recipe.seed``."""
    labels = train.labels
    if len(np.unique(labels)) != spec.num_classes or int(labels.max()) >= spec.num_classes:
        raise ValueError(f"train split classes do not match spec.num_classes={spec.num_classes}")
    model = build_model(spec, seed=recipe.seed)
    if recipe.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=recipe.lr, momentum=recipe.momentum,
                              weight_decay=recipe.weight_decay, nesterov=True)
    elif recipe.optimizer == "adamw":
        opt = torch.optim.AdamW(model.parameters(), lr=recipe.lr, weight_decay=recipe.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {recipe.optimizer!r}")
    n = len(train)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=recipe.epochs * steps_per_epoch)
    criterion = nn.CrossEntropyLoss(label_smoothing=recipe.label_smoothing)
    model.train()
    for epoch in range(recipe.epochs):
        gen = torch_generator(recipe.seed, epoch)
        order = torch.randperm(n, generator=gen).numpy()
        total = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * recipe.batch_size:(step + 1) * recipe.batch_size]
            x, y = train.images(idx), train.targets(idx)
            if recipe.augment:
                x = _augment(x, gen)
            loss = criterion(model(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        log.info("squeeze %s epoch %d loss %.4f", spec.arch, epoch, total / steps_per_epoch)
    _freeze(model)
    acc = evaluate_accuracy(model, test) if test is not None else float("nan")
    return TeacherHandle(spec, model, acc, recipe.fingerprint(), recipe.seed, dataset)


def save_teacher(teacher: TeacherHandle, directory: str | os.PathLike, recipe: TeacherRecipe | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(teacher.model.state_dict(), d / "model.pt")
    meta = {
        "arch": teacher.spec.arch, "resolution": teacher.spec.resolution, "num_classes": teacher.spec.num_classes,
        "test_accuracy": teacher.test_accuracy, "recipe_fingerprint": teacher.recipe_fingerprint,
        "seed": teacher.seed, "dataset": teacher.dataset,
    }
    if recipe is not None:
        meta["recipe"] = asdict(recipe)
    write_json(d / "teacher.json", meta)
    return d


def load_teacher(directory: str | os.PathLike) -> TeacherHandle:
    d = Path(directory)
    meta_file, ckpt = d / "teacher.json", d / "model.pt"
    for f in (meta_file, ckpt):
        if not f.is_file():
            raise FileNotFoundError(f"missing teacher artifact: {f}")
    meta = json.loads(meta_file.read_text())
    spec = ModelSpec(meta["arch"], meta["resolution"], meta["num_classes"])
    model = build_model(spec)
    model.load_state_dict(torch.load(ckpt, map_location="cpu", weights_only=True))
    return TeacherHandle(spec, _freeze(model), meta["test_accuracy"], meta["recipe_fingerprint"],
                         meta["seed"], meta.get("dataset", ""), str(d))


def bn_layers(model: nn.Module) -> list[tuple[str, _BatchNorm]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, _BatchNorm)]


def extract_bn_stats(teacher: TeacherHandle | nn.Module) -> BNStats:
    """Running (mean, variance) of every BN layer, in traversal order. Pure read."""
    model = teacher.model if isinstance(teacher, TeacherHandle) else teacher
    layers = bn_layers(model)
    if not layers:
        name = teacher.spec.arch if isinstance(teacher, TeacherHandle) else type(model).__name__
        raise NoBNStatistics(f"{name} has no batch-normalization layers")
    out = []
    for name, m in layers:
        if m.running_mean is None or m.running_var is None:
            raise NoBNStatistics(f"BN layer {name} does not track running statistics")
        out.append(BNLayerStats(name, m.running_mean.detach().clone(), m.running_var.detach().clone()))
    return out


def _check_batch(spec: ModelSpec, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[-1] != spec.resolution or batch.shape[-2] != spec.resolution:
        raise ValueError(f"batch shape {tuple(batch.shape)} incompatible with {spec.arch}@{spec.resolution}px")


@torch.no_grad()
def teacher_forward(teacher: TeacherHandle, batch: torch.Tensor) -> torch.Tensor:
    _check_batch(teacher.spec, batch)
    model = teacher.model
    if model.training:
        model.eval()
    p = next(model.parameters())
    return model(batch.to(device=p.device, dtype=p.dtype)).to(batch.dtype)


class TeacherPool:
    """Ordered teacher collection for (hybrid) soft labels. Members share classes and resolution."""

    def __init__(self, teachers):
        teachers = list(teachers)
        if not teachers:
            raise PoolError("teacher pool must not be empty")
        k = {t.spec.num_classes for t in teachers}
        r = {t.spec.resolution for t in teachers}
        if len(k) != 1:
            raise PoolError(f"pool members disagree on num_classes: {sorted(k)}")
        if len(r) != 1:
            raise PoolError(f"pool members disagree on input resolution: {sorted(r)}")
        datasets = {t.dataset for t in teachers if t.dataset}
        if len(datasets) > 1:
            raise PoolError(f"pool members trained on different datasets: {sorted(datasets)}")
        self.members: tuple[TeacherHandle, ...] = tuple(teachers)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].spec.num_classes

    @property
    def resolution(self) -> int:
        return self.members[0].spec.resolution

    def fingerprint(self) -> str:
        return fingerprint([(t.spec.arch, t.recipe_fingerprint, t.seed, t.dataset) for t in self.members])

    def forward(self, batch: torch.Tensor) -> list[torch.Tensor]:
        return [teacher_forward(t, batch) for t in self.members]


def build_pool(teachers) -> TeacherPool:
    return TeacherPool(teachers)
