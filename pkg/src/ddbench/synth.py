"""Distilled-set synthesis: pixel recovery against a frozen teacher, patch
selection and uniform random sampling.

Every per-class task draws from its own random stream keyed by
``(seed, class index)``, so classes can be processed in any order or in
parallel with identical results.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .datahub import DistilledDataset, Provenance, get_spec, import_distilled, normalize, quantize, valid_range
from .teachers import DivergenceError, TeacherHandle, bn_layers, extract_bn_stats, teacher_forward
from .utils import numpy_rng, torch_generator

log = logging.getLogger(__name__)

# BN-term weight: CE / L_BN measured at noise init on the desk-scale digits32
# convnet-small teacher (scripts/calibrate_lambda.py: ratio 0.424-0.429 over 3 seeds).
DEFAULT_BN_WEIGHT = 0.43


class SynthesisError(RuntimeError):
    pass


class SelectionError(SynthesisError):
    pass


class LayerMismatchError(ValueError):
    pass


@dataclass
class RecoverConfig:
    iterations: int = 500
    lr: float = 0.1
    bn_weight: float = DEFAULT_BN_WEIGHT  # lambda
    bn_mean_weight: float = 1.0
    bn_var_weight: float = 1.0
    init: str = "noise"  # noise | real-random | selection | imported
    init_path: str | None = None  # manifest directory for init="imported"
    curriculum_crop: tuple[float, float] | None = None  # (start scale, end scale)
    batch_size: int = 100
    seed: int = 0
    quantize_output: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.bn_weight < 0 or self.bn_mean_weight < 0 or self.bn_var_weight < 0:
            raise ValueError("BN weights must be >= 0")
        if self.init not in {"noise", "real-random", "selection", "imported"}:
            raise ValueError(f"unknown init strategy {self.init!r}")
        if self.curriculum_crop is not None:
            start, end = self.curriculum_crop
            if not 0 < start <= end <= 1:
                raise ValueError("curriculum crop needs 0 < start <= end <= 1")
            self.curriculum_crop = (float(start), float(end))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SelectConfig:
    candidates_per_source: int = 5
    patches_per_image: int = 1  # m, a perfect square
    patch_size: int | None = None  # defaults to resolution / sqrt(m)
    sources_per_class: int = 50
    scale: tuple[float, float] = (0.5, 1.0)
    seed: int = 0
    quantize_output: bool = True
    score_batch: int = 256

    def __post_init__(self):
        r = math.isqrt(self.patches_per_image)
        if self.patches_per_image < 1 or r * r != self.patches_per_image:
            raise ValueError("patches_per_image must be a perfect square")
        if self.candidates_per_source * self.sources_per_class < self.patches_per_image:
            raise ValueError("candidate count must be >= patches_per_image")
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop scale range must satisfy 0 < lo <= hi <= 1")
        self.scale = (float(lo), float(hi))


# --------------------------------------------------------------------------- BN alignment


def bn_alignment_loss(batch_stats, target, mean_weight: float = 1.0, var_weight: float = 1.0) -> torch.Tensor:
    """Sum over layers of ``mean_weight*||mu_b - mu_run||^2 + var_weight*||var_b - var_run||^2``.

    Both arguments are ordered sequences of ``(layer_id, mean, var)`` triples
    (or :class:`~ddbench.teachers.BNLayerStats`).
    """
    batch_stats, target = list(batch_stats), list(target)
    if len(batch_stats) != len(target):
        raise LayerMismatchError(f"{len(batch_stats)} batch layers vs {len(target)} target layers")
    total = None
    for b, t in zip(batch_stats, target):
        b_id, b_mean, b_var = _unpack(b)
        t_id, t_mean, t_var = _unpack(t)
        if b_id != t_id or b_mean.shape != t_mean.shape or b_var.shape != t_var.shape:
            raise LayerMismatchError(f"layer {b_id!r}{tuple(b_mean.shape)} vs {t_id!r}{tuple(t_mean.shape)}")
        t_mean = t_mean.to(b_mean)
        t_var = t_var.to(b_var)
        term = mean_weight * (b_mean - t_mean).pow(2).sum() + var_weight * (b_var - t_var).pow(2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def _unpack(s):
    if hasattr(s, "layer_id"):
        return s.layer_id, s.mean, s.var
    return s


class BNStatsRecorder:
    """Forward hooks recording each BN layer's input batch mean / biased variance."""

    def __init__(self, model: nn.Module):
        self.layers = bn_layers(model)
        self.stats: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self._handles = []

    def __enter__(self):
        for name, m in self.layers:
            self._handles.append(m.register_forward_hook(self._hook(name)))
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()

    def _hook(self, name):
        def fn(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.ndim))
            self.stats[name] = (x.mean(dims), x.var(dims, unbiased=False))
        return fn

    def collected(self):
        return [(name, *self.stats[name]) for name, _ in self.layers]


def recovery_objective(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, target_stats,
                       bn_weight: float, mean_weight: float = 1.0, var_weight: float = 1.0):
    """Returns ``(total, ce, bn)`` for ``CE(f(x), y) + bn_weight * L_BN(f, x)``."""
    with BNStatsRecorder(model) as rec:
        logits = model(images)
    ce = nn.functional.cross_entropy(logits, labels)
    bn = bn_alignment_loss(rec.collected(), target_stats, mean_weight, var_weight)
    return ce + bn_weight * bn, ce, bn


@torch.no_grad()
def balanced_bn_weight(teacher: TeacherHandle, per_class: int = 10, seed: int = 0) -> float:
    """``CE / L_BN`` on a noise-initialized batch: the weight that puts both terms
    on the same scale at initialization (the rule behind ``DEFAULT_BN_WEIGHT``)."""
    k = teacher.spec.num_classes
    classes = list(range(k))
    inits = _init_images(teacher, RecoverConfig(init="noise", seed=seed), classes, {c: per_class for c in classes})
    dtype = next(teacher.model.parameters()).dtype
    x = torch.cat([inits[c] for c in classes]).to(dtype)
    y = torch.arange(k).repeat_interleave(per_class)
    _, ce, bn = recovery_objective(teacher.model.eval(), x, y, extract_bn_stats(teacher), 1.0)
    return float(ce / bn)


def _curriculum_crop(x: torch.Tensor, scale: float, gen: torch.Generator) -> torch.Tensor:
    if scale >= 1.0:
        return x
    h, w = x.shape[-2:]
    ch, cw = max(1, round(h * math.sqrt(scale))), max(1, round(w * math.sqrt(scale)))
    top = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
    crop = x[..., top:top + ch, left:left + cw]
    return nn.functional.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)


def _crop_scale(cfg: RecoverConfig, it: int) -> float:
    if cfg.curriculum_crop is None:
        return 1.0
    start, end = cfg.curriculum_crop
    return start + (end - start) * it / max(cfg.iterations - 1, 1)


def _init_images(teacher: TeacherHandle, cfg: RecoverConfig, classes: list[int], counts: dict[int, int],
                 train=None, select_cfg: SelectConfig | None = None) -> dict[int, torch.Tensor]:
    spec = get_spec(teacher.dataset) if teacher.dataset else None
    res, ch = teacher.spec.resolution, 3 if spec is None else spec.channels
    out: dict[int, torch.Tensor] = {}
    if cfg.init == "noise":
        for c in classes:
            x = torch.randn(counts[c], ch, res, res, generator=torch_generator(cfg.seed, c))
            if spec is not None:
                lo, hi = valid_range(spec)
                x = torch.max(torch.min(x, hi), lo)
            out[c] = x
    elif cfg.init == "real-random":
        if train is None:
            raise SynthesisError("init='real-random' needs the real train split")
        for c in classes:
            pool = train.class_indices(c)
            if len(pool) < counts[c]:
                raise SynthesisError(f"class {c}: {len(pool)} real images < {counts[c]} slots")
            idx = np.sort(numpy_rng(cfg.seed, c).choice(pool, size=counts[c], replace=False))
            out[c] = train.images(idx)
    elif cfg.init == "selection":
        if train is None:
            raise SynthesisError("init='selection' needs the real train split")
        ipc = max(counts.values())
        sel = select_patches(teacher, train, select_cfg or SelectConfig(seed=cfg.seed), ipc, classes=classes)
        for c in classes:
            out[c] = sel.images[sel.hard_labels == c][:counts[c]]
    elif cfg.init == "imported":
        if not cfg.init_path:
            raise SynthesisError("init='imported' needs init_path pointing at a manifest directory")
        imp = import_distilled(cfg.init_path)
        for c in classes:
            x = imp.images[imp.hard_labels == c]
            if len(x) < counts[c]:
                raise SynthesisError(f"class {c}: imported set has {len(x)} images < {counts[c]} slots")
            out[c] = x[:counts[c]]
    return out


def recover_optimize(teacher: TeacherHandle, cfg: RecoverConfig, target_labels: torch.Tensor, train=None,
                     select_cfg: SelectConfig | None = None) -> DistilledDataset:
    """Optimize pixels so the teacher classifies them as their target class while
    their per-layer BN statistics match the teacher's running statistics.

    Images are optimized in class-homogeneous groups of at most ``cfg.batch_size``.
    Per-group initial/final objective values land in ``provenance.extra``.
    """
    target_stats = extract_bn_stats(teacher)
    t0 = time.perf_counter()
    model = teacher.model
    model.eval()
    dtype = next(model.parameters()).dtype
    target_labels = torch.as_tensor(target_labels, dtype=torch.long)
    classes = sorted(set(target_labels.tolist()))
    counts = {c: int((target_labels == c).sum()) for c in classes}
    inits = _init_images(teacher, cfg, classes, counts, train, select_cfg)
    spec = get_spec(teacher.dataset) if teacher.dataset else None
    lo, hi = valid_range(spec, dtype) if spec is not None else (None, None)

    results: dict[int, list[torch.Tensor]] = {c: [] for c in classes}
    history = []
    for c in classes:
        for b, start in enumerate(range(0, counts[c], cfg.batch_size)):
            x0 = inits[c][start:start + cfg.batch_size].to(dtype)
            y = torch.full((len(x0),), c, dtype=torch.long)
            x, record = _optimize_group(model, x0, y, target_stats, cfg, lo, hi, torch_generator(cfg.seed, c, b))
            record.update(cls=c, group=b)
            history.append(record)
            results[c].append(x)

    # place outputs back in target-label order
    images = torch.empty((len(target_labels),) + tuple(inits[classes[0]].shape[1:]), dtype=dtype)
    for c in classes:
        images[target_labels == c] = torch.cat(results[c])
    if cfg.quantize_output and spec is not None:
        images = normalize(quantize(images, spec), spec)
    elapsed = time.perf_counter() - t0
    dataset = teacher.dataset
    ipc = max(counts.values())
    balanced = len(set(counts.values())) == 1 and spec is not None and len(classes) == spec.num_classes
    prov = Provenance(
        method="recover", init=cfg.init, teacher_ids=[teacher.teacher_id], wall_clock_seconds=elapsed,
        seed=cfg.seed, extra={"config": _jsonable_cfg(cfg), "groups": history},
    )
    return DistilledDataset(images, target_labels.clone(), dataset, ipc, prov, unbalanced=not balanced)


def _jsonable_cfg(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _optimize_group(model, x0, y, target_stats, cfg: RecoverConfig, lo, hi, gen):
    def full_objective(img):
        with torch.no_grad():
            total, ce, bn = recovery_objective(model, img, y, target_stats, cfg.bn_weight,
                                               cfg.bn_mean_weight, cfg.bn_var_weight)
        return float(total), float(ce), float(bn)

    initial = full_objective(x0)
    if cfg.iterations == 0:
        return x0.clone(), {"initial": initial[0], "final": initial[0], "trace": []}
    x = x0.clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.lr, betas=(0.5, 0.9))
    trace = []
    for it in range(cfg.iterations):
        view = _curriculum_crop(x, _crop_scale(cfg, it), gen)
        total, ce, bn = recovery_objective(model, view, y, target_stats, cfg.bn_weight,
                                           cfg.bn_mean_weight, cfg.bn_var_weight)
        if not torch.isfinite(total):
            raise DivergenceError(epoch=0, step=it, what="recovery loss")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if lo is not None:
            with torch.no_grad():
                x.copy_(torch.max(torch.min(x, hi), lo))
        trace.append(total.item())
    x = x.detach()
    final = full_objective(x)
    return x, {"initial": initial[0], "final": final[0], "initial_ce": initial[1], "initial_bn": initial[2],
               "final_ce": final[1], "final_bn": final[2], "trace": trace}


# --------------------------------------------------------------------------- selection


def rank_candidates(losses, source_ids, crop_ids, keep: int) -> list[int]:
    """Positions of the ``keep`` lowest-loss candidates, ascending; ties broken by
    (source image index, crop index)."""
    losses = [float(v) for v in losses]
    order = sorted(range(len(losses)), key=lambda i: (losses[i], int(source_ids[i]), int(crop_ids[i])))
    return order[:keep]


def tile_mosaic(patches: torch.Tensor, m: int) -> torch.Tensor:
    """[g*m, C, p, p] -> [g, C, p*sqrt(m), p*sqrt(m)], row-major within each group."""
    r = math.isqrt(m)
    n, c, p, _ = patches.shape
    if n % m:
        raise ValueError(f"{n} patches do not split into groups of {m}")
    g = n // m
    x = patches.reshape(g, r, r, c, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(g, c, r * p, r * p)


def _rrc_box(h: int, w: int, scale, gen: torch.Generator, ratio=(3 / 4, 4 / 3)):
    """RandomResizedCrop box sampling with an explicit generator."""
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * float(torch.empty(1).uniform_(scale[0], scale[1], generator=gen))
        ar = math.exp(float(torch.empty(1).uniform_(*log_ratio, generator=gen)))
        cw = int(round(math.sqrt(target * ar)))
        chh = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < chh <= h:
            top = int(torch.randint(0, h - chh + 1, (1,), generator=gen))
            left = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
            return top, left, chh, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def resized_crop(x: torch.Tensor, box, size: int) -> torch.Tensor:
    top, left, hh, ww = box
    crop = x[..., top:top + hh, left:left + ww]
    if crop.shape[-2:] == (size, size):
        return crop.clone()
    return nn.functional.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


@torch.no_grad()
def _score(teacher: TeacherHandle, crops: torch.Tensor, label: int, batch: int) -> torch.Tensor:
    out = []
    for i in range(0, len(crops), batch):
        logits = teacher_forward(teacher, crops[i:i + batch])
        y = torch.full((len(logits),), label, dtype=torch.long)
        out.append(nn.functional.cross_entropy(logits, y, reduction="none"))
    return torch.cat(out)


def candidate_crops(train, c: int, cfg: SelectConfig) -> tuple[torch.Tensor, list[int], list[int]]:
    """Full-resolution candidate crops of class ``c`` with their (source index, crop index) ids."""
    res = train.spec.resolution
    pool = train.class_indices(c)
    n_src = min(cfg.sources_per_class, len(pool))
    if n_src == 0:
        raise SelectionError(f"class {c}: no source images")
    src = np.sort(numpy_rng(cfg.seed, c).choice(pool, size=n_src, replace=False))
    gen = torch_generator(cfg.seed, c)
    crops, src_ids, crop_ids = [], [], []
    for s, img in zip(src, train.images(src)):
        for j in range(cfg.candidates_per_source):
            box = _rrc_box(res, res, cfg.scale, gen)
            crops.append(resized_crop(img[None], box, res)[0])
            src_ids.append(int(s))
            crop_ids.append(j)
    return torch.stack(crops), src_ids, crop_ids


def select_patches(teacher: TeacherHandle, train, cfg: SelectConfig, ipc: int,
                   classes: list[int] | None = None) -> DistilledDataset:
    """Per class: random crops from sampled real images, scored by teacher CE
    against the class label; the ``ipc*m`` lowest-loss crops are kept and every
    consecutive group of ``m`` is tiled into one mosaic image."""
    t0 = time.perf_counter()
    spec = train.spec
    res = spec.resolution
    m = cfg.patches_per_image
    r = math.isqrt(m)
    p = cfg.patch_size or res // r
    if p * r != res:
        raise SelectionError(f"patch size {p} x {r} tiles != resolution {res}")
    need = ipc * m
    classes = list(range(spec.num_classes)) if classes is None else classes
    images, labels, chosen = [], [], {}
    for c in classes:
        crops_t, src_ids, crop_ids = candidate_crops(train, c, cfg)
        if len(crops_t) < need:
            raise SelectionError(f"class {c}: {len(crops_t)} candidates < ipc*m = {need}")
        losses = _score(teacher, crops_t, c, cfg.score_batch)
        keep = rank_candidates(losses.tolist(), src_ids, crop_ids, need)
        kept = crops_t[keep]
        if m > 1:
            kept = nn.functional.interpolate(kept, size=(p, p), mode="bilinear", align_corners=False, antialias=True)
            kept = tile_mosaic(kept, m)
        images.append(kept)
        labels.append(torch.full((ipc,), c, dtype=torch.long))
        chosen[c] = [[src_ids[i], crop_ids[i], float(losses[i])] for i in keep]
    out = torch.cat(images)
    if cfg.quantize_output:
        out = normalize(quantize(out, spec), spec)
    prov = Provenance(method="select", init="none", teacher_ids=[teacher.teacher_id],
                      wall_clock_seconds=time.perf_counter() - t0, seed=cfg.seed,
                      extra={"config": _jsonable_cfg(cfg), "selected": {str(k): v for k, v in chosen.items()}})
    full = len(classes) == spec.num_classes
    return DistilledDataset(out, torch.cat(labels), spec.name, ipc, prov, unbalanced=not full)


# --------------------------------------------------------------------------- random sampling


def random_sample(train, ipc: int, seed: int = 0) -> DistilledDataset:
    """Exactly ``ipc`` distinct real images per class, drawn uniformly; indices sorted."""
    t0 = time.perf_counter()
    spec = train.spec
    chosen = []
    for c in range(spec.num_classes):
        pool = train.class_indices(c)
        if len(pool) < ipc:
            raise SynthesisError(f"class {c} has {len(pool)} images < ipc={ipc}")
        chosen.append(np.sort(numpy_rng(seed, c).choice(pool, size=ipc, replace=False)))
    idx = np.concatenate(chosen)
    images = train.images(idx)
    labels = train.targets(idx)
    prov = Provenance(method="random", init="real-random", wall_clock_seconds=time.perf_counter() - t0,
                      seed=seed, extra={"indices": idx.tolist()})
    return DistilledDataset(images, labels, spec.name, ipc, prov)
