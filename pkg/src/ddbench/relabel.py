"""Epoch-wise soft labels.

Each mini-batch gets ONE augmented view (random resized crop, horizontal flip,
PatchShuffle, CutMix); the teacher pool labels exactly the tensor the student
trains on. Every random choice is drawn from a stream keyed by
``(base seed, epoch, step)`` and written to a trace, so a batch can be
rebuilt bit-for-bit from the un-augmented images plus its trace.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .teachers import TeacherPool
from .utils import numpy_rng, sha256_bytes, write_json


class AugmentationError(ValueError):
    pass


class CacheIntegrityError(RuntimeError):
    def __init__(self, epoch: int, step: int | None, detail: str):
        self.epoch, self.step = epoch, step
        where = f"epoch {epoch}" + (f" step {step}" if step is not None else "")
        super().__init__(f"label cache corrupted at {where}: {detail}")


@dataclass
class AugSpec:
    scale: tuple[float, float] = (0.5, 1.0)
    flip_p: float = 0.5
    cutmix: bool = True
    cutmix_beta: float = 1.0
    patch_shuffle: bool = True
    shuffle_grid: int = 2
    shuffle_p: float = 0.5
    seed: int = 0
    random_crop: bool = True

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise AugmentationError("crop scale must satisfy 0 < lower <= upper <= 1")
        self.scale = (float(lo), float(hi))
        for name in ("flip_p", "shuffle_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise AugmentationError(f"{name} must lie in [0, 1]")
        if self.cutmix_beta <= 0:
            raise AugmentationError("cutmix_beta must be > 0")
        if self.shuffle_grid < 1:
            raise AugmentationError("shuffle_grid must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = list(self.scale)
        return d


@dataclass
class AugmentedBatch:
    images: torch.Tensor  # [B,C,H,W]
    labels: torch.Tensor  # primary labels [B]
    partner_labels: torch.Tensor  # CutMix partner labels [B]
    lam: torch.Tensor  # preserved-area fraction of the primary image [B]
    trace: dict = field(repr=False)
    indices: np.ndarray | None = None  # positions in the distilled set


@dataclass
class SoftLabels:
    probs: torch.Tensor  # [B, K]
    logits: torch.Tensor  # pool-mean logits [B, K] (MSE-style losses)
    tau: float
    pool_fingerprint: str


# --------------------------------------------------------------------------- augmentation


def _rrc_box(rng: np.random.Generator, h: int, w: int, scale, ratio=(3 / 4, 4 / 3)) -> list[int]:
    area = h * w
    lr = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*lr))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            return [int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw]
    side = min(h, w)
    return [(h - side) // 2, (w - side) // 2, side, side]


def cutmix_box(lam: float, h: int, w: int, cy: int, cx: int) -> list[int]:
    """Standard CutMix box ``[y1, y2, x1, x2]`` for a draw ``lam`` centred at (cy, cx)."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    y1, y2 = int(np.clip(cy - ch // 2, 0, h)), int(np.clip(cy + ch // 2, 0, h))
    x1, x2 = int(np.clip(cx - cw // 2, 0, w)), int(np.clip(cx + cw // 2, 0, w))
    return [y1, y2, x1, x2]


def sample_trace(batch_size: int, height: int, width: int, spec: AugSpec, epoch: int, step: int) -> dict:
    if batch_size < 1:
        raise AugmentationError("batch must be non-empty")
    if spec.patch_shuffle and (height % spec.shuffle_grid or width % spec.shuffle_grid):
        raise AugmentationError(f"grid {spec.shuffle_grid} does not divide {height}x{width} images")
    rng = numpy_rng(spec.seed, epoch, step)
    trace: dict = {"seed": [spec.seed, epoch, step], "size": [height, width]}
    if spec.random_crop:
        trace["crops"] = [_rrc_box(rng, height, width, spec.scale) for _ in range(batch_size)]
    trace["flips"] = [bool(v) for v in rng.random(batch_size) < spec.flip_p]
    if spec.patch_shuffle:
        g = spec.shuffle_grid
        perm = rng.permutation(batch_size).tolist()
        swaps = []
        for a, b in zip(perm[0::2], perm[1::2]):
            if rng.random() < spec.shuffle_p:
                swaps.append([a, b, int(rng.integers(g)), int(rng.integers(g))])
        trace["shuffle"] = {"grid": g, "swaps": swaps}
    if spec.cutmix:
        lam = float(rng.beta(spec.cutmix_beta, spec.cutmix_beta))
        perm = rng.permutation(batch_size).tolist()
        box = cutmix_box(lam, height, width, int(rng.integers(height)), int(rng.integers(width)))
        trace["cutmix"] = {"draw": lam, "perm": perm, "box": box}
    return trace


def apply_trace(images: torch.Tensor, labels: torch.Tensor, trace: dict):
    """Deterministically rebuild ``(images, partner_labels, lam)`` from a trace."""
    x = images
    h, w = x.shape[-2:]
    if "crops" in trace:
        out = torch.empty_like(x)
        for i, (top, left, ch, cw) in enumerate(trace["crops"]):
            crop = x[i:i + 1, :, top:top + ch, left:left + cw]
            if (ch, cw) != (h, w):
                crop = nn.functional.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
            out[i] = crop[0]
        x = out
    flips = torch.as_tensor(trace["flips"], dtype=torch.bool)
    if flips.any():
        x = x.clone()
        x[flips] = x[flips].flip(-1)
    if "shuffle" in trace and trace["shuffle"]["swaps"]:
        g = trace["shuffle"]["grid"]
        ph, pw = h // g, w // g
        x = x.clone()
        for a, b, row, col in trace["shuffle"]["swaps"]:
            sl = (slice(None), slice(row * ph, (row + 1) * ph), slice(col * pw, (col + 1) * pw))
            cell_a = x[a][sl].clone()
            x[a][sl] = x[b][sl]
            x[b][sl] = cell_a
    partner = labels.clone()
    lam = torch.ones(len(labels), dtype=torch.float64)
    if "cutmix" in trace:
        perm = torch.as_tensor(trace["cutmix"]["perm"], dtype=torch.long)
        y1, y2, x1, x2 = trace["cutmix"]["box"]
        if (y2 - y1) * (x2 - x1) > 0:
            mixed = x.clone()
            mixed[:, :, y1:y2, x1:x2] = x[perm][:, :, y1:y2, x1:x2]
            x = mixed
        partner = labels[perm]
        lam = torch.full((len(labels),), 1.0 - (y2 - y1) * (x2 - x1) / (h * w), dtype=torch.float64)
    return x, partner, lam


def augment_batch(images: torch.Tensor, labels: torch.Tensor, spec: AugSpec, epoch: int, step: int,
                  indices: np.ndarray | None = None) -> AugmentedBatch:
    trace = sample_trace(len(images), images.shape[-2], images.shape[-1], spec, epoch, step)
    x, partner, lam = apply_trace(images, labels, trace)
    return AugmentedBatch(x, labels, partner, lam, trace, indices)


def replay(images: torch.Tensor, labels: torch.Tensor, trace: dict) -> AugmentedBatch:
    x, partner, lam = apply_trace(images, labels, trace)
    return AugmentedBatch(x, labels, partner, lam, trace)


# --------------------------------------------------------------------------- soft labels


def soft_labels(pool: TeacherPool, batch: AugmentedBatch | torch.Tensor, tau: float) -> SoftLabels:
    """Mean over pool members of ``softmax(logits / tau)``.

    The mean is accumulated incrementally (``m += (x - m) / k``) so identical
    members leave the single-teacher probabilities bit-for-bit unchanged.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    images = batch.images if isinstance(batch, AugmentedBatch) else batch
    if images.shape[-1] != pool.resolution or images.shape[-2] != pool.resolution:
        raise ValueError(f"batch resolution {tuple(images.shape[-2:])} != pool resolution {pool.resolution}")
    probs = logits = None
    for k, z in enumerate(pool.forward(images), start=1):
        p = torch.softmax(z / tau, dim=1)
        if probs is None:
            probs, logits = p, z
        else:
            probs = probs + (p - probs) / k
            logits = logits + (z - logits) / k
    return SoftLabels(probs, logits, float(tau), pool.fingerprint())


# --------------------------------------------------------------------------- batching + cache


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batch index lists for one epoch (last batch may be short)."""
    order = numpy_rng(seed, 0x5EED, epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _pack(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def cache_labels(pool: TeacherPool, distilled, spec: AugSpec, epochs: int, tau: float, path,
                 batch_size: int, seed: int) -> Path:
    """Materialize per-epoch, per-step soft labels and augmentation traces.

    The batch schedule (``batch_size``, ``seed``) must be the one the student run
    will use; :func:`ddbench.posteval.train_student` checks it on replay.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"label cache path not writable: {path} ({exc})") from exc
    n = len(distilled)
    index = {"n": n, "epochs": epochs, "batch_size": batch_size, "seed": seed, "tau": tau,
             "pool": pool.fingerprint(), "aug": spec.to_dict(), "files": {}}
    for epoch in range(epochs):
        arrays, checks, traces = {}, {}, []
        for step, idx in enumerate(epoch_batches(n, batch_size, seed, epoch)):
            ab = augment_batch(distilled.images[idx], distilled.hard_labels[idx], spec, epoch, step, idx)
            sl = soft_labels(pool, ab, tau)
            arrays[f"probs_{step}"] = sl.probs.numpy()
            arrays[f"logits_{step}"] = sl.logits.numpy()
            arrays[f"indices_{step}"] = np.asarray(idx, dtype=np.int64)
            traces.append(ab.trace)
            checks[str(step)] = _entry_digest(arrays, step, ab.trace)
        arrays["traces"] = np.frombuffer(json.dumps(traces).encode(), dtype=np.uint8)
        name = f"labels_epoch_{epoch:04d}.npz"
        (path / name).write_bytes(_pack(arrays))
        index["files"][str(epoch)] = {"file": name, "steps": checks}
    write_json(path / "index.json", index)
    return path


def _entry_digest(arrays: dict, step: int, trace: dict) -> str:
    parts = [arrays[f"{k}_{step}"].tobytes() for k in ("probs", "logits", "indices")]
    return sha256_bytes(b"".join(parts) + json.dumps(trace, sort_keys=True).encode())


class LabelCache:
    """Read side of :func:`cache_labels`; every entry is checksum-verified on access."""

    def __init__(self, path):
        self.path = Path(path)
        idx = self.path / "index.json"
        if not idx.is_file():
            raise FileNotFoundError(f"no label cache index at {idx}")
        self.index = json.loads(idx.read_text())
        self._epoch: int | None = None
        self._arrays: dict | None = None
        self._traces: list | None = None

    def _load_epoch(self, epoch: int):
        if self._epoch == epoch:
            return
        meta = self.index["files"].get(str(epoch))
        if meta is None:
            raise CacheIntegrityError(epoch, None, "epoch missing from cache")
        try:
            with np.load(self.path / meta["file"]) as z:
                arrays = {k: z[k] for k in z.files}
            traces = json.loads(arrays.pop("traces").tobytes().decode())
        except Exception as exc:
            raise CacheIntegrityError(epoch, None, f"unreadable file {meta['file']} ({exc})") from exc
        self._epoch, self._arrays, self._traces = epoch, arrays, traces

    def get(self, epoch: int, step: int):
        """Returns ``(indices, trace, probs, logits)`` for one step."""
        self._load_epoch(epoch)
        want = self.index["files"][str(epoch)]["steps"].get(str(step))
        try:
            trace = self._traces[step]
            got = _entry_digest(self._arrays, step, trace)
        except (KeyError, IndexError) as exc:
            raise CacheIntegrityError(epoch, step, "entry missing") from exc
        if want is None or got != want:
            raise CacheIntegrityError(epoch, step, "checksum mismatch")
        a = self._arrays
        return (a[f"indices_{step}"], trace, torch.from_numpy(a[f"probs_{step}"].copy()),
                torch.from_numpy(a[f"logits_{step}"].copy()))


def cache_size_bytes(path) -> int:
    return sum(f.stat().st_size for f in Path(path).glob("labels_epoch_*.npz"))
