"""Real datasets, the distilled-set container and its on-disk manifest format.

Distilled images live in memory as float32 tensors in the dataset's normalized
space. On disk they are stored in [0, 1] pixel space: 8-bit PNG files when every
image sits on the 8-bit grid (lossless), otherwise a single chunked HDF5
container holding the exact float32 values.
"""
from __future__ import annotations

import dataclasses
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from PIL import Image

from .utils import sha256_bytes, write_json

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
DATA_ROOT_ENV = "DDBENCH_DATA_ROOT"


class DatahubError(Exception):
    """Base class for dataset loading and distilled-set I/O errors."""


class RegistryError(DatahubError):
    pass


class DatasetFileError(DatahubError):
    """Missing or corrupt real-dataset file; message carries the offending path."""


class InvariantError(DatahubError):
    pass


class SchemaError(DatahubError):
    pass


class ShapeMismatchError(DatahubError):
    pass


class MissingPayloadError(DatahubError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    resolution: int
    channels: int
    num_classes: int
    train_size: int
    test_size: int
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if self.train_size <= 0 or self.test_size <= 0:
            raise InvariantError(f"{self.name}: split sizes must be positive")
        if self.num_classes < 2:
            raise InvariantError(f"{self.name}: need at least 2 classes")
        if len(self.mean) != self.channels or len(self.std) != self.channels:
            raise InvariantError(f"{self.name}: normalization must have one entry per channel")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["mean"] = tuple(d["mean"])
        d["std"] = tuple(d["std"])
        return cls(**d)


_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

REGISTRY: dict[str, DatasetSpec] = {
    "cifar10": DatasetSpec("cifar10", 32, 3, 10, 50_000, 10_000,
                           (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": DatasetSpec("cifar100", 32, 3, 100, 50_000, 10_000,
                            (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tinyimagenet": DatasetSpec("tinyimagenet", 64, 3, 200, 100_000, 10_000,
                                (0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
    # imagenette2 / imagewoof2 full-size releases; validation split is the test split
    "imagenette": DatasetSpec("imagenette", 224, 3, 10, 9_469, 3_925, _IMAGENET_MEAN, _IMAGENET_STD),
    "imagewoof": DatasetSpec("imagewoof", 224, 3, 10, 9_025, 3_929, _IMAGENET_MEAN, _IMAGENET_STD),
    "imagenet1k": DatasetSpec("imagenet1k", 224, 3, 1000, 1_281_167, 50_000, _IMAGENET_MEAN, _IMAGENET_STD),
    # offline desk-scale set: scikit-learn's bundled 8x8 digits upsampled to 32x32 RGB
    "digits32": DatasetSpec("digits32", 32, 3, 10, 1_437, 360,
                            (0.3052, 0.3052, 0.3052), (0.3236, 0.3236, 0.3236)),
}

# directory name expected under ``root`` for each on-disk dataset
_LAYOUT = {
    "cifar10": "cifar-10-batches-py",
    "cifar100": "cifar-100-python",
    "tinyimagenet": "tiny-imagenet-200",
    "imagenette": "imagenette2",
    "imagewoof": "imagewoof2",
    "imagenet1k": "imagenet",
}


def get_spec(name: str) -> DatasetSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown dataset {name!r}; registry: {sorted(REGISTRY)}") from None


def _stats(spec: DatasetSpec, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    mean = torch.tensor(spec.mean, dtype=dtype).view(1, -1, 1, 1)
    std = torch.tensor(spec.std, dtype=dtype).view(1, -1, 1, 1)
    return mean, std


def normalize(pixels: torch.Tensor, spec: DatasetSpec) -> torch.Tensor:
    """uint8 [N,C,H,W] -> float32 normalized. The one canonical conversion."""
    mean, std = _stats(spec)
    return (pixels.to(torch.float32) / 255.0 - mean) / std


def to_unit(images: torch.Tensor, spec: DatasetSpec) -> torch.Tensor:
    """Normalized -> [0, 1] pixel space (float)."""
    mean, std = _stats(spec, images.dtype)
    return images * std + mean


def from_unit(unit: torch.Tensor, spec: DatasetSpec) -> torch.Tensor:
    mean, std = _stats(spec, unit.dtype)
    return (unit - mean) / std


def valid_range(spec: DatasetSpec, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel normalized values of pixel 0 and pixel 1 (shape [1,C,1,1])."""
    mean, std = _stats(spec, dtype)
    return (0 - mean) / std, (1 - mean) / std


def quantize(images: torch.Tensor, spec: DatasetSpec) -> torch.Tensor:
    """Normalized float -> uint8 pixels (nearest 8-bit level)."""
    return torch.round(to_unit(images.to(torch.float32), spec).clamp(0, 1) * 255).to(torch.uint8)


def on_uint8_grid(images: torch.Tensor, spec: DatasetSpec) -> bool:
    if images.dtype != torch.float32:
        return False
    return torch.equal(normalize(quantize(images, spec), spec), images)


# --------------------------------------------------------------------------- splits


class Split:
    """One split of a real dataset. Images come out normalized, float32, [n,C,H,W]."""

    spec: DatasetSpec
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def pixels(self, indices: Sequence[int] | np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def images(self, indices: Sequence[int] | np.ndarray | None = None) -> torch.Tensor:
        if indices is None:
            indices = np.arange(len(self))
        return normalize(self.pixels(indices), self.spec)

    def targets(self, indices: Sequence[int] | np.ndarray | None = None) -> torch.Tensor:
        if indices is None:
            return torch.as_tensor(self.labels, dtype=torch.long)
        return torch.as_tensor(self.labels[np.asarray(indices, dtype=np.int64)], dtype=torch.long)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            idx = np.arange(start, min(start + batch_size, len(self)))
            yield self.images(idx), self.targets(idx)


class ArraySplit(Split):
    def __init__(self, pixels: torch.Tensor, labels: np.ndarray, spec: DatasetSpec):
        assert pixels.dtype == torch.uint8 and pixels.ndim == 4
        self._pixels = pixels
        self.labels = np.asarray(labels, dtype=np.int64)
        self.spec = spec

    def pixels(self, indices):
        return self._pixels[torch.as_tensor(np.asarray(indices, dtype=np.int64))]


class FolderSplit(Split):
    """Lazily decoded image files; each is resized (short side) and center-cropped."""

    def __init__(self, paths: list[Path], labels: np.ndarray, spec: DatasetSpec):
        self.paths = paths
        self.labels = np.asarray(labels, dtype=np.int64)
        self.spec = spec

    def _load(self, path: Path) -> np.ndarray:
        res = self.spec.resolution
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                w, h = im.size
                if (w, h) != (res, res):
                    short = res if res <= 64 else round(res * 256 / 224)
                    scale = short / min(w, h)
                    im = im.resize((max(res, round(w * scale)), max(res, round(h * scale))), Image.BILINEAR)
                    w, h = im.size
                    left, top = (w - res) // 2, (h - res) // 2
                    im = im.crop((left, top, left + res, top + res))
                return np.asarray(im, dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise DatasetFileError(f"corrupt image file: {path} ({exc})") from exc

    def pixels(self, indices):
        arr = np.stack([self._load(self.paths[int(i)]) for i in np.asarray(indices).ravel()])
        return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------- loaders


def _unpickle(path: Path) -> dict:
    if not path.is_file():
        raise DatasetFileError(f"missing dataset file: {path}")
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except Exception as exc:
        raise DatasetFileError(f"corrupt dataset file: {path} ({exc})") from exc


def _cifar_split(paths: list[Path], label_key: bytes, spec: DatasetSpec) -> ArraySplit:
    data, labels = [], []
    for p in paths:
        d = _unpickle(p)
        try:
            x = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
            y = np.asarray(d[label_key], dtype=np.int64)
        except (KeyError, ValueError) as exc:
            raise DatasetFileError(f"corrupt dataset file: {p} ({exc})") from exc
        if len(x) != len(y):
            raise DatasetFileError(f"corrupt dataset file: {p} (image/label count mismatch)")
        data.append(x)
        labels.append(y)
    return ArraySplit(torch.from_numpy(np.concatenate(data)), np.concatenate(labels), spec)


def _load_cifar10(base: Path, spec):
    train = _cifar_split([base / f"data_batch_{i}" for i in range(1, 6)], b"labels", spec)
    test = _cifar_split([base / "test_batch"], b"labels", spec)
    return train, test


def _load_cifar100(base: Path, spec):
    return (_cifar_split([base / "train"], b"fine_labels", spec),
            _cifar_split([base / "test"], b"fine_labels", spec))


_IMG_EXT = {".jpeg", ".jpg", ".png", ".bmp"}


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in _IMG_EXT)


def _class_dirs(split_dir: Path) -> list[Path]:
    if not split_dir.is_dir():
        raise DatasetFileError(f"missing dataset directory: {split_dir}")
    return sorted(p for p in split_dir.iterdir() if p.is_dir())


def _folder_split(split_dir: Path, classes: list[str], spec, sub: str = "") -> FolderSplit:
    paths, labels = [], []
    for c, name in enumerate(classes):
        d = split_dir / name / sub if sub else split_dir / name
        if not d.is_dir():
            raise DatasetFileError(f"missing class directory: {d}")
        files = _list_images(d)
        paths += files
        labels += [c] * len(files)
    return FolderSplit(paths, np.asarray(labels), spec)


def _load_imagefolder(base: Path, spec):
    classes = [p.name for p in _class_dirs(base / "train")]
    return _folder_split(base / "train", classes, spec), _folder_split(base / "val", classes, spec)


def _load_tinyimagenet(base: Path, spec):
    wnids_file = base / "wnids.txt"
    if not wnids_file.is_file():
        raise DatasetFileError(f"missing dataset file: {wnids_file}")
    classes = sorted(wnids_file.read_text().split())
    train = _folder_split(base / "train", classes, spec, sub="images")
    ann = base / "val" / "val_annotations.txt"
    if not ann.is_file():
        raise DatasetFileError(f"missing dataset file: {ann}")
    index = {c: i for i, c in enumerate(classes)}
    rows = sorted(line.split("\t")[:2] for line in ann.read_text().splitlines() if line.strip())
    paths = [base / "val" / "images" / f for f, _ in rows]
    for p in paths:
        if not p.is_file():
            raise DatasetFileError(f"missing dataset file: {p}")
    test = FolderSplit(paths, np.asarray([index[w] for _, w in rows]), spec)
    return train, test


def _load_digits32(spec):
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.tensor(d.images / 16.0, dtype=torch.float32)[:, None]
    x = torch.nn.functional.interpolate(x, size=spec.resolution, mode="bilinear", align_corners=False)
    pixels = torch.round(x.clamp(0, 1) * 255).to(torch.uint8).expand(-1, 3, -1, -1).contiguous()
    labels = d.target.astype(np.int64)
    # fixed stratified split: every 5th sample of each class goes to test
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(spec.num_classes):
        idx = np.flatnonzero(labels == c)
        test_mask[idx[::5]] = True
    # top up/trim to the registered test size deterministically
    order = np.flatnonzero(~test_mask)
    need = spec.test_size - int(test_mask.sum())
    if need > 0:
        test_mask[order[-need:]] = True
    elif need < 0:
        test_mask[np.flatnonzero(test_mask)[need:]] = False
    tr, te = np.flatnonzero(~test_mask), np.flatnonzero(test_mask)
    return (ArraySplit(pixels[tr], labels[tr], spec), ArraySplit(pixels[te], labels[te], spec))


def load_dataset(name: str, root: str | os.PathLike | None = None, strict: bool = True):
    """Return ``(train, test, spec)`` for a registered dataset.

    ``root`` holds the standard release layout (e.g. ``root/cifar-10-batches-py``);
    it defaults to ``$DDBENCH_DATA_ROOT``.
    With ``strict`` the split sizes and class count must match the registry.
    """
    spec = get_spec(name)
    if name == "digits32":
        train, test = _load_digits32(spec)
    else:
        root = root if root is not None else os.environ.get(DATA_ROOT_ENV)
        if root is None:
            raise DatasetFileError(f"{name}: a data root is required (pass root or set {DATA_ROOT_ENV})")
        base = Path(root) / _LAYOUT[name]
        if not base.exists():
            raise DatasetFileError(f"missing dataset directory: {base}")
        if name == "cifar10":
            train, test = _load_cifar10(base, spec)
        elif name == "cifar100":
            train, test = _load_cifar100(base, spec)
        elif name == "tinyimagenet":
            train, test = _load_tinyimagenet(base, spec)
        else:
            train, test = _load_imagefolder(base, spec)
    if strict:
        for split, expected, label in ((train, spec.train_size, "train"), (test, spec.test_size, "test")):
            if len(split) != expected:
                raise DatasetFileError(f"{name}: {label} split has {len(split)} images, expected {expected}")
        n_cls = len(np.unique(train.labels))
        if n_cls != spec.num_classes:
            raise DatasetFileError(f"{name}: found {n_cls} classes, expected {spec.num_classes}")
    return train, test, spec


# --------------------------------------------------------------------------- distilled sets


@dataclass
class Provenance:
    method: str
    init: str = "none"
    teacher_ids: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    seed: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(**d)


@dataclass
class DistilledDataset:
    images: torch.Tensor  # [N,C,H,W] float32, normalized
    hard_labels: torch.Tensor  # [N] int64
    dataset: str
    ipc: int
    provenance: Provenance
    unbalanced: bool = False

    @property
    def spec(self) -> DatasetSpec:
        return get_spec(self.dataset)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __len__(self) -> int:
        return int(self.hard_labels.shape[0])

    def class_counts(self) -> list[int]:
        return torch.bincount(self.hard_labels, minlength=self.num_classes).tolist()

    def validate(self) -> None:
        spec = self.spec
        if self.images.ndim != 4 or tuple(self.images.shape[1:]) != (spec.channels, spec.resolution, spec.resolution):
            raise InvariantError(f"images shape {tuple(self.images.shape)} incompatible with {spec.name}")
        if self.hard_labels.ndim != 1 or self.hard_labels.shape[0] != self.images.shape[0]:
            raise InvariantError("one hard label per image required")
        if len(self) and (int(self.hard_labels.min()) < 0 or int(self.hard_labels.max()) >= spec.num_classes):
            raise InvariantError(f"label out of range [0, {spec.num_classes})")
        if self.provenance.wall_clock_seconds < 0:
            raise InvariantError("wall_clock_seconds must be >= 0")
        if not self.unbalanced:
            counts = self.class_counts()
            if any(c != self.ipc for c in counts):
                raise InvariantError(f"balanced set must hold exactly ipc={self.ipc} images per class, got {counts}")

    def subset_class(self, c: int) -> torch.Tensor:
        return self.images[self.hard_labels == c]


@dataclass
class Manifest:
    schema_version: int
    dataset: dict
    ipc: int
    unbalanced: bool
    class_counts: list[int]
    payload: dict
    records: list[dict]
    provenance: dict | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def export_distilled(ds: DistilledDataset, path: str | os.PathLike, fmt: str = "auto") -> Manifest:
    """Write ``ds`` under directory ``path``; ``fmt`` is ``png``, ``h5`` or ``auto``."""
    ds.validate()
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatahubError(f"cannot write to {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DatahubError(f"cannot write to {path}")
    spec = ds.spec
    images = ds.images.detach().cpu()
    if fmt == "auto":
        fmt = "png" if on_uint8_grid(images, spec) else "h5"
    labels = ds.hard_labels.tolist()
    records = []
    if fmt == "png":
        if not on_uint8_grid(images, spec):
            raise InvariantError("images are not on the 8-bit grid; PNG export would be lossy (use fmt='h5')")
        pix = quantize(images, spec).permute(0, 2, 3, 1).numpy()
        (path / "images").mkdir(exist_ok=True)
        for i, (arr, y) in enumerate(zip(pix, labels)):
            rel = f"images/{i:06d}_c{y}.png"
            im = Image.fromarray(arr[..., 0] if spec.channels == 1 else arr)
            im.save(path / rel, format="PNG")
            records.append({"index": i, "file": rel, "label": y, "sha256": sha256_bytes(arr.tobytes())})
        payload = {"format": "png", "shape": list(images.shape)}
    elif fmt == "h5":
        import h5py

        unit = to_unit(images, spec).to(torch.float32).numpy()
        with h5py.File(path / "images.h5", "w") as fh:
            chunk = (1,) + unit.shape[1:]
            fh.create_dataset("images", data=unit, chunks=chunk if len(unit) else None)
            fh.create_dataset("normalized", data=images.to(torch.float32).numpy(), chunks=chunk if len(unit) else None)
        for i, y in enumerate(labels):
            records.append({"index": i, "offset": i, "label": y})
        payload = {"format": "h5", "file": "images.h5", "shape": list(images.shape), "dtype": "float32"}
    else:
        raise ValueError(f"unknown payload format {fmt!r}")
    manifest = Manifest(SCHEMA_VERSION, spec.to_dict(), ds.ipc, ds.unbalanced, ds.class_counts(),
                        payload, records, ds.provenance.to_dict())
    write_json(path / MANIFEST_NAME, manifest.to_dict())
    return manifest


def _read_png(file: Path, spec: DatasetSpec) -> np.ndarray:
    if not file.is_file():
        raise MissingPayloadError(f"missing payload file: {file}")
    try:
        with Image.open(file) as im:
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError, SyntaxError) as exc:
        raise ShapeMismatchError(f"truncated or undecodable payload: {file} ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape != (spec.resolution, spec.resolution, spec.channels):
        raise ShapeMismatchError(f"{file}: shape {arr.shape}, expected "
                                 f"{(spec.resolution, spec.resolution, spec.channels)}")
    return arr


def _balance(labels: torch.Tensor, num_classes: int) -> tuple[int, bool]:
    counts = torch.bincount(labels, minlength=num_classes).tolist() if len(labels) else [0] * num_classes
    if len(set(counts)) == 1:
        return counts[0], False
    return max(counts), True


def import_distilled(path: str | os.PathLike, dataset: str | None = None) -> DistilledDataset:
    """Load a distilled set written by :func:`export_distilled`, or an external
    class-folder tree (``path/<class>/*.png``; requires ``dataset``).

    Manifests carrying provenance keep it; anything else is stamped ``imported``.
    """
    path = Path(path)
    mf = path / MANIFEST_NAME
    if not mf.is_file():
        if dataset is None:
            raise MissingPayloadError(f"no {MANIFEST_NAME} in {path}")
        return _import_folder_tree(path, dataset)
    try:
        raw = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{mf}: not valid JSON ({exc})") from exc
    required = {"schema_version", "dataset", "ipc", "payload", "records"}
    missing = required - raw.keys()
    if missing:
        raise SchemaError(f"{mf}: missing keys {sorted(missing)}")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"{mf}: schema_version {raw['schema_version']} != {SCHEMA_VERSION}")
    spec = DatasetSpec.from_dict(raw["dataset"])
    registered = get_spec(spec.name)
    if registered != spec:
        raise SchemaError(f"{mf}: dataset block differs from registry entry for {spec.name}")
    records = raw["records"]
    payload = raw["payload"]
    shape = tuple(payload.get("shape", ()))
    if len(shape) != 4 or shape[1:] != (spec.channels, spec.resolution, spec.resolution):
        raise ShapeMismatchError(f"{mf}: payload shape {shape} incompatible with {spec.name}")
    if shape[0] != len(records):
        raise SchemaError(f"{mf}: {len(records)} records for {shape[0]} images")
    labels = torch.tensor([int(r["label"]) for r in records], dtype=torch.long)
    if payload["format"] == "png":
        arrs = [_read_png(path / r["file"], spec) for r in records]
        pix = (torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous() if arrs
               else torch.zeros(shape, dtype=torch.uint8))
        images = normalize(pix, spec)
    elif payload["format"] == "h5":
        import h5py

        file = path / payload["file"]
        if not file.is_file():
            raise MissingPayloadError(f"missing payload file: {file}")
        try:
            with h5py.File(file, "r") as fh:
                arr = fh["normalized"][()]
        except (OSError, KeyError) as exc:
            raise ShapeMismatchError(f"truncated or undecodable payload: {file} ({exc})") from exc
        if tuple(arr.shape) != shape:
            raise ShapeMismatchError(f"{file}: payload shape {tuple(arr.shape)}, manifest says {shape}")
        images = torch.from_numpy(arr)[torch.as_tensor([int(r["offset"]) for r in records], dtype=torch.long)]
    else:
        raise SchemaError(f"{mf}: unknown payload format {payload['format']!r}")
    if raw.get("provenance"):
        prov = Provenance.from_dict(raw["provenance"])
    else:
        prov = Provenance(method="imported", init="imported", extra={"source": str(path)})
    ipc, unbalanced = _balance(labels, spec.num_classes)
    ds = DistilledDataset(images, labels, spec.name, int(raw["ipc"]) if not unbalanced else ipc, prov,
                          unbalanced=unbalanced or bool(raw.get("unbalanced", False)))
    if prov.method == "imported":
        prov.extra.setdefault("class_counts", ds.class_counts())
    ds.validate()
    return ds


def _import_folder_tree(path: Path, dataset: str) -> DistilledDataset:
    spec = get_spec(dataset)
    if not path.is_dir():
        raise MissingPayloadError(f"no such directory: {path}")
    dirs = sorted(p for p in path.iterdir() if p.is_dir())
    if all(d.name.isdigit() for d in dirs):
        dirs.sort(key=lambda d: int(d.name))
        index = {d: int(d.name) for d in dirs}
    else:
        index = {d: i for i, d in enumerate(dirs)}
    if not dirs or max(index.values()) >= spec.num_classes:
        raise SchemaError(f"{path}: expected up to {spec.num_classes} class directories")
    arrs, labels = [], []
    for d in dirs:
        for f in _list_images(d):
            arrs.append(_read_png(f, spec))
            labels.append(index[d])
    if not arrs:
        raise MissingPayloadError(f"{path}: no image files found")
    pix = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor(labels, dtype=torch.long)
    ipc, unbalanced = _balance(y, spec.num_classes)
    prov = Provenance(method="imported", init="imported", extra={"source": str(path)})
    ds = DistilledDataset(normalize(pix, spec), y, dataset, ipc, prov, unbalanced=unbalanced)
    prov.extra["class_counts"] = ds.class_counts()
    ds.validate()
    return ds
