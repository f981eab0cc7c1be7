"""Experiment grids, result aggregation and report emission.

Store layout (all records are JSON, committed atomically)::

    store/teachers/<teacher key>/        model.pt + teacher.json
    store/distilled/<synth key>/         exported distilled set
    store/runs/<run fingerprint>.json    one record per (cell, seed)
    store/failures/<run fingerprint>.json
    store/logs/<run fingerprint>.log     per-epoch trajectory
    store/features/<run fingerprint>.npz optional embedding dumps
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import os
import random
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
import yaml

from .archs import ModelSpec
from .datahub import export_distilled, import_distilled, load_dataset
from .posteval import LABEL_MODES, PostEvalConfig, train_student
from .synth import RecoverConfig, SelectConfig, random_sample, recover_optimize, select_patches
from .teachers import TeacherPool, TeacherRecipe, load_teacher, save_teacher, train_teacher
from .utils import atomic_write_text, fingerprint, write_json

log = logging.getLogger(__name__)

SYNTH_METHODS = ("random", "select", "recover", "imported")


class GridError(ValueError):
    pass


class EmptyResultsError(ValueError):
    pass


class CoordinateMismatchError(ValueError):
    pass


class MissingTimingError(ValueError):
    pass


class ComparabilityError(RuntimeError):
    pass


class ReportError(OSError):
    pass


# --------------------------------------------------------------------------- grid spec


@dataclass(frozen=True)
class MethodSpec:
    id: str
    method: str
    params: dict = field(default_factory=dict, hash=False, compare=False)

    @classmethod
    def parse(cls, entry) -> "MethodSpec":
        if isinstance(entry, str):
            entry = {"id": entry, "method": entry}
        if not isinstance(entry, dict):
            raise GridError(f"method entry must be a string or mapping, got {entry!r}")
        unknown = set(entry) - {"id", "method", "params"}
        if unknown:
            raise GridError(f"unknown method key(s): {sorted(unknown)}")
        method = entry.get("method", entry.get("id"))
        if method not in SYNTH_METHODS:
            raise GridError(f"unknown synthesis method {method!r}")
        return cls(str(entry.get("id", method)), method, dict(entry.get("params") or {}))


@dataclass(frozen=True)
class Cell:
    dataset: str
    method: str  # method id
    ipc: int
    eval_arch: str
    label_mode: str
    loss: str
    zeta: float
    batch_size: int

    def coords(self) -> dict:
        return dataclasses.asdict(self)


_GRID_KEYS = {"name", "datasets", "methods", "ipcs", "eval_archs", "label_modes", "loss_modes", "zetas",
              "batch_sizes", "seeds", "teachers", "posteval", "synth_seed", "data_root", "limits",
              "dump_features", "strict_data"}


@dataclass
class GridSpec:
    """Axes of an experiment grid. A cell is one point of the cartesian product;
    each cell is run once per seed. ``label_mode: hard`` always trains with
    ``hard_ce``, so the loss axis collapses for hard-label cells."""

    datasets: list[str]
    methods: list[MethodSpec]
    ipcs: list[int]
    eval_archs: list[str]
    label_modes: list[str] = field(default_factory=lambda: ["soft"])
    loss_modes: list[str] = field(default_factory=lambda: ["kl"])
    zetas: list[float] = field(default_factory=lambda: [1.0])
    batch_sizes: list[int] = field(default_factory=lambda: [50])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teachers: list[dict] = field(default_factory=lambda: [{"arch": "convnet-small"}])
    posteval: dict = field(default_factory=dict)  # base PostEvalConfig values
    synth_seed: int = 0
    data_root: str | None = None
    limits: dict = field(default_factory=dict)  # workers, max_runs, threads
    dump_features: bool = False
    strict_data: bool = True
    name: str = "grid"

    def __post_init__(self):
        self.methods = [m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in self.methods]
        for axis in ("datasets", "methods", "ipcs", "eval_archs", "label_modes", "loss_modes", "zetas",
                     "batch_sizes", "seeds", "teachers"):
            if not isinstance(getattr(self, axis), list) or not getattr(self, axis):
                raise GridError(f"grid axis {axis!r} must be a non-empty list")
        ids = [m.id for m in self.methods]
        if len(set(ids)) != len(ids):
            raise GridError(f"duplicate method ids: {ids}")
        for lm in self.label_modes:
            if lm not in LABEL_MODES:
                raise GridError(f"unknown label mode {lm!r}")
        for t in self.teachers:
            if "arch" not in t and "checkpoint" not in t:
                raise GridError("each teacher needs 'arch' or 'checkpoint'")
            unknown = set(t) - {"arch", "recipe", "checkpoint"}
            if unknown:
                raise GridError(f"unknown teacher key(s): {sorted(unknown)}")
        unknown = set(self.limits) - {"workers", "max_runs", "threads"}
        if unknown:
            raise GridError(f"unknown limits key(s): {sorted(unknown)}")
        # Fail early on invalid protocol values.
        for cell in self.cells():
            self.post_config(cell)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        unknown = set(d) - _GRID_KEYS
        if unknown:
            raise GridError(f"unknown grid key(s): {sorted(unknown)}")
        missing = {"datasets", "methods", "ipcs", "eval_archs"} - set(d)
        if missing:
            raise GridError(f"grid is missing required key(s): {sorted(missing)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "GridSpec":
        p = Path(path)
        if not p.is_file() and p.with_suffix(".yaml").is_file():
            p = p.with_suffix(".yaml")
        if not p.is_file():
            raise FileNotFoundError(f"grid file not found: {path}")
        data = yaml.safe_load(p.read_text()) or {}
        data.setdefault("name", p.stem)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = [{"id": m.id, "method": m.method, "params": m.params} for m in self.methods]
        return d

    def method(self, method_id: str) -> MethodSpec:
        return next(m for m in self.methods if m.id == method_id)

    def cells(self) -> list[Cell]:
        out, seen = [], set()
        for ds, m, ipc, arch, lm, loss, z, bs in itertools.product(
                self.datasets, self.methods, self.ipcs, self.eval_archs, self.label_modes, self.loss_modes,
                self.zetas, self.batch_sizes):
            if lm == "hard":
                loss = "hard_ce"
            cell = Cell(ds, m.id, int(ipc), arch, lm, loss, float(z), int(bs))
            if cell not in seen:
                seen.add(cell)
                out.append(cell)
        return out

    def post_config(self, cell: Cell) -> PostEvalConfig:
        base = {**self.posteval, "loss": cell.loss, "label_mode": cell.label_mode, "zeta": cell.zeta,
                "batch_size": cell.batch_size, "seeds": list(self.seeds)}
        try:
            return PostEvalConfig.from_dict(base)
        except (TypeError, ValueError) as exc:
            raise GridError(f"invalid post-eval config for cell {cell.coords()}: {exc}") from exc


# --------------------------------------------------------------------------- identities


def teacher_key(dataset: str, entry: dict) -> str:
    if "checkpoint" in entry:
        return fingerprint({"checkpoint": str(Path(entry["checkpoint"]).resolve())})
    recipe = TeacherRecipe(**entry.get("recipe", {}))
    return fingerprint({"dataset": dataset, "arch": entry["arch"], "recipe": dataclasses.asdict(recipe)})


def synth_key(spec: GridSpec, dataset: str, method: MethodSpec, ipc: int) -> str:
    ident: dict[str, Any] = {"dataset": dataset, "method": method.method, "params": method.params, "ipc": ipc,
                             "seed": spec.synth_seed}
    if method.method in ("select", "recover"):
        ident["teacher"] = teacher_key(dataset, spec.teachers[0])
    return fingerprint(ident)


def pool_keys(spec: GridSpec, cell: Cell) -> list[str]:
    if cell.label_mode == "hard":
        return []
    members = spec.teachers if cell.label_mode == "hybrid" else spec.teachers[:1]
    return [teacher_key(cell.dataset, t) for t in members]


def cell_identity(spec: GridSpec, cell: Cell) -> dict:
    m = spec.method(cell.method)
    return {"synthesis": synth_key(spec, cell.dataset, m, cell.ipc), "pool": pool_keys(spec, cell),
            "protocol": spec.post_config(cell).protocol(), "eval_arch": cell.eval_arch}


def cell_id(spec: GridSpec, cell: Cell) -> str:
    return fingerprint(cell_identity(spec, cell))


def run_fingerprint(spec: GridSpec, cell: Cell, seed: int) -> str:
    """Identity of one run: (synthesis provenance, post-eval protocol, eval arch, seed)."""
    return fingerprint({**cell_identity(spec, cell), "seed": int(seed)})


# --------------------------------------------------------------------------- results


# Protocol fields that are also table coordinates: cells differing only in these
# are distinguishable by their row labels, so they may share a table.
_COORD_PROTOCOL = {"loss", "label_mode", "zeta", "batch_size"}


def table_fingerprint(cfg: PostEvalConfig) -> str:
    """Fingerprint of the protocol fields a table does not show as columns."""
    return fingerprint({k: v for k, v in cfg.protocol().items() if k not in _COORD_PROTOCOL})


def mean_std(values: Iterable[float]) -> tuple[float, float | None]:
    """Mean and sample standard deviation; std is ``None`` for fewer than two values."""
    vals = [float(v) for v in values]
    if not vals:
        raise EmptyResultsError("no values")
    mean = math.fsum(vals) / len(vals)
    return mean, (statistics.stdev(vals) if len(vals) >= 2 else None)


@dataclass
class CellResult:
    coords: dict
    cell_id: str
    accuracies: dict[int, float]  # seed -> final test accuracy
    mean: float | None
    std: float | None
    synthesis_seconds: float | None = None
    training_seconds: float = 0.0
    protocol_fingerprint: str = ""
    table_fingerprint: str = ""  # empty: fall back to protocol_fingerprint
    synth_key: str = ""
    status: str = "ok"  # ok | partial | failed | pending
    errors: dict[int, str] = field(default_factory=dict)
    trajectories: dict[int, dict] = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, coords: dict, accuracies, cell_id: str = "", **kw) -> "CellResult":
        if isinstance(accuracies, dict):
            accs = {int(k): float(v) for k, v in accuracies.items()}
        else:
            accs = {i: float(v) for i, v in enumerate(accuracies)}
        mean, std = mean_std(accs.values()) if accs else (None, None)
        return cls(dict(coords), cell_id or fingerprint(coords), accs, mean, std, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _read_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def collect(spec: GridSpec, store) -> list[CellResult]:
    """Snapshot of the store for every cell of ``spec``."""
    store = Path(store)
    out = []
    for cell in spec.cells():
        cid = cell_id(spec, cell)
        cfg = spec.post_config(cell)
        accs, errors, traj = {}, {}, {}
        synth_s, train_s = None, 0.0
        for seed in spec.seeds:
            rfp = run_fingerprint(spec, cell, seed)
            rec = _read_json(store / "runs" / f"{rfp}.json")
            if rec is not None:
                res = rec["result"]
                accs[seed] = res["final_accuracy"]
                train_s += res["wall_clock_seconds"]
                synth_s = rec.get("synthesis_seconds")
                traj[seed] = {"train": res["train_accuracy"], "test": res["test_accuracy"]}
                continue
            fail = _read_json(store / "failures" / f"{rfp}.json")
            if fail is not None:
                errors[seed] = f"{fail['error']}: {fail['message']}"
        if accs:
            mean, std = mean_std(accs.values())
            status = "ok" if len(accs) == len(spec.seeds) else ("partial" if errors else "pending")
        else:
            mean = std = None
            status = "failed" if errors else "pending"
        out.append(CellResult(cell.coords(), cid, accs, mean, std, synth_s, train_s, cfg.fingerprint(),
                              table_fingerprint(cfg), synth_key(spec, cell.dataset, spec.method(cell.method), cell.ipc),
                              status, errors, traj))
    return out


# --------------------------------------------------------------------------- execution

_WORKER_CACHE: dict[tuple, Any] = {}


def _cached(key: tuple, make):
    if key not in _WORKER_CACHE:
        _WORKER_CACHE[key] = make()
    return _WORKER_CACHE[key]


def _dataset(name: str, root, strict: bool):
    return _cached(("dataset", name, root, strict), lambda: load_dataset(name, root, strict=strict))


def _teacher(directory: str):
    return _cached(("teacher", directory), lambda: load_teacher(directory))


def _distilled(directory: str):
    return _cached(("distilled", directory), lambda: import_distilled(directory))


def extract_features(model: torch.nn.Module, split, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Penultimate-layer embeddings (input of the final linear layer) and labels."""
    linear = [m for m in model.modules() if isinstance(m, torch.nn.Linear)]
    if not linear:
        raise ValueError("model has no linear head to hook")
    feats: list[torch.Tensor] = []
    handle = linear[-1].register_forward_hook(lambda mod, inp, out: feats.append(inp[0].detach().flatten(1)))
    was_training = model.training
    model.eval()
    labels = []
    try:
        with torch.no_grad():
            for x, y in split.batches(batch_size):
                model(x)
                labels.append(y)
    finally:
        handle.remove()
        model.train(was_training)
    return torch.cat(feats).numpy(), torch.cat(labels).numpy()


def _execute(task: dict) -> tuple[str, str]:
    """Run one (cell, seed). Writes a run record or a failure record; never raises."""
    store = Path(task["store"])
    rfp = task["run_fp"]
    try:
        if task.get("threads"):
            torch.set_num_threads(int(task["threads"]))
        if task.get("prep_error"):
            raise RuntimeError(task["prep_error"])
        _, test, spec = _dataset(task["dataset"], task["data_root"], task["strict_data"])
        distilled = _distilled(task["distilled_dir"])
        pool = TeacherPool([_teacher(d) for d in task["teacher_dirs"]]) if task["teacher_dirs"] else None
        cfg = PostEvalConfig.from_dict(task["posteval"])
        arch = ModelSpec(task["eval_arch"], spec.resolution, spec.num_classes)
        (store / "logs").mkdir(parents=True, exist_ok=True)
        log_path = store / "logs" / f"{rfp}.log"
        if log_path.exists():
            log_path.unlink()
        result = train_student(distilled, pool, arch, cfg, test, task["seed"], log_path=log_path,
                               keep_model=task["dump_features"])
        if task["dump_features"]:
            feats, labels = extract_features(result.model, test)
            (store / "features").mkdir(parents=True, exist_ok=True)
            np.savez(store / "features" / f"{rfp}.npz", features=feats, labels=labels)
        record = {
            "run_fingerprint": rfp, "cell_id": task["cell_id"], "coords": task["coords"], "seed": task["seed"],
            "synth_key": task["synth_key"], "pool": task["pool_keys"], "protocol_fingerprint": cfg.fingerprint(),
            "synthesis_seconds": distilled.provenance.wall_clock_seconds, "status": "ok",
            "result": result.to_dict(),
        }
        write_json(store / "runs" / f"{rfp}.json", record)
        stale = store / "failures" / f"{rfp}.json"
        if stale.exists():
            stale.unlink()
        return rfp, "ok"
    except Exception as exc:  # per-run isolation
        write_json(store / "failures" / f"{rfp}.json", {
            "run_fingerprint": rfp, "coords": task["coords"], "seed": task["seed"], "error": type(exc).__name__,
            "message": str(exc), "traceback": traceback.format_exc(),
        })
        log.warning("run %s failed: %s: %s", rfp, type(exc).__name__, exc)
        return rfp, "failed"


def _prepare_teacher(store: Path, dataset: str, entry: dict, data) -> str:
    if "checkpoint" in entry:
        return str(Path(entry["checkpoint"]))
    d = store / "teachers" / teacher_key(dataset, entry)
    if not (d / "teacher.json").is_file():
        train, test, spec = data
        recipe = TeacherRecipe(**entry.get("recipe", {}))
        handle = train_teacher(ModelSpec(entry["arch"], spec.resolution, spec.num_classes), train, recipe, test,
                               dataset)
        save_teacher(handle, d, recipe)
    return str(d)


def _prepare_distilled(store: Path, spec: GridSpec, dataset: str, method: MethodSpec, ipc: int, data,
                       teacher_dir) -> str:
    d = store / "distilled" / synth_key(spec, dataset, method, ipc)
    if (d / "manifest.json").is_file():
        return str(d)
    train, _, dspec = data
    params = dict(method.params)
    if method.method == "random":
        ds = random_sample(train, ipc, seed=spec.synth_seed)
    elif method.method == "select":
        ds = select_patches(_teacher(teacher_dir), train, SelectConfig(**{"seed": spec.synth_seed, **params}), ipc)
    elif method.method == "recover":
        labels = torch.arange(dspec.num_classes).repeat_interleave(ipc)
        cfg = RecoverConfig(**{"seed": spec.synth_seed, **params})
        ds = recover_optimize(_teacher(teacher_dir), cfg, labels, train=train)
    else:
        if "path" not in params:
            raise GridError(f"imported method {method.id!r} needs params.path")
        ds = import_distilled(params["path"], dataset)
    if ds.ipc != ipc or ds.dataset != dataset:
        raise GridError(f"{method.id}: produced ipc={ds.ipc} on {ds.dataset}, expected ipc={ipc} on {dataset}")
    export_distilled(ds, d)
    return str(d)


def plan(spec: GridSpec, store) -> list[dict]:
    """Pending (cell, seed) runs; completed fingerprints are skipped."""
    store = Path(store)
    tasks = []
    for cell in spec.cells():
        cfg = spec.post_config(cell)
        for seed in spec.seeds:
            rfp = run_fingerprint(spec, cell, seed)
            if (store / "runs" / f"{rfp}.json").is_file():
                continue
            tasks.append({"cell": cell, "seed": int(seed), "run_fp": rfp, "cell_id": cell_id(spec, cell),
                          "posteval": cfg.to_dict()})
    return tasks


def run_grid(spec: GridSpec, store, workers: int | None = None, order_seed: int | None = None,
             max_runs: int | None = None) -> list[CellResult]:
    """Execute every pending run of ``spec``; returns the store snapshot afterwards.

    Teachers and distilled sets are prepared once and cached in the store. A
    failure in preparation or training marks only the affected runs failed.
    """
    store = Path(store)
    for sub in ("runs", "failures", "teachers", "distilled"):
        (store / sub).mkdir(parents=True, exist_ok=True)
    write_json(store / "grids" / f"{spec.name}.json", spec.to_dict())
    tasks = plan(spec, store)
    max_runs = max_runs if max_runs is not None else spec.limits.get("max_runs")
    if max_runs is not None:
        tasks = tasks[:int(max_runs)]
    if order_seed is not None:
        random.Random(order_seed).shuffle(tasks)
    if not tasks:
        return collect(spec, store)

    data_cache, teacher_dirs, distilled_dirs, prep_errors = {}, {}, {}, {}

    def data(ds):
        if ds not in data_cache:
            data_cache[ds] = _dataset(ds, spec.data_root, spec.strict_data)
        return data_cache[ds]

    def teacher_dir(ds, i):
        k = (ds, i)
        if k not in teacher_dirs:
            teacher_dirs[k] = _prepare_teacher(store, ds, spec.teachers[i], data(ds))
        return teacher_dirs[k]

    payloads = []
    for t in tasks:
        cell: Cell = t["cell"]
        method = spec.method(cell.method)
        payload = {
            "store": str(store), "run_fp": t["run_fp"], "cell_id": t["cell_id"], "coords": cell.coords(),
            "seed": t["seed"], "dataset": cell.dataset, "data_root": spec.data_root, "strict_data": spec.strict_data,
            "posteval": t["posteval"], "eval_arch": cell.eval_arch,
            "synth_key": synth_key(spec, cell.dataset, method, cell.ipc), "pool_keys": pool_keys(spec, cell),
            "dump_features": spec.dump_features, "threads": spec.limits.get("threads"),
            "distilled_dir": None, "teacher_dirs": [], "prep_error": None,
        }
        dkey = (cell.dataset, method.id, cell.ipc)
        try:
            if dkey in prep_errors:
                raise prep_errors[dkey]
            if dkey not in distilled_dirs:
                tdir = teacher_dir(cell.dataset, 0) if method.method in ("select", "recover") else None
                distilled_dirs[dkey] = _prepare_distilled(store, spec, cell.dataset, method, cell.ipc,
                                                          data(cell.dataset), tdir)
            payload["distilled_dir"] = distilled_dirs[dkey]
            n_members = 0 if cell.label_mode == "hard" else (len(spec.teachers) if cell.label_mode == "hybrid" else 1)
            payload["teacher_dirs"] = [teacher_dir(cell.dataset, i) for i in range(n_members)]
        except Exception as exc:
            if payload["distilled_dir"] is None:
                prep_errors.setdefault(dkey, exc)
            payload["prep_error"] = f"{type(exc).__name__}: {exc}"
        payloads.append(payload)

    workers = workers if workers is not None else int(spec.limits.get("workers", 1))
    if workers <= 1:
        for p in payloads:
            _execute(p)
    else:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as ex:
            futures = [ex.submit(_execute, p) for p in payloads]
            try:
                for f in as_completed(futures):
                    f.result()
            except KeyboardInterrupt:
                ex.shutdown(wait=False, cancel_futures=True)
                raise
    return collect(spec, store)


# --------------------------------------------------------------------------- aggregation

_GROUP_EXCLUDE = {"method"}


def _group_key(coords: dict) -> tuple:
    return tuple((k, str(v)) for k, v in sorted(coords.items()) if k not in _GROUP_EXCLUDE)


def aggregate(results: Iterable[CellResult]) -> list[dict]:
    """One row per cell: mean, sample std, seed count and best/second flags.

    Flags are assigned within a row group (all coordinates except the method):
    every cell at the highest mean is ``best``, every cell at the next distinct
    mean is ``second``. Rows are ordered by group, then method id.
    """
    results = list(results)
    if not results:
        raise EmptyResultsError("aggregate needs at least one result")
    rows = []
    for r in results:
        vals = [r.accuracies[k] for k in sorted(r.accuracies)]
        mean, std = mean_std(vals) if vals else (None, None)
        rows.append({**r.coords, "mean": mean, "std": std, "n": len(vals), "best": False, "second": False,
                     "cell_id": r.cell_id, "protocol": r.table_fingerprint or r.protocol_fingerprint, "status": r.status})
    rows.sort(key=lambda row: (_group_key({k: row[k] for k in results[0].coords if k in row}),
                               str(row.get("method", "")), row["cell_id"]))
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(_group_key({k: row[k] for k in results[0].coords if k in row}), []).append(row)
    for members in groups.values():
        levels = sorted({row["mean"] for row in members if row["mean"] is not None}, reverse=True)
        for row in members:
            if row["mean"] is None:
                continue
            row["best"] = row["mean"] == levels[0]
            row["second"] = len(levels) > 1 and row["mean"] == levels[1]
    return rows


# --------------------------------------------------------------------------- rectification


@dataclass(frozen=True)
class ReportedNumber:
    method: str
    dataset: str
    ipc: int
    accuracy: float
    eval_arch: str | None = None
    source: str = ""


@dataclass(frozen=True)
class Delta:
    reported: Decimal
    reevaluated: Decimal
    value: Decimal

    @property
    def arrow(self) -> str:
        return "↑" if self.value > 0 else ("↓" if self.value < 0 else "")

    def render(self, places: int = 1) -> str:
        q = Decimal(1).scaleb(-places)
        mag = abs(self.value).quantize(q)
        return f"({mag} {self.arrow})" if self.arrow else f"({mag})"


def _dec(x) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


def rectification_delta(reported: ReportedNumber, reevaluated: CellResult | dict) -> Delta:
    """Signed ``reevaluated.mean - reported`` in exact decimal arithmetic."""
    coords = reevaluated.coords if isinstance(reevaluated, CellResult) else reevaluated
    mean = reevaluated.mean if isinstance(reevaluated, CellResult) else reevaluated["mean"]
    checks = {"method": reported.method, "dataset": reported.dataset, "ipc": reported.ipc}
    if reported.eval_arch is not None:
        checks["eval_arch"] = reported.eval_arch
    for k, v in checks.items():
        if k not in coords or str(coords[k]) != str(v):
            raise CoordinateMismatchError(f"{k}: reported {v!r} vs re-evaluated {coords.get(k)!r}")
    if mean is None:
        raise EmptyResultsError("re-evaluated cell has no completed runs")
    rep, ree = _dec(reported.accuracy), _dec(mean)
    return Delta(rep, ree, ree - rep)


def load_reported(path) -> list[ReportedNumber]:
    """Externally reported accuracies from a YAML/JSON file (a list, or ``{reported: [...]}``)."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"reported-numbers file not found: {p}")
    data = yaml.safe_load(p.read_text())
    if isinstance(data, dict):
        data = data.get("reported", [])
    out = []
    for entry in data or []:
        # keep the printed decimal exactly (YAML floats would round-trip through binary)
        entry = dict(entry)
        entry["accuracy"] = Decimal(str(entry["accuracy"]))
        entry["ipc"] = int(entry["ipc"])
        out.append(ReportedNumber(**entry))
    return out


def match_reported(reported: Iterable[ReportedNumber], rows: list[dict]) -> list[tuple[ReportedNumber, dict, Delta]]:
    out = []
    for rep in reported:
        for row in rows:
            try:
                out.append((rep, row, rectification_delta(rep, row)))
            except (CoordinateMismatchError, EmptyResultsError):
                continue
    return out


# --------------------------------------------------------------------------- efficiency


def pareto_dominated(points: list[tuple[float, float]]) -> list[bool]:
    """``dominated[i]`` iff some point has strictly lower time and strictly higher accuracy."""
    order = sorted(range(len(points)), key=lambda i: points[i][0])
    flags = [False] * len(points)
    best_acc = -math.inf  # best accuracy among strictly faster points
    k = 0
    while k < len(order):
        j = k
        t = points[order[k]][0]
        while j < len(order) and points[order[j]][0] == t:
            j += 1
        for i in order[k:j]:
            flags[i] = points[i][1] < best_acc
        best_acc = max(best_acc, max(points[i][1] for i in order[k:j]))
        k = j
    return flags


@dataclass(frozen=True)
class EfficiencyPoint:
    method: str
    seconds: float
    accuracy: float
    dominated: bool


def efficiency_report(results: Iterable[CellResult]) -> list[EfficiencyPoint]:
    """Per method: total synthesis seconds (distinct distilled sets) vs mean cell accuracy."""
    by_method: dict[str, dict] = {}
    for r in results:
        if r.mean is None:
            continue
        if r.synthesis_seconds is None:
            raise MissingTimingError(f"cell {r.cell_id} has no synthesis wall-clock")
        m = by_method.setdefault(r.coords["method"], {"times": {}, "accs": []})
        m["times"][r.synth_key or r.cell_id] = r.synthesis_seconds
        m["accs"].append(r.mean)
    if not by_method:
        raise EmptyResultsError("no completed cells")
    names = sorted(by_method)
    pts = [(math.fsum(by_method[n]["times"].values()), math.fsum(by_method[n]["accs"]) / len(by_method[n]["accs"]))
           for n in names]
    flags = pareto_dominated(pts)
    return [EfficiencyPoint(n, t, a, f) for n, (t, a), f in zip(names, pts, flags)]


# --------------------------------------------------------------------------- emission

_COLUMNS = ["dataset", "method", "ipc", "eval_arch", "label_mode", "loss", "zeta", "batch_size", "n"]


def _fmt(x: float | None, precision: int) -> str:
    return "" if x is None else f"{x:.{precision}f}"


def _md_cell(row: dict, precision: int) -> str:
    if row["mean"] is None:
        return "failed" if row["status"] == "failed" else "n/a"
    text = _fmt(row["mean"], precision)
    if row["std"] is not None:
        text += f" ± {_fmt(row['std'], precision)}"
    if row["best"]:
        return f"**{text}**"
    if row["second"]:
        return f"<u>{text}</u>"
    return text


def _write(path: Path, text: str, out: list[Path]) -> None:
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise ReportError(f"cannot write report file {path}: {exc}") from exc
    out.append(path)


def _table_files(rows: list[dict], stem: str, out_dir: Path, formats, precision: int, show_protocol: bool,
                 written: list[Path]) -> None:
    cols = _COLUMNS + (["protocol"] if show_protocol else [])
    if "csv" in formats:
        import csv
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + ["mean", "std", "best", "second"])
        for r in rows:
            w.writerow([r.get(c, "") for c in cols] + [_fmt(r["mean"], precision), _fmt(r["std"], precision),
                                                       int(r["best"]), int(r["second"])])
        _write(out_dir / f"{stem}.csv", buf.getvalue(), written)
    if "markdown" in formats:
        lines = ["| " + " | ".join(cols + ["accuracy"]) + " |", "|" + "---|" * (len(cols) + 1)]
        for r in rows:
            lines.append("| " + " | ".join(str(r.get(c, "")) for c in cols) + f" | {_md_cell(r, precision)} |")
        _write(out_dir / f"{stem}.md", "\n".join(lines) + "\n", written)
    if "json" in formats:
        _write(out_dir / f"{stem}.json", json.dumps(rows, indent=2, sort_keys=True) + "\n", written)


def _cross_arch(rows: list[dict], precision: int) -> str:
    """Method x eval-arch matrix per (dataset, ipc, label mode, loss)."""
    blocks = []
    keyf = lambda r: (r["dataset"], r["ipc"], r["label_mode"], r["loss"])  # noqa: E731
    for key in sorted({keyf(r) for r in rows}, key=str):
        sub = [r for r in rows if keyf(r) == key]
        archs = sorted({r["eval_arch"] for r in sub})
        methods = sorted({r["method"] for r in sub})
        lines = [f"### {key[0]} ipc={key[1]} labels={key[2]} loss={key[3]}", "",
                 "| method | " + " | ".join(archs) + " |", "|" + "---|" * (len(archs) + 1)]
        for m in methods:
            cells = []
            for a in archs:
                match = [r for r in sub if r["method"] == m and r["eval_arch"] == a]
                cells.append(" / ".join(_md_cell({**r, "best": False, "second": False}, precision) for r in match))
            lines.append(f"| {m} | " + " | ".join(cells) + " |")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def emit_report(results: Iterable[CellResult], out_dir, formats=("csv", "markdown", "json"), force: bool = False,
                by_protocol: bool = False, reported: Iterable[ReportedNumber] | None = None,
                precision: int = 2) -> list[Path]:
    """Write accuracy tables, cross-architecture matrices, training curves,
    efficiency points and (optionally) rectification deltas.

    Cells evaluated under different post-eval protocols are not comparable; a
    single table mixing protocol fingerprints is refused unless ``force`` (the
    forced table then carries a protocol column). ``by_protocol`` writes one
    table per fingerprint instead. Protocol fields shown as columns (loss,
    label mode, zeta, batch size) are excluded from this check.
    """
    formats = tuple(formats)
    bad = set(formats) - {"csv", "markdown", "json"}
    if bad:
        raise ValueError(f"unknown report format(s): {sorted(bad)}")
    results = list(results)
    rows = aggregate(results)
    protocols = sorted({r["protocol"] for r in rows})
    if len(protocols) > 1 and not (force or by_protocol):
        raise ComparabilityError(f"refusing to tabulate {len(protocols)} different post-eval protocols "
                                 f"({', '.join(protocols)}) side by side; use force or by_protocol")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise ReportError(f"report directory not writable: {out_dir}")
    written: list[Path] = []
    if by_protocol:
        for fp in protocols:
            _table_files([r for r in rows if r["protocol"] == fp], f"accuracy_{fp}", out_dir, formats, precision,
                         False, written)
    else:
        _table_files(rows, "accuracy", out_dir, formats, precision, len(protocols) > 1, written)

    if "markdown" in formats and len({r["eval_arch"] for r in rows}) > 1:
        _write(out_dir / "cross_arch.md", _cross_arch(rows, precision), written)

    traj_dir = out_dir / "trajectories"
    for r in results:
        if not r.trajectories:
            continue
        traj_dir.mkdir(exist_ok=True)
        lines = ["epoch\tseed\ttrain_acc\ttest_acc"]
        for seed in sorted(r.trajectories, key=int):
            t = r.trajectories[seed]
            lines += [f"{e}\t{seed}\t{a:.4f}\t{b:.4f}" for e, (a, b) in enumerate(zip(t["train"], t["test"]))]
        _write(traj_dir / f"{r.cell_id}.tsv", "\n".join(lines) + "\n", written)

    try:
        points = efficiency_report(results)
    except (MissingTimingError, EmptyResultsError):
        points = []
    if points:
        lines = ["method\tsynthesis_seconds\tmean_accuracy\tdominated"]
        lines += [f"{p.method}\t{p.seconds:.6f}\t{p.accuracy:.4f}\t{int(p.dominated)}" for p in points]
        _write(out_dir / "efficiency.tsv", "\n".join(lines) + "\n", written)

    if reported is not None:
        matches = match_reported(reported, rows)
        lines = ["| method | dataset | ipc | eval_arch | reported | re-evaluated | delta |", "|---|---|---|---|---|---|---|"]
        csv_lines = ["method,dataset,ipc,eval_arch,reported,reevaluated,delta"]
        for rep, row, d in matches:
            ree = _fmt(row["mean"], precision)
            lines.append(f"| {rep.method} | {rep.dataset} | {rep.ipc} | {row['eval_arch']} | {rep.accuracy} | "
                         f"{ree} | {d.render()} |")
            csv_lines.append(f"{rep.method},{rep.dataset},{rep.ipc},{row['eval_arch']},{rep.accuracy},{ree},{d.value}")
        if "markdown" in formats:
            _write(out_dir / "rectification.md", "\n".join(lines) + "\n", written)
        if "csv" in formats:
            _write(out_dir / "rectification.csv", "\n".join(csv_lines) + "\n", written)
    return written
