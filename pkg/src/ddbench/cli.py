"""Command-line entry point: ``ddbench <subcommand> [--config a.yaml ...] [--set key=value ...]``.

Configuration is layered: built-in defaults, then each ``--config`` file in
order, then ``--set`` overrides, then explicit flags. The resolved config is
validated before any work starts and written next to the outputs as
``resolved_config.yaml``.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__

ROOT_ENV = "DDBENCH_HOME"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ddbench")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


class MissingInput(FileNotFoundError):
    pass


class _Free(dict):
    """Schema marker: mapping whose contents are validated by the consumer."""


# --------------------------------------------------------------------------- schemas


def _schemas() -> dict[str, dict]:
    from .posteval import PostEvalConfig
    from .teachers import TeacherRecipe

    recipe = dataclasses.asdict(TeacherRecipe())
    post = PostEvalConfig().to_dict()
    return {
        "squeeze": {"dataset": "digits32", "arch": "convnet-small", "recipe": recipe, "data_root": None,
                    "out": None, "threads": None},
        "synth": {"dataset": "digits32", "method": "random", "ipc": 10, "teacher": None, "params": _Free(),
                  "seed": 0, "data_root": None, "out": None, "format": "auto"},
        "relabel-cache": {"distilled": None, "teachers": [], "posteval": post, "seed": 0, "out": None},
        "eval": {"distilled": None, "teachers": [], "arch": "convnet-small", "posteval": post,
                 "data_root": None, "label_cache": None, "out": None},
        "bench": {"grid": None, "store": None, "workers": None, "max_runs": None, "order_seed": None},
        "report": {"grid": None, "store": None, "formats": ["csv", "markdown", "json"], "force": False,
                   "by_protocol": False, "reported": None, "out": None, "precision": 2},
        "datahub-import": {"path": None, "dataset": None, "out": None, "format": "auto"},
        "datahub-export": {"distilled": None, "out": None, "format": "auto"},
    }


def _check_type(value, default, key: str) -> None:
    if default is None or value is None:
        return
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        list: lambda v: isinstance(v, (list, tuple)),
        tuple: lambda v: isinstance(v, (list, tuple)),
    }.get(type(default), lambda v: True)
    if not ok(value):
        raise ConfigError(f"config key '{key}' expects {type(default).__name__}, got {type(value).__name__}", key)


def validate(cfg: dict, schema: dict, prefix: str = "") -> None:
    """Reject unknown keys and wrong types; names the offending dotted key."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be a mapping", prefix or None)
    for key, value in cfg.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key '{dotted}'", dotted)
        default = schema[key]
        if isinstance(default, _Free):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' must be a mapping", dotted)
        elif isinstance(default, dict):
            validate(value, default, dotted + ".")
        else:
            _check_type(value, default, dotted)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set '{dotted}': '{p}' is not a section", dotted)
    node[parts[-1]] = value


def resolve_config(command: str, files=(), sets=(), flags: dict | None = None) -> dict:
    """Defaults < config files (in order) < ``--set`` < explicit flags."""
    schema = _schemas()[command]
    cfg = {k: (dict(v) if isinstance(v, _Free) else copy.deepcopy(v)) for k, v in schema.items()}
    for f in files:
        p = Path(f)
        if not p.is_file():
            raise MissingInput(f"config file not found: {p}")
        try:
            layer = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {p}: {exc}") from exc
        validate(layer, schema)
        cfg = _merge(cfg, layer)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        layer: dict = {}
        _set_path(layer, key.strip(), yaml.safe_load(raw))
        validate(layer, schema)
        cfg = _merge(cfg, layer)
    for key, value in (flags or {}).items():
        if value is not None:
            layer = {}
            _set_path(layer, key, value)
            validate(layer, schema)
            cfg = _merge(cfg, layer)
    validate(cfg, schema)
    return cfg


def artifact_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "artifacts"))


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump({"command": command, "version": __version__, "config": cfg}, sort_keys=True)
    (out / "resolved_config.yaml").write_text(text)


def _require(cfg: dict, key: str) -> str:
    if cfg.get(key) in (None, "", []):
        raise ConfigError(f"config key '{key}' is required", key)
    return cfg[key]


def _require_path(p, what: str) -> Path:
    path = Path(p)
    if not path.exists():
        raise MissingInput(f"missing {what}: {path}")
    return path


def _build(fn, section: dict, key: str):
    try:
        return fn(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{key}' section: {exc}", key) from exc


def _post_config(cfg: dict):
    from .posteval import PostEvalConfig
    return _build(PostEvalConfig.from_dict, cfg["posteval"], "posteval")


def _load_pool(dirs):
    from .teachers import TeacherPool, load_teacher
    if not dirs:
        return None
    return TeacherPool([load_teacher(_require_path(d, "teacher directory")) for d in dirs])


def _import_set(path):
    from .datahub import import_distilled
    return import_distilled(_require_path(path, "distilled set"))


# --------------------------------------------------------------------------- commands


def cmd_squeeze(cfg: dict) -> dict:
    from .archs import ModelSpec
    from .datahub import load_dataset
    from .teachers import TeacherRecipe, save_teacher, train_teacher
    from .utils import fingerprint

    recipe = _build(lambda d: TeacherRecipe(**d), cfg["recipe"], "recipe")
    if cfg["threads"]:
        import torch
        torch.set_num_threads(int(cfg["threads"]))
    train, test, spec = load_dataset(cfg["dataset"], cfg["data_root"])
    mspec = _build(lambda _: ModelSpec(cfg["arch"], spec.resolution, spec.num_classes), {}, "arch")
    out = Path(cfg["out"] or artifact_root() / "teachers" /
               fingerprint({"dataset": cfg["dataset"], "arch": cfg["arch"], "recipe": cfg["recipe"]}))
    _write_resolved(out, "squeeze", cfg)
    handle = train_teacher(mspec, train, recipe, test, cfg["dataset"])
    save_teacher(handle, out, recipe)
    return {"teacher": str(out), "test_accuracy": handle.test_accuracy}


def cmd_synth(cfg: dict) -> dict:
    import torch

    from .datahub import export_distilled, load_dataset
    from .synth import RecoverConfig, SelectConfig, random_sample, recover_optimize, select_patches
    from .teachers import load_teacher
    from .utils import fingerprint

    method = cfg["method"]
    if method not in ("random", "select", "recover"):
        raise ConfigError(f"unknown synthesis method {method!r}", "method")
    train, _, spec = load_dataset(cfg["dataset"], cfg["data_root"])
    params = {"seed": cfg["seed"], **cfg["params"]}
    out = Path(cfg["out"] or artifact_root() / "distilled" / fingerprint(cfg))
    if method == "random":
        if cfg["params"]:
            raise ConfigError("random sampling takes no params", "params")
        run = lambda: random_sample(train, cfg["ipc"], seed=cfg["seed"])  # noqa: E731
    else:
        teacher = load_teacher(_require_path(_require(cfg, "teacher"), "teacher directory"))
        if method == "select":
            sc = _build(lambda d: SelectConfig(**d), params, "params")
            run = lambda: select_patches(teacher, train, sc, cfg["ipc"])  # noqa: E731
        else:
            rc = _build(lambda d: RecoverConfig(**d), params, "params")
            labels = torch.arange(spec.num_classes).repeat_interleave(cfg["ipc"])
            run = lambda: recover_optimize(teacher, rc, labels, train=train)  # noqa: E731
    _write_resolved(out, "synth", cfg)
    ds = run()
    export_distilled(ds, out, cfg["format"])
    return {"distilled": str(out), "images": len(ds), "seconds": ds.provenance.wall_clock_seconds}


def cmd_relabel_cache(cfg: dict) -> dict:
    from .posteval import build_label_cache

    post = _post_config(cfg)
    ds = _import_set(_require(cfg, "distilled"))
    pool = _load_pool(_require(cfg, "teachers"))
    out = Path(cfg["out"] or artifact_root() / "label_cache" / f"{post.fingerprint()}-s{cfg['seed']}")
    _write_resolved(out, "relabel-cache", cfg)
    build_label_cache(pool, ds, post, cfg["seed"], out)
    from .relabel import cache_size_bytes
    return {"label_cache": str(out), "bytes": cache_size_bytes(out)}


def cmd_eval(cfg: dict) -> dict:
    from .archs import ModelSpec
    from .datahub import load_dataset
    from .posteval import train_student
    from .utils import fingerprint, write_json

    post = _post_config(cfg)
    ds = _import_set(_require(cfg, "distilled"))
    pool = _load_pool(cfg["teachers"])
    _, test, spec = load_dataset(ds.dataset, cfg["data_root"])
    arch = _build(lambda _: ModelSpec(cfg["arch"], spec.resolution, spec.num_classes), {}, "arch")
    if cfg["label_cache"] is not None:
        _require_path(cfg["label_cache"], "label cache")
        if len(post.seeds) != 1:
            raise ConfigError("a label cache serves exactly one seed", "posteval.seeds")
    out = Path(cfg["out"] or artifact_root() / "eval" / fingerprint(cfg))
    _write_resolved(out, "eval", cfg)
    finals = {}
    for seed in post.seeds:
        res = train_student(ds, pool, arch, post, test, seed, label_cache=cfg["label_cache"],
                            log_path=out / f"seed{seed}.log")
        write_json(out / f"run_seed{seed}.json", {"provenance": ds.provenance.to_dict(), "result": res.to_dict()})
        finals[seed] = res.final_accuracy
    return {"eval": str(out), "final_accuracy": finals}


def _grid_path(name: str) -> Path:
    p = Path(name)
    for cand in (p, p.with_suffix(".yaml"), Path(__file__).parent / "grids" / p.name,
                 (Path(__file__).parent / "grids" / p.name).with_suffix(".yaml")):
        if cand.is_file():
            return cand
    raise MissingInput(f"grid file not found: {name}")


def _load_grid(cfg: dict):
    from .evalsuite import GridError, GridSpec
    path = _grid_path(_require(cfg, "grid"))
    try:
        return GridSpec.from_file(path)
    except GridError as exc:
        raise ConfigError(f"grid {path}: {exc}", "grid") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse grid {path}: {exc}", "grid") from exc


def cmd_bench(cfg: dict) -> dict:
    from .evalsuite import run_grid

    grid = _load_grid(cfg)
    store = Path(cfg["store"] or artifact_root() / "store")
    _write_resolved(store / "configs" / grid.name, "bench", {**cfg, "resolved_grid": grid.to_dict()})
    results = run_grid(grid, store, workers=cfg["workers"], order_seed=cfg["order_seed"], max_runs=cfg["max_runs"])
    status = {}
    for r in results:
        status[r.status] = status.get(r.status, 0) + 1
    return {"store": str(store), "cells": len(results), "status": status}


def cmd_report(cfg: dict) -> dict:
    from .evalsuite import collect, emit_report, load_reported

    grid = _load_grid(cfg)
    store = _require_path(cfg["store"] or artifact_root() / "store", "result store")
    reported = load_reported(_require_path(cfg["reported"], "reported-numbers file")) if cfg["reported"] else None
    out = Path(cfg["out"] or artifact_root() / "reports" / grid.name)
    results = [r for r in collect(grid, store) if r.status != "pending"]
    if not results:
        raise MissingInput(f"no completed runs for grid {grid.name!r} in {store}")
    files = emit_report(results, out, cfg["formats"], force=cfg["force"], by_protocol=cfg["by_protocol"],
                        reported=reported, precision=cfg["precision"])
    _write_resolved(out, "report", cfg)
    return {"report": str(out), "files": [str(f) for f in files]}


def cmd_datahub_import(cfg: dict) -> dict:
    from .datahub import export_distilled, import_distilled

    path = _require_path(_require(cfg, "path"), "distilled set")
    ds = import_distilled(path, cfg["dataset"])
    info = {"dataset": ds.dataset, "ipc": ds.ipc, "images": len(ds), "unbalanced": ds.unbalanced,
            "method": ds.provenance.method}
    if cfg["out"]:
        out = Path(cfg["out"])
        _write_resolved(out, "datahub-import", cfg)
        export_distilled(ds, out, cfg["format"])
        info["out"] = str(out)
    return info


def cmd_datahub_export(cfg: dict) -> dict:
    from .datahub import export_distilled

    ds = _import_set(_require(cfg, "distilled"))
    out = Path(_require(cfg, "out"))
    _write_resolved(out, "datahub-export", cfg)
    m = export_distilled(ds, out, cfg["format"])
    return {"out": str(out), "payload": m.payload.get("format")}


COMMANDS = {
    "squeeze": cmd_squeeze, "synth": cmd_synth, "relabel-cache": cmd_relabel_cache, "eval": cmd_eval,
    "bench": cmd_bench, "report": cmd_report, "datahub-import": cmd_datahub_import,
    "datahub-export": cmd_datahub_export,
}


# --------------------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", EXIT_CONFIG, message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", action="append", default=[], metavar="FILE",
                   help="YAML config layer; repeatable, later files win")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, value parsed as YAML; repeatable")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddbench", description="Dataset-distillation benchmark harness.")
    parser.add_argument("--version", action="version", version=f"ddbench {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("squeeze", help="train a teacher on a real dataset")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--arch")
    p.add_argument("--data-root", dest="data_root")

    p = sub.add_parser("synth", help="build a distilled set (random | select | recover)")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--method", choices=["random", "select", "recover"])
    p.add_argument("--ipc", type=int)
    p.add_argument("--teacher", help="teacher directory (select, recover)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root", dest="data_root")

    p = sub.add_parser("relabel-cache", help="precompute epoch-wise soft labels for one seeded run")
    _common(p)
    p.add_argument("--distilled")
    p.add_argument("--teacher", action="append", dest="teachers", help="teacher directory; repeatable")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="post-evaluate a distilled set")
    _common(p)
    p.add_argument("--distilled")
    p.add_argument("--teacher", action="append", dest="teachers", help="teacher directory; repeatable")
    p.add_argument("--arch")
    p.add_argument("--label-cache", dest="label_cache")
    p.add_argument("--data-root", dest="data_root")

    p = sub.add_parser("bench", help="run an experiment grid into a result store")
    _common(p)
    p.add_argument("--grid", help="grid file (path, or name of a packaged grid)")
    p.add_argument("--store")
    p.add_argument("--workers", type=int)
    p.add_argument("--max-runs", dest="max_runs", type=int)

    p = sub.add_parser("report", help="aggregate a result store into tables")
    _common(p)
    p.add_argument("--grid")
    p.add_argument("--store")
    p.add_argument("--format", action="append", dest="formats", choices=["csv", "markdown", "json"])
    p.add_argument("--force", action="store_true", default=None, help="allow mixed post-eval protocols in one table")
    p.add_argument("--by-protocol", dest="by_protocol", action="store_true", default=None)
    p.add_argument("--reported", help="YAML/JSON file of externally reported accuracies")

    p = sub.add_parser("datahub", help="import or export distilled sets")
    dsub = p.add_subparsers(dest="datahub_command", required=True, parser_class=_Parser)
    q = dsub.add_parser("import", help="validate a manifest or class-folder tree")
    _common(q)
    q.add_argument("path", nargs="?")
    q.add_argument("--dataset")
    q = dsub.add_parser("export", help="re-export a distilled set")
    _common(q)
    q.add_argument("--distilled")
    q.add_argument("--format", choices=["auto", "png", "h5"])
    return parser


def _fail(kind: str, code: int, message: str, key: str | None = None):
    payload = {"error": kind, "exit": code, "message": " ".join(str(message).split())}
    if key:
        payload["key"] = key
    print("ddbench-error " + json.dumps(payload, sort_keys=True), file=sys.stderr)
    sys.exit(code)


_FLAG_SKIP = {"command", "datahub_command", "config", "set", "verbose"}


def run_command(argv=None) -> int:
    from .datahub import DatasetFileError, MissingPayloadError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    command = args.command if args.command != "datahub" else f"datahub-{args.datahub_command}"
    flags = {k: v for k, v in vars(args).items() if k not in _FLAG_SKIP}
    try:
        cfg = resolve_config(command, args.config, args.set, flags)
        summary = COMMANDS[command](cfg)
    except ConfigError as exc:
        _fail("ConfigError", EXIT_CONFIG, str(exc), exc.key)
    except (MissingInput, FileNotFoundError, MissingPayloadError, DatasetFileError) as exc:
        _fail(type(exc).__name__, EXIT_MISSING, str(exc))
    except KeyboardInterrupt:
        _fail("Interrupted", 130, "aborted by user; completed runs are committed")
    except Exception as exc:  # noqa: BLE001  (mapped to the runtime exit code)
        from .evalsuite import GridError
        from .posteval import ConfigError as PostConfigError
        if isinstance(exc, (GridError, PostConfigError)):
            _fail("ConfigError", EXIT_CONFIG, str(exc))
        log.debug("runtime failure", exc_info=True)
        _fail(type(exc).__name__, EXIT_RUNTIME, str(exc))
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
