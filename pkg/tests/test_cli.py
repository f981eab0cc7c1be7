import json

import pytest
import yaml

from ddbench.cli import ConfigError, build_parser, resolve_config, run_command

SUBCOMMANDS = [["squeeze"], ["synth"], ["relabel-cache"], ["eval"], ["bench"], ["report"], ["datahub", "import"],
               ["datahub", "export"], []]


def _run(argv, capsys):
    """Run the CLI in-process; returns (exit code, stdout summary or stderr error payload)."""
    try:
        code = run_command([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    if code == 0:
        return code, json.loads(out.strip().splitlines()[-1])
    line = [ln for ln in err.splitlines() if ln.startswith("ddbench-error ")][-1]
    return code, json.loads(line[len("ddbench-error "):])


@pytest.mark.parametrize("sub", SUBCOMMANDS, ids=lambda s: "-".join(s) or "root")
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(sub + ["--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_layer_precedence(tmp_path):
    f1, f2 = tmp_path / "a.yaml", tmp_path / "b.yaml"
    f1.write_text("ipc: 3\nseed: 1\nmethod: select\n")
    f2.write_text("ipc: 4\n")
    cfg = resolve_config("synth", [f1, f2])
    assert (cfg["ipc"], cfg["seed"], cfg["method"]) == (4, 1, "select")
    cfg = resolve_config("synth", [f1, f2], ["ipc=5", "seed=2"])
    assert (cfg["ipc"], cfg["seed"]) == (5, 2)
    cfg = resolve_config("synth", [f1, f2], ["ipc=5"], {"ipc": 6, "seed": None})
    assert (cfg["ipc"], cfg["seed"]) == (6, 1)
    cfg = resolve_config("eval", sets=["posteval.epochs=7"])
    assert cfg["posteval"]["epochs"] == 7 and cfg["posteval"]["lr"] == 0.001


def test_schema_errors_name_the_key(tmp_path):
    with pytest.raises(ConfigError) as exc:
        resolve_config("eval", sets=["posteval.epoch=3"])
    assert exc.value.key == "posteval.epoch"
    with pytest.raises(ConfigError) as exc:
        resolve_config("synth", sets=["ipc=ten"])
    assert exc.value.key == "ipc"
    (tmp_path / "bad.yaml").write_text("recipe: {lr: fast}\n")
    with pytest.raises(ConfigError) as exc:
        resolve_config("squeeze", [tmp_path / "bad.yaml"])
    assert exc.value.key == "recipe.lr"


def test_exit_codes(tmp_path, capsys):
    code, err = _run(["synth", "--set", "ipcs=3"], capsys)
    assert code == 2 and err["key"] == "ipcs" and err["error"] == "ConfigError"
    code, err = _run(["eval", "--distilled", tmp_path / "nowhere"], capsys)
    assert code == 3 and "nowhere" in err["message"]
    code, err = _run(["synth", "--config", tmp_path / "nope.yaml"], capsys)
    assert code == 3
    code, err = _run(["bench", "--grid", tmp_path / "nogrid"], capsys)
    assert code == 3
    code, err = _run(["synth", "--bogus-flag"], capsys)
    assert code == 2 and err["error"] == "UsageError"
    code, err = _run(["eval", "--set", "posteval.zeta=0", "--distilled", tmp_path], capsys)
    assert code == 2 and err["key"] == "posteval"


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    code = run_command(["squeeze", "--set", "recipe.epochs=1", "--set", "recipe.batch_size=128", "--out", str(out)])
    assert code == 0
    return out


def test_pipeline_and_config_replay(teacher_dir, tmp_path, capsys):
    capsys.readouterr()
    assert (teacher_dir / "resolved_config.yaml").is_file()
    code, s = _run(["synth", "--method", "select", "--ipc", 1, "--teacher", teacher_dir,
                    "--set", "params={candidates_per_source: 2, sources_per_class: 3}", "--out", tmp_path / "syn"],
                   capsys)
    assert code == 0 and s["images"] == 10
    code, s = _run(["relabel-cache", "--distilled", tmp_path / "syn", "--teacher", teacher_dir,
                    "--set", "posteval.epochs=2", "--seed", 0, "--out", tmp_path / "cache"], capsys)
    assert code == 0 and s["bytes"] > 0
    args = ["eval", "--distilled", tmp_path / "syn", "--teacher", teacher_dir, "--set", "posteval.epochs=2",
            "--set", "posteval.seeds=[0]"]
    code, live = _run(args + ["--out", tmp_path / "ev"], capsys)
    assert code == 0
    code, cached = _run(args + ["--label-cache", tmp_path / "cache", "--out", tmp_path / "ev2"], capsys)
    assert code == 0 and cached["final_accuracy"] == live["final_accuracy"]
    # replaying the resolved config reproduces the run
    resolved = yaml.safe_load((tmp_path / "ev" / "resolved_config.yaml").read_text())
    assert resolved["command"] == "eval"
    (tmp_path / "replay.yaml").write_text(yaml.safe_dump({**resolved["config"], "out": str(tmp_path / "ev3")}))
    code, again = _run(["eval", "--config", tmp_path / "replay.yaml"], capsys)
    assert code == 0 and again["final_accuracy"] == live["final_accuracy"]
    run = json.loads((tmp_path / "ev3" / "run_seed0.json").read_text())
    assert run["provenance"]["method"] == "select" and len(run["result"]["test_accuracy"]) == 2
    assert (tmp_path / "ev3" / "seed0.log").read_text().count("epoch=") == 2


def test_datahub_round_trip(tmp_path, capsys):
    code, s = _run(["synth", "--ipc", 1, "--out", tmp_path / "syn"], capsys)
    assert code == 0
    code, s = _run(["datahub", "export", "--distilled", tmp_path / "syn", "--format", "h5", "--out", tmp_path / "h5"],
                   capsys)
    assert code == 0 and s["payload"] == "h5"
    code, s = _run(["datahub", "import", tmp_path / "h5"], capsys)
    assert code == 0 and (s["dataset"], s["ipc"], s["images"], s["method"]) == ("digits32", 1, 10, "random")


def test_bench_and_report(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DDBENCH_HOME", str(tmp_path / "home"))
    grid = {"name": "clitiny", "datasets": ["digits32"], "methods": ["random"], "ipcs": [1],
            "eval_archs": ["convnet-small"], "label_modes": ["hard"], "seeds": [0, 1],
            "posteval": {"epochs": 1, "batch_size": 10}}
    (tmp_path / "g.yaml").write_text(yaml.safe_dump(grid))
    code, s = _run(["bench", "--grid", tmp_path / "g.yaml"], capsys)
    assert code == 0 and s["status"] == {"ok": 1}
    assert (tmp_path / "home" / "store" / "configs" / "clitiny" / "resolved_config.yaml").is_file()
    code, s = _run(["bench", "--grid", tmp_path / "g"], capsys)
    assert code == 0 and s["status"] == {"ok": 1}
    (tmp_path / "rep.yaml").write_text("- {method: random, dataset: digits32, ipc: 1, accuracy: 10.0}\n")
    code, s = _run(["report", "--grid", tmp_path / "g.yaml", "--reported", tmp_path / "rep.yaml"], capsys)
    assert code == 0
    out = tmp_path / "home" / "reports" / "clitiny"
    assert "±" in (out / "accuracy.md").read_text() and (out / "rectification.md").is_file()
    code, _ = _run(["report", "--grid", tmp_path / "g.yaml", "--store", tmp_path / "empty"], capsys)
    assert code == 3


def test_packaged_grids_parse():
    from ddbench.cli import _grid_path
    from ddbench.evalsuite import GridSpec
    for name in ("digits-desk", "cifar10-desk"):
        g = GridSpec.from_file(_grid_path(name))
        assert g.cells()
