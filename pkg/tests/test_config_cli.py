import json

import numpy as np
import pytest
import yaml

from fusionlab.cli import main
from fusionlab.config import ConfigError, ExperimentConfig, from_dict, load_config
from fusionlab.report import line_plot_svg, read_csv, write_csv

TINY = {
    "model": {"depth": 2, "dim": 16, "heads": 2, "patch": 4, "image": 8, "classes": 3},
    "data": {"classes": 3, "image": 8, "train_per_class": 4, "test_per_class": 6, "pretrain_per_class": 8},
    "attack": {"layers": [1], "n_prompts": 2, "rank": 2},
    "train": {"epochs": 2, "pretrain_epochs": 2, "batch": 8},
    "theory": {"seeds": 3, "p": 8, "k_shared": 2, "n_rows": 10},
    "defense": {"nc_steps": 2},
}


def write_cfg(tmp_path, body=TINY, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(body))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root)
    out = root / "out"
    for backend in ("dynamic", "lowrank"):
        assert main(["attack", "--config", str(cfg), "--out", str(out), "--seed", "3", "--backend", backend]) == 0
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--seed", "3", "--backend", backend]) == 0
    return cfg, out


# -- config ---------------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    again = from_dict(json.loads(cfg.dumps()))
    assert again.to_dict() == cfg.to_dict()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        from_dict({"train": {"momentum": 0.9}})


def test_wrong_types_rejected():
    with pytest.raises(ConfigError):
        from_dict({"train": {"epochs": "ten"}})


def test_json_and_yaml_agree(tmp_path):
    y = load_config(write_cfg(tmp_path))
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    assert load_config(tmp_path / "c.json").to_dict() == y.to_dict()


def test_seed_override_reaches_data():
    cfg = ExperimentConfig().with_seed(5)
    assert cfg.seed == 5 and cfg.data.seed == 5


# -- exit codes ---------------------------------------------------------------------


def test_config_errors_exit_one(tmp_path, capsys):
    bad = write_cfg(tmp_path, {"train": {"momentum": 1}}, "bad.yaml")
    assert main(["theory", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--backend", "prefix"]) == 1
    assert "config error" in capsys.readouterr().err


def test_runtime_errors_exit_two(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2


# -- subcommands ---------------------------------------------------------------------


def test_theory_default_rows(tmp_path):
    assert main(["theory", "--out", str(tmp_path)]) == 0
    header, rows = read_csv(tmp_path / "theory_report.csv")
    assert len(rows) == 200
    assert header["command"] == "theory" and header["seed"] == 0
    assert {float(r["ratio"]) for r in rows} == {1.0, 2.0, 5.0, 10.0}


def test_attack_eval_is_deterministic(tiny_run, tmp_path):
    cfg, out = tiny_run
    other = tmp_path / "again"
    assert main(["attack", "--config", str(cfg), "--out", str(other), "--seed", "3", "--backend", "dynamic"]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(other), "--seed", "3", "--backend", "dynamic"]) == 0
    assert (other / "metrics_dynamic.csv").read_bytes() == (out / "metrics_dynamic.csv").read_bytes()
    assert (other / "attack_dynamic.flab").read_bytes() == (out / "attack_dynamic.flab").read_bytes()


def test_seed_mismatch_is_runtime_error(tiny_run):
    cfg, out = tiny_run
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--seed", "4", "--backend", "dynamic"]) == 2


def test_theta_is_shared_across_backends(tiny_run):
    _, out = tiny_run
    sums = {read_csv(out / f"metrics_{k}.csv")[1][0]["theta_checksum"] for k in ("dynamic", "lowrank")}
    assert len(sums) == 1


def test_prune_sweep_covers_all_checkpoints(tiny_run):
    cfg, out = tiny_run
    assert main(["prune-sweep", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    _, rows = read_csv(out / "prune_sweep.csv")
    assert len(rows) == 20
    assert sorted({r["backend"] for r in rows}) == ["dynamic", "lowrank"]


@pytest.mark.parametrize("command,name", [("dissect", "dissection.csv"), ("perturb-test", "perturb.csv"),
                                          ("nc-defense", "nc_report.csv"), ("proximity", "proximity.csv")])
def test_analysis_commands_write_csv(tiny_run, command, name):
    cfg, out = tiny_run
    assert main([command, "--config", str(cfg), "--out", str(out), "--seed", "3", "--backend", "dynamic"]) == 0
    header, rows = read_csv(out / name)
    assert header["command"] == command and header["seed"] == 3
    assert header["config"]["attack"]["kind"] == "dynamic"
    assert rows


def test_report_writes_summary_and_svg(tiny_run):
    cfg, out = tiny_run
    assert main(["theory", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert main(["prune-sweep", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert main(["report", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert "Pruning sweep" in (out / "summary.md").read_text()
    for svg in ("prune_sweep.svg", "theory_energy.svg", "train_loss_dynamic.svg"):
        text = (out / svg).read_text()
        assert text.startswith("<svg") and "<polyline" in text


def test_every_csv_carries_config_header(tiny_run):
    _, out = tiny_run
    for path in sorted(out.glob("*.csv")):
        header, _ = read_csv(path)
        assert {"command", "seed", "config"} <= header.keys(), path.name
        from_dict(header["config"])


# -- report helpers -----------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "x.csv", ("a", "b"), [(1, 0.5), (2, np.float64(0.25))], {"k": 1}, 9, "demo",
                     {"note": [1, 2]})
    header, rows = read_csv(path)
    assert header == {"command": "demo", "seed": 9, "config": {"k": 1}, "note": [1, 2]}
    assert rows == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "0.25"}]


def test_svg_is_deterministic():
    series = {"x": ([0, 1, 2], [0.1, 0.5, 0.2])}
    assert line_plot_svg(series, "t", "x", "y") == line_plot_svg(series, "t", "x", "y")
