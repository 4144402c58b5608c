import hashlib
import json
import math
import os

import pytest

from nqr import cli
from nqr.config import ExperimentConfig, derive_seed, load_config
from nqr.synthfarm import ConfigError

TINY = {
    "farm": {"n_seed_rafts": 4, "n_grow_robots": 4, "rafts_per_robot": 5, "n_grow_rafts": 12,
             "grid_h": 4, "grid_w": 8},
    "training": {"epochs": 1, "steps_per_epoch": 5, "batch": 4, "train_seed_rafts": 6,
                 "train_robots": 3, "train_rafts": 12},
    "matching": {"P": 4, "F": 16, "passes": 3},
    "sweep": {"P_values": [1, 4], "F_values": [4, 16, 128],
              "alpha_values": ["inf", 2.0, 1.0, 0.5, "-inf"]},
    "growth": {"n_rafts": 2, "n_robots": 2},
}

PIPELINE = ["gen", "train", "match", "sweep", "growth", "report"]


def _write_config(path, d):
    path.write_text(json.dumps(d))
    return str(path)


def _tree_digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def _run(cfg_path, out, seed=5, commands=PIPELINE):
    for c in commands:
        assert cli.main([c, "--config", cfg_path, "--out", str(out), "--seed", str(seed),
                         "--quiet"]) == 0, c
    return _tree_digest(out)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = _write_config(base / "tiny.json", TINY)
    a = _run(cfg, base / "a")
    b = _run(cfg, base / "b")
    return base, cfg, a, b


def test_pipeline_writes_all_artifacts(pipeline_runs):
    _, _, a, _ = pipeline_runs
    for name in ["config.json", "params_P4.bin", "loss_P4.csv", "metrics.csv", "session.csv",
                 "ledger.bin", "ablation.csv", "threshold_sweep.csv", "cost.csv", "growth.csv",
                 "growth_hist.csv", "report.md", "params_P1.bin"]:
        assert name in a
    assert any(k.startswith("dataset" + os.sep) for k in a)
    assert not any(k.endswith(".tmp") for k in a)


def test_pipeline_is_byte_identical_across_runs(pipeline_runs):
    base, _, a, b = pipeline_runs
    # config.json records the output dir, the only input that differs
    assert {k: v for k, v in a.items() if k != "config.json"} == \
        {k: v for k, v in b.items() if k != "config.json"}
    ca = json.loads((base / "a" / "config.json").read_text())
    cb = json.loads((base / "b" / "config.json").read_text())
    assert ca.pop("output_dir") != cb.pop("output_dir") and ca == cb


def test_rerun_in_place_is_idempotent(pipeline_runs):
    base, cfg, a, _ = pipeline_runs
    assert _run(cfg, base / "a", commands=["gen", "match", "sweep"]) == a


def test_different_seed_changes_dataset(pipeline_runs):
    base, cfg, a, _ = pipeline_runs
    c = _run(cfg, base / "c", seed=6, commands=["gen"])
    assert c["dataset/keypoints.csv"] != a["dataset/keypoints.csv"]


def test_sweep_table_has_alpha_rows_bracketing_dims(pipeline_runs):
    base = pipeline_runs[0]
    with open(base / "a" / "threshold_sweep.csv") as f:
        rows = [line.split(",") for line in f.read().splitlines()]
    assert rows[0][:3] == ["alpha_tx", "total_dims", "avg_packets"]
    assert [r[0] for r in rows[1:]] == ["inf", "2.000000", "1.000000", "0.500000", "-inf"]
    # payload dims sent per candidate, averaged over queries
    dims = [float(r[1]) for r in rows[1:]]
    assert dims[0] == 1440 and dims[-1] == 16
    assert dims == sorted(dims, reverse=True)


def test_ablation_table_shape(pipeline_runs):
    with open(pipeline_runs[0] / "a" / "ablation.csv") as f:
        lines = f.read().splitlines()
    # P in {1, 4} at F=128 plus F in {4, 16} at P=4, each for passes 1 and 10
    assert len(lines) == 1 + 4 * 2


def test_report_contains_every_table(pipeline_runs):
    text = (pipeline_runs[0] / "a" / "report.md").read_text()
    for title, _ in [(t, f) for f, t in cli.REPORT_SECTIONS]:
        assert f"## {title}" in text
    assert "3000 robots" in text


def test_report_on_empty_dir_fails_cleanly(tmp_path, capsys):
    out = tmp_path / "empty"
    assert cli.main(["report", "--out", str(out), "--quiet"]) == cli.EXIT_RUNTIME
    assert os.listdir(out) == []
    assert "nothing to report" in capsys.readouterr().err


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert cli.main(["match", "--out", str(tmp_path), "--quiet"]) == cli.EXIT_RUNTIME
    assert "run `nqr gen`" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [
    {"matching": {"P": 0}},
    {"matching": {"F": 3}},
    {"farm": {"n_grow_robots": 0}},
    {"schema_version": 2},
    {"bogus": 1},
    {"protocol": {"alpha_tx": "many"}},
    {"training": {"lr": -1}},
])
def test_invalid_config_exits_2(tmp_path, bad):
    cfg = _write_config(tmp_path / "bad.json", bad)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert not (tmp_path / "o" / "dataset").exists()


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    assert cli.main(["gen", "--config", str(tmp_path / "x.json"), "--quiet"]) == 2
    assert cli.main(["gen", "--config", str(tmp_path / "missing.json"), "--quiet"]) == 2


def test_unwritable_output_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["report", "--out", str(blocker / "sub"), "--quiet"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_3(tmp_path, capsys):
    d = json.loads(json.dumps(TINY))
    d["training"].update(lr=math.inf)
    cfg = _write_config(tmp_path / "c.json", d)
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 3
    assert not (tmp_path / "params_P4.bin").exists()


def test_flags_override_config(tmp_path):
    cfg = _write_config(tmp_path / "c.json", {"seed": 1, "output_dir": "elsewhere"})
    args = cli.build_parser().parse_args(["--seed", "9", "gen", "--config", cfg,
                                          "--out", str(tmp_path)])
    resolved = cli.resolve_config(args)
    assert resolved.seed == 9 and resolved.output_dir == str(tmp_path)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY).validate()
    path = tmp_path / "rt.json"
    path.write_text(cfg.to_json())
    again = load_config(str(path))
    assert again == cfg
    assert again.sweep.alpha_values[0] == math.inf and again.sweep.alpha_values[-1] == -math.inf


def test_default_config_is_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.eval_farm().n_seed_rafts == 17
    assert cfg.eval_farm().n_grow_robots == 100


def test_derived_seeds_are_distinct_and_stable():
    cfg = ExperimentConfig(seed=3)
    seeds = [cfg.train_farm().rng_seed, cfg.growth_farm().rng_seed, cfg.session_seed(),
             cfg.train_seed(1), cfg.train_seed(22)]
    assert len(set(seeds)) == len(seeds)
    assert derive_seed(3, 24) == cfg.session_seed()
    assert ExperimentConfig(seed=4).session_seed() != cfg.session_seed()
