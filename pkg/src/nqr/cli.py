"""Command-line entry point: ``nqr gen|train|match|sweep|growth|report``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace

from . import embedder, experiments, growth, matching, protocol
from .config import ExperimentConfig, load_config
from .embedder import TrainingDiverged
from .geometry import GeometryError
from .prepare import load_prepared, save_prepared
from .synthfarm import ConfigError, save_dataset

log = logging.getLogger("nqr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# file helpers: every artifact is written to a temporary name and renamed,
# so a failed command never leaves a half-written file behind

def _atomic(path, write):
    tmp = path + ".tmp"
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _atomic_dir(path, write):
    tmp = path + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    try:
        write(tmp)
        shutil.rmtree(path, ignore_errors=True)
        os.replace(tmp, path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _write_text(path, text):
    def w(p):
        with open(p, "w") as f:
            f.write(text)
    _atomic(path, w)


def _require(path, hint):
    if not os.path.exists(path):
        raise RuntimeFailure(f"missing {path}; run `nqr {hint}` first")
    return path


def _load_rafts(out, name):
    return load_prepared(_require(os.path.join(out, name), "gen"))


def _params_path(out, P):
    return os.path.join(out, f"params_P{P}.bin")


# --------------------------------------------------------------------------
# commands

def cmd_gen(cfg, out):
    for name, farm_cfg in (("", cfg.eval_farm()), ("train_", cfg.train_farm())):
        log.info("generating %sfarm (%d seeding rafts, %d robots)", name or "evaluation ",
                 farm_cfg.n_seed_rafts, farm_cfg.n_grow_robots)
        dataset, data = experiments.prepare(farm_cfg)
        _atomic_dir(os.path.join(out, f"{name}dataset"), lambda p: save_dataset(dataset, p))
        _atomic_dir(os.path.join(out, f"{name}rafts"), lambda p: save_prepared(data, p))
    _write_text(os.path.join(out, "config.json"), cfg.to_json() + "\n")


def _train_and_save(cfg, out, train_data, P):
    log.info("training P=%d", P)
    params, curve = experiments.train_model(cfg, train_data, P, log=log.info)
    _atomic(_params_path(out, P), lambda p: embedder.save_params(params, p))
    rows = [{"epoch": i + 1, "loss": v} for i, v in enumerate(curve)]
    _atomic(os.path.join(out, f"loss_P{P}.csv"),
            lambda p: experiments.write_rows(rows, experiments.LOSS_FIELDS, p))
    return params


def _model(cfg, out, P, train_data=None):
    """Trained params for P, reusing a saved model built from the same settings."""
    path = _params_path(out, P)
    if os.path.exists(path):
        params = embedder.load_params(path)
        if params.meta.get("fingerprint") == experiments.fingerprint(cfg, P):
            return params
    if train_data is None:
        raise RuntimeFailure(f"no model for P={P} trained with this config; run `nqr train`")
    return _train_and_save(cfg, out, train_data, P)


def cmd_train(cfg, out):
    _train_and_save(cfg, out, _load_rafts(out, "train_rafts"), cfg.matching.P)


def cmd_match(cfg, out):
    m = cfg.matching
    data = _load_rafts(out, "rafts")
    params = _model(cfg, out, m.P)
    cache = matching.FeatureCache(params, data, cfg.training.offset_step)
    rows = [matching.evaluate(data, params, m.P, m.F, passes, seed=cfg.session_seed(),
                              cache=cache, offset_step=cfg.training.offset_step)
            for passes in sorted({1, m.passes})]
    _atomic(os.path.join(out, "metrics.csv"), lambda p: matching.write_metrics(rows, p))
    report = experiments.run_protocol(cfg, data, params, cfg.protocol.alpha_tx, cache)
    _atomic(os.path.join(out, "session.csv"), lambda p: protocol.write_session_csv(report, p))
    _atomic(os.path.join(out, "ledger.bin"), lambda p: protocol.write_ledger(report.ledger, p))
    s = report.summary()
    log.info("top1 %.3f top5 %.3f; protocol at α_tx=%s: %.2f packets, top1 %.3f",
             rows[-1]["top1"], rows[-1]["top5"], cfg.protocol.alpha_tx, s["avg_packets"],
             s["top1"])


def cmd_sweep(cfg, out):
    data = _load_rafts(out, "rafts")
    train_data = _load_rafts(out, "train_rafts")
    models = {P: _model(cfg, out, P, train_data) for P in cfg.sweep.P_values}
    caches = {}
    rows = experiments.ablation(cfg, data, models, caches)
    _atomic(os.path.join(out, "ablation.csv"),
            lambda p: experiments.write_rows(rows, experiments.ABLATION_FIELDS, p))
    p_max = max(cfg.sweep.P_values)
    sweep, reports = experiments.alpha_sweep(cfg, data, models[p_max], caches.get(p_max))
    _atomic(os.path.join(out, "threshold_sweep.csv"),
            lambda p: experiments.write_rows(sweep, experiments.SWEEP_FIELDS, p))
    measured = next((r["bytes"] for r in sweep if r["alpha_tx"] == cfg.protocol.alpha_tx), None)
    costs = experiments.cost_rows(cfg, measured)
    _atomic(os.path.join(out, "cost.csv"),
            lambda p: experiments.write_rows(costs, experiments.COST_FIELDS, p))


def cmd_growth(cfg, out):
    records, hist = experiments.growth_analysis(cfg, log=log.info)
    _atomic(os.path.join(out, "growth.csv"), lambda p: growth.write_growth_csv(records, p))
    _atomic(os.path.join(out, "growth_hist.csv"), lambda p: growth.write_histogram_csv(hist, p))
    log.info("center mean growth %.3f, edge %.3f over %d seeds", hist["center"]["mean_hbar"],
             hist["edge"]["mean_hbar"], hist["total_seeds"])


def _md_table(rows, fields):
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    lines += ["| " + " | ".join(r[k] for k in fields) + " |" for r in rows]
    return "\n".join(lines)


REPORT_SECTIONS = [
    ("metrics.csv", "Retrieval metrics"),
    ("ablation.csv", "Patch and dimension ablation"),
    ("threshold_sweep.csv", "Transmission threshold sweep"),
    ("cost.csv", "Centralized vs decentralized cost"),
    ("growth_hist.csv", "Growth by seed location"),
]


def cmd_report(cfg, out):
    found = [(f, title) for f, title in REPORT_SECTIONS if os.path.exists(os.path.join(out, f))]
    if not found:
        raise RuntimeFailure(f"nothing to report in {out}; run match, sweep or growth first")
    parts = ["# Experiment report", "", f"Seed: {cfg.seed}", ""]
    for f, title in found:
        rows = experiments.read_rows(os.path.join(out, f))
        fields = list(rows[0].keys()) if rows else []
        parts += [f"## {title}", "", f"Source: `{f}`", "", _md_table(rows, fields), ""]
        if f == "cost.csv":
            cm = cfg.cost.model
            n = cfg.cost.extrapolate_robots
            speed = n * cm.total("strong") / cm.total("weak")
            parts += [f"At {n} robots the decentralized pipeline is {speed:.1f}x faster "
                      f"({n} x {cm.total('strong'):.1f} s / {cm.total('weak'):.1f} s) and moves "
                      f"{n * cm.image_bytes / cm.feature_bytes:.0f}x less data.", ""]
    _write_text(os.path.join(out, "report.md"), "\n".join(parts))


COMMAND_HELP = {
    "gen": "generate the evaluation and training farms and their normalized rafts",
    "train": "train the embedder for the configured patch count",
    "match": "evaluate retrieval and run the transmission protocol once",
    "sweep": "patch/dimension ablation and transmission threshold sweep",
    "growth": "seed-growth analysis on a separate growth farm",
    "report": "collect existing tables into report.md",
}

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "match": cmd_match, "sweep": cmd_sweep,
            "growth": cmd_growth, "report": cmd_report}


def _common_flags():
    # a fresh parent per parser: set_defaults on the top level would otherwise
    # leak into the shared actions and reset flags given before the command
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    return common


def build_parser():
    parser = argparse.ArgumentParser(prog="nqr", parents=[_common_flags()],
                                     description="Synthetic raft matching experiments.")
    parser.set_defaults(config=None, seed=None, out=None, quiet=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[_common_flags()], help=COMMAND_HELP[name])
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        out = cfg.output_dir
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from None
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"nqr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, TrainingDiverged, GeometryError, OSError, ValueError) as exc:
        print(f"nqr: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
