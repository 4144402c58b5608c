"""End-to-end experiment steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import json

import numpy as np

from . import embedder, growth, matching, protocol
from .prepare import prepare_farm
from .synthfarm import gen_farm


def prepare(farm_config):
    dataset = gen_farm(farm_config)
    return dataset, prepare_farm(dataset)


def fingerprint(cfg, P):
    """Everything that determines a trained model, as a canonical string."""
    d = cfg.to_dict()
    return json.dumps({"training": d["training"], "train_farm": repr(cfg.train_farm()), "P": P,
                       "seed": cfg.train_seed(P)}, sort_keys=True)


def train_model(cfg, train_data, P, log=None):
    t = cfg.training
    rng = np.random.default_rng(cfg.train_seed(P))
    params = embedder.init_params(rng, P, head_dims=t.head_dims)
    params, curve = embedder.train(params, train_data, epochs=t.epochs, alpha=t.alpha, lr=t.lr,
                                   rng=rng, batch=t.batch, steps_per_epoch=t.steps_per_epoch,
                                   lam=t.lam, offset_step=t.offset_step, log=log)
    params.meta["fingerprint"] = fingerprint(cfg, P)
    return params, curve


def ablation(cfg, eval_data, models, caches=None):
    """Table rows: P sweep at the largest head, F sweep at the largest P."""
    sw = cfg.sweep
    caches = {} if caches is None else caches
    p_max, f_max = max(sw.P_values), max(sw.F_values)
    settings = [(P, f_max) for P in sw.P_values] + [(p_max, F) for F in sw.F_values if F != f_max]
    rows = []
    for P, F in settings:
        params = models[P]
        if P not in caches:
            caches[P] = matching.FeatureCache(params, eval_data, cfg.training.offset_step)
        for passes in sw.passes:
            m = matching.evaluate(eval_data, params, P, F, passes, seed=cfg.session_seed(),
                                  cache=caches[P], offset_step=cfg.training.offset_step)
            rows.append(m)
    return rows


def alpha_sweep(cfg, eval_data, params, cache=None):
    cache = cache or matching.FeatureCache(params, eval_data, cfg.training.offset_step)
    rows, reports = [], []
    for a in cfg.sweep.alpha_values:
        report = run_protocol(cfg, eval_data, params, a, cache)
        rows.append(report.summary())
        reports.append(report)
    return rows, reports


def run_protocol(cfg, eval_data, params, alpha_tx, cache=None):
    p = cfg.protocol
    return protocol.run_session(eval_data, params, alpha_tx, seed=cfg.session_seed(), cache=cache,
                                gap_scale=p.gap_scale, failed_robots=p.failed_robots,
                                offset_step=cfg.training.offset_step)


def cost_rows(cfg, measured_bytes=None):
    cm = cfg.cost.model
    rows = []
    configured = protocol.compare_modes(cm)
    rows.append({"scenario": f"{cm.n_robots} robots, configured feature traffic", **configured})
    if measured_bytes is not None:
        rows.append({"scenario": f"{cm.n_robots} robots, measured feature traffic",
                     **protocol.compare_modes(cm, measured_bytes)})
    n = cfg.cost.extrapolate_robots
    big = protocol.CostModel(**{**cm.__dict__, "n_robots": n})
    rows.append({"scenario": f"{n} robots, configured feature traffic",
                 **protocol.compare_modes(big)})
    return rows


def growth_analysis(cfg, log=None):
    dataset = gen_farm(cfg.growth_farm())
    records = growth.analyze_farm(dataset, cfg.growth.analysis, log=log)
    return records, growth.growth_histogram(records)


# --------------------------------------------------------------------------
# table writers; fixed formatting keeps reruns byte-identical

def _fmt(v):
    if isinstance(v, float):
        if not np.isfinite(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def write_rows(rows, fields, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


ABLATION_FIELDS = matching.METRIC_FIELDS
SWEEP_FIELDS = ["alpha_tx", "total_dims", "avg_packets", "top1", "top3", "top5", "bytes"]
COST_FIELDS = ["scenario", "centralized_latency_s", "decentralized_latency_s", "speedup",
               "centralized_bytes", "decentralized_bytes", "bandwidth_reduction"]
LOSS_FIELDS = ["epoch", "loss"]
