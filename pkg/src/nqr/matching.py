"""Distances, running-average aggregation and top-k retrieval."""

from __future__ import annotations

import csv

import numpy as np

from .embedder import apply_head, bank_lookup, feature_bank
from .geometry import sample_locations
from .synthfarm import stream

_LOCATIONS = 11


class DimMismatch(ValueError):
    pass


class UnknownCandidate(KeyError):
    pass


class InsufficientObservations(ValueError):
    pass


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def pairwise_distance(f, g):
    a, b = _values(f), _values(g)
    if a.shape != b.shape:
        raise DimMismatch(f"cannot compare {a.shape} with {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


class RunningDistanceMatrix:
    """Exact running mean of distances per (query, candidate)."""

    def __init__(self, n_queries, roster):
        self.roster = [tuple(r) for r in roster]
        self._index = {r: i for i, r in enumerate(self.roster)}
        self.means = np.zeros((n_queries, len(self.roster)))
        self.counts = np.zeros((n_queries, len(self.roster)), dtype=np.int64)

    def candidate_index(self, candidate):
        if isinstance(candidate, tuple):
            if candidate not in self._index:
                raise UnknownCandidate(candidate)
            return self._index[candidate]
        c = int(candidate)
        if not 0 <= c < len(self.roster):
            raise UnknownCandidate(candidate)
        return c

    def update(self, query, candidate, distance):
        c = self.candidate_index(candidate)
        n = self.counts[query, c]
        self.means[query, c] = (self.means[query, c] * n + distance) / (n + 1)
        self.counts[query, c] = n + 1
        return self

    def update_row(self, query, distances, mask=None):
        """Vectorized ``update`` for every candidate (or those in ``mask``)."""
        d = np.asarray(distances, dtype=np.float64)
        m = np.ones(len(d), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        n = self.counts[query, m]
        self.means[query, m] = (self.means[query, m] * n + d[m]) / (n + 1)
        self.counts[query, m] = n + 1
        return self


def update(matrix, query, candidate, distance):
    return matrix.update(query, candidate, distance)


def _observed(matrix, query):
    return np.flatnonzero(matrix.counts[query] > 0)


def margin_gap(matrix, query):
    """Runner-up mean distance minus best mean distance (>= 0)."""
    obs = _observed(matrix, query)
    if len(obs) < 2:
        raise InsufficientObservations(f"query {query} has {len(obs)} observed candidates")
    two = np.partition(matrix.means[query, obs], 1)[:2]
    return float(max(two[1] - two[0], 0.0))


def retrieve_topk(matrix, query, k):
    """Observed candidates ranked by mean distance, ties broken by (robot, slot)."""
    obs = _observed(matrix, query)
    roster = np.array(matrix.roster, dtype=np.int64).reshape(-1, 2)[obs]
    order = np.lexsort((roster[:, 1], roster[:, 0], matrix.means[query, obs]))
    return [int(c) for c in obs[order[:max(1, int(k))]]]


def rank_of(matrix, query, candidate):
    """1-based rank of ``candidate`` under the retrieve_topk ordering."""
    full = retrieve_topk(matrix, query, len(matrix.roster))
    return full.index(candidate) + 1


def pass_locations(seed, query, pass_index, grid_shape, P, cell_px, patch_px, offset_step=2):
    """Shared patch locations for one (query, pass); identical on every node."""
    rng = stream(seed, _LOCATIONS, query, pass_index)
    return sample_locations(grid_shape, P, rng, cell_px, patch_px, offset_step)


class FeatureCache:
    """Encoder features of every patch location, computed once per raft."""

    def __init__(self, params, data, offset_step=2):
        self.params = params
        self.offset_step = offset_step
        self.seed = [feature_bank(params, "seeding", r, offset_step) for r in data.seed]
        self.grow = np.stack([feature_bank(params, "growing", r, offset_step) for r in data.grow])

    def query(self, q, locations, dim):
        z = bank_lookup(self.seed[q], locations, self.offset_step)
        return apply_head(self.params, "seeding", z[None], dim)[0]

    def candidates(self, locations, dim, index=slice(None)):
        step = max(self.offset_step, 1)
        z = self.grow[index][:, locations[:, 0], locations[:, 1] // step, locations[:, 2] // step]
        return apply_head(self.params, "growing", z, dim)


def evaluate(data, params, P, F, passes, seed=0, cache=None, offset_step=2):
    """Retrieval metrics for every query of a prepared farm.

    1v1 is the fraction of (positive, negative) pairs ordered correctly on
    the first pass; top-k and percentile use the multi-pass running mean.
    """
    if P != params.n_patches:
        raise ValueError(f"params were built for P={params.n_patches}, asked for P={P}")
    cache = FeatureCache(params, data, offset_step) if cache is None else cache
    roster = data.grow_locations
    matrix = RunningDistanceMatrix(len(data.seed), roster)
    grid, cell_px = data.seed[0].grid_shape, data.seed[0].cell_px
    correct_pairs = total_pairs = 0
    ranks = []
    for q in range(len(data.seed)):
        true = data.assignment[q]
        for p in range(passes):
            loc = pass_locations(seed, q, p, grid, P, cell_px, params.patch_px, offset_step)
            fq = cache.query(q, loc, F)
            fg = cache.candidates(loc, F)
            d = np.sqrt(np.sum((fg - fq) ** 2, axis=1))
            if p == 0:
                neg = np.delete(d, true)
                correct_pairs += int(np.sum(neg > d[true]))
                total_pairs += len(neg)
            matrix.update_row(q, d)
        ranks.append(rank_of(matrix, q, true))
    ranks = np.array(ranks)
    n = len(roster)
    return {
        "P": P, "F": F, "passes": passes,
        "1v1": correct_pairs / max(total_pairs, 1),
        "top1": float(np.mean(ranks <= 1)),
        "top3": float(np.mean(ranks <= 3)),
        "top5": float(np.mean(ranks <= 5)),
        "percentile": float(np.mean(100.0 * ranks / n)),
        "ranks": ranks.tolist(),
    }


METRIC_FIELDS = ["P", "F", "passes", "1v1", "top1", "top3", "top5", "percentile"]


def write_metrics(rows, path, extra_fields=()):
    fields = list(extra_fields) + METRIC_FIELDS
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
