"""Iterative feature transmission over a simulated robot network.

For each query the seeding robot asks every growing robot for a fresh
patch-ensemble embedding of each of its rafts.  The first ten rounds use the
16-d head, the next ten the 128-d head.  After each round the seeding robot
folds the new distances into its running matrix and stops the query as soon
as the best candidate is separated from the runner-up by the threshold.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .matching import (FeatureCache, InsufficientObservations, RunningDistanceMatrix,
                       margin_gap, pass_locations, rank_of, retrieve_topk)

HEADER = struct.Struct("<IHHH6x")
HEADER_SIZE = HEADER.size
SWITCH_PASS = 10
MAX_PASSES = 20
UNDEFINED = None


class TxAction(Enum):
    SEND16 = "Send16"
    SEND128 = "Send128"
    STOP = "Stop"

    @property
    def dim(self):
        return {TxAction.SEND16: 16, TxAction.SEND128: 128}.get(self, 0)


def tx_decide(delta, c, alpha_tx):
    """Next action for a query after ``c`` completed rounds.

    An undefined gap (fewer than two observed candidates) never stops a
    query, so the first round is always sent.
    """
    if c >= MAX_PASSES:
        return TxAction.STOP
    if delta is not UNDEFINED and delta >= alpha_tx:
        return TxAction.STOP
    return TxAction.SEND16 if c < SWITCH_PASS else TxAction.SEND128


@dataclass(frozen=True)
class Packet:
    robot: int
    slot: int
    pass_index: int
    dim: int
    payload: np.ndarray

    def __post_init__(self):
        if len(self.payload) != self.dim:
            raise ValueError(f"payload has {len(self.payload)} values, header says {self.dim}")

    @property
    def nbytes(self):
        return HEADER_SIZE + 4 * self.dim

    def encode(self):
        return HEADER.pack(self.robot, self.slot, self.pass_index, self.dim) + \
            np.asarray(self.payload, dtype="<f4").tobytes()

    @classmethod
    def decode(cls, data):
        robot, slot, pass_index, dim = HEADER.unpack_from(data)
        payload = np.frombuffer(data, dtype="<f4", count=dim, offset=HEADER_SIZE)
        return cls(robot, slot, pass_index, dim, payload)


@dataclass(frozen=True)
class LedgerEntry:
    query: int
    packet: Packet


# --------------------------------------------------------------------------
# simulated transport

def default_latency(nbytes):
    """1 ms per hop plus serialization at 10 MB/s."""
    return 1e-3 + nbytes / 10e6


class Network:
    """Lossless, in-order, discrete-event message transport."""

    def __init__(self, latency=default_latency):
        self.latency = latency
        self.now = 0.0
        self._queue = []
        self._seq = itertools.count()
        self.nodes = {}
        self.control_bytes = 0

    def attach(self, name, node):
        self.nodes[name] = node

    def send(self, dst, message, nbytes, control=False):
        if control:
            self.control_bytes += nbytes
        heapq.heappush(self._queue, (self.now + self.latency(nbytes), next(self._seq), dst, message))

    def schedule(self, dst, message, delay):
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), dst, message))

    def run(self):
        while self._queue:
            self.now, _, dst, message = heapq.heappop(self._queue)
            self.nodes[dst].receive(message, self)


@dataclass(frozen=True)
class TxRequest:
    query: int
    pass_index: int
    dim: int


@dataclass(frozen=True)
class Timeout:
    query: int
    pass_index: int


_REQUEST_BYTES = 16


class GrowingNode:
    """A growing robot: embeds its own rafts on request and replies."""

    def __init__(self, robot, slots, cache, params, seed, grid_shape, cell_px, offset_step=2,
                 failed=False):
        self.robot = robot
        self.grid_shape, self.cell_px = grid_shape, cell_px
        self.slots = dict(sorted(slots.items()))   # slot -> growing raft index
        self.cache = cache
        self.params = params
        self.seed = seed
        self.offset_step = offset_step
        self.failed = failed
        self._index = np.array(list(self.slots.values()), dtype=np.intp)

    def receive(self, msg, net):
        if self.failed or not self.slots:
            return
        loc = pass_locations(self.seed, msg.query, msg.pass_index, self.grid_shape,
                             self.params.n_patches, self.cell_px, self.params.patch_px,
                             self.offset_step)
        emb = self.cache.candidates(loc, msg.dim, self._index)
        for slot, values in zip(self.slots, emb):
            pkt = Packet(self.robot, slot, msg.pass_index, msg.dim, values.astype(np.float32))
            net.send("seeding", (msg.query, pkt.encode()), pkt.nbytes)


class SeedingNode:
    """Aggregation point: runs one query at a time to completion."""

    def __init__(self, roster, cache, alpha_tx, seed, gap_scale="row_std", timeout=1.0,
                 offset_step=2):
        self.roster = list(roster)
        self.index = {r: i for i, r in enumerate(self.roster)}
        self.robots = sorted({r for r, _ in self.roster})
        self.cache = cache
        self.alpha_tx = alpha_tx
        self.seed = seed
        self.gap_scale = gap_scale
        self.timeout = timeout
        self.offset_step = offset_step
        self.ledger = []

    def start(self, query, matrix, net, grid_shape, cell_px, params):
        self.query = query
        self.matrix = matrix
        self.grid_shape, self.cell_px, self.params = grid_shape, cell_px, params
        self.c = 0
        self.inbox = []
        self.deltas = []
        self.missing = set()
        self.done = False
        self._advance(net)

    def gap(self):
        try:
            delta = margin_gap(self.matrix, self.query)
        except InsufficientObservations:
            return UNDEFINED
        if self.gap_scale == "raw":
            return delta
        obs = self.matrix.means[self.query, self.matrix.counts[self.query] > 0]
        spread = float(np.std(obs))
        return delta / spread if spread > 0 else 0.0

    def _advance(self, net):
        delta = self.gap() if self.c > 0 else UNDEFINED
        action = tx_decide(delta, self.c, self.alpha_tx)
        if action is TxAction.STOP:
            self.done = True
            self.final_delta = delta
            return
        self.pending = {r for r in self.roster if r[0] not in self.missing}
        req = TxRequest(self.query, self.c, action.dim)
        self.current_dim = action.dim
        for robot in self.robots:
            net.send(f"g{robot}", req, _REQUEST_BYTES, control=True)
        net.schedule("seeding", Timeout(self.query, self.c), self.timeout)

    def receive(self, msg, net):
        if isinstance(msg, Timeout):
            if msg.query == self.query and msg.pass_index == self.c and not self.done:
                self.missing |= {r for r, _ in self.pending}
                self._close_round(net)
            return
        query, data = msg
        pkt = Packet.decode(data)
        if query != self.query or pkt.pass_index != self.c or self.done:
            return
        self.inbox.append(pkt)
        self.pending.discard((pkt.robot, pkt.slot))
        if not self.pending:
            self._close_round(net)

    def _close_round(self, net):
        loc = pass_locations(self.seed, self.query, self.c, self.grid_shape,
                             self.params.n_patches, self.cell_px, self.params.patch_px,
                             self.offset_step)
        fq = self.cache.query(self.query, loc, self.current_dim)
        for pkt in sorted(self.inbox, key=lambda p: (p.pass_index, p.robot, p.slot)):
            d = float(np.sqrt(np.sum((pkt.payload.astype(np.float64) - fq) ** 2)))
            self.matrix.update(self.query, (pkt.robot, pkt.slot), d)
            self.ledger.append(LedgerEntry(self.query, pkt))
        self.inbox = []
        self.c += 1
        self._advance(net)


# --------------------------------------------------------------------------
# sessions

@dataclass
class QueryReport:
    query: int
    passes: int
    dims_per_candidate: int
    packets: int
    bytes: int
    final_delta: float | None
    true_rank: int | None
    top5: list
    complete: bool


@dataclass
class MatchReport:
    alpha_tx: float
    queries: list
    ledger: list
    sim_time_s: float
    control_bytes: int

    def summary(self):
        passes = np.array([q.passes for q in self.queries], dtype=np.float64)
        dims = np.array([q.dims_per_candidate for q in self.queries], dtype=np.float64)
        ranks = np.array([q.true_rank if q.true_rank is not None else np.inf
                          for q in self.queries])
        return {
            "alpha_tx": self.alpha_tx,
            "total_dims": float(dims.mean()),
            "avg_packets": float(passes.mean()),
            "top1": float(np.mean(ranks <= 1)),
            "top3": float(np.mean(ranks <= 3)),
            "top5": float(np.mean(ranks <= 5)),
            "bytes": int(sum(q.bytes for q in self.queries)),
        }


def run_session(data, params, alpha_tx, seed=0, cache=None, gap_scale="row_std",
                failed_robots=(), latency=default_latency, offset_step=2):
    """Run the transmission protocol for every query of a prepared farm."""
    cache = FeatureCache(params, data, offset_step) if cache is None else cache
    roster = list(data.grow_locations)
    net = Network(latency)
    grid_shape, cell_px = data.seed[0].grid_shape, data.seed[0].cell_px
    failed = set(failed_robots)
    by_robot = {}
    for g, (robot, slot) in enumerate(roster):
        by_robot.setdefault(robot, {})[slot] = g
    for robot, slots in sorted(by_robot.items()):
        node = GrowingNode(robot, slots, cache, params, seed, grid_shape, cell_px, offset_step,
                           failed=robot in failed)
        net.attach(f"g{robot}", node)
    seeding = SeedingNode(roster, cache, alpha_tx, seed, gap_scale, offset_step=offset_step)
    net.attach("seeding", seeding)

    matrix = RunningDistanceMatrix(len(data.seed), roster)
    reports = []
    for q in range(len(data.seed)):
        start = len(seeding.ledger)
        seeding.start(q, matrix, net, grid_shape, cell_px, params)
        net.run()
        entries = seeding.ledger[start:]
        true = data.assignment[q] if data.assignment else None
        observed = matrix.counts[q] > 0
        rank = rank_of(matrix, q, true) if true is not None and observed[true] else None
        per_candidate = {}
        for e in entries:
            key = (e.packet.robot, e.packet.slot)
            per_candidate[key] = per_candidate.get(key, 0) + e.packet.dim
        reports.append(QueryReport(
            query=q,
            passes=seeding.c,
            dims_per_candidate=max(per_candidate.values(), default=0),
            packets=len(entries),
            bytes=sum(e.packet.nbytes for e in entries),
            final_delta=seeding.final_delta,
            true_rank=rank,
            top5=retrieve_topk(matrix, q, 5) if observed.any() else [],
            complete=not seeding.missing,
        ))
    return MatchReport(alpha_tx=alpha_tx, queries=reports, ledger=seeding.ledger,
                       sim_time_s=net.now, control_bytes=net.control_bytes)


def bandwidth_totals(ledger, header_size=HEADER_SIZE):
    """Feature traffic aggregated farm-wide, per query and per robot."""
    def blank():
        return {"dims": 0, "bytes": 0, "packets": 0}

    total, per_query, per_robot = blank(), {}, {}
    for e in ledger:
        nbytes = 4 * e.packet.dim + header_size
        for bucket in (total, per_query.setdefault(e.query, blank()),
                       per_robot.setdefault(e.packet.robot, blank())):
            bucket["dims"] += e.packet.dim
            bucket["bytes"] += nbytes
            bucket["packets"] += 1
    return {**total, "per_query": per_query, "per_robot": per_robot}


_LEDGER_MAGIC = b"NQRL"


def write_ledger(ledger, path):
    """Magic, u32 version, u32 count, then (u32 query, wire packet) records."""
    with open(path, "wb") as f:
        f.write(_LEDGER_MAGIC + struct.pack("<II", 1, len(ledger)))
        for e in ledger:
            f.write(struct.pack("<I", e.query))
            f.write(e.packet.encode())


def read_ledger(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _LEDGER_MAGIC:
        raise ValueError(f"{path}: not a ledger file")
    _, count = struct.unpack_from("<II", raw, 4)
    pos, out = 12, []
    for _ in range(count):
        (query,) = struct.unpack_from("<I", raw, pos)
        pkt = Packet.decode(raw[pos + 4:])
        out.append(LedgerEntry(query, pkt))
        pos += 4 + pkt.nbytes
    return out


SESSION_FIELDS = ["query", "passes", "dims_per_candidate", "packets", "bytes",
                  "final_delta", "true_rank", "complete"]


def write_session_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SESSION_FIELDS)
        for q in report.queries:
            delta = "" if q.final_delta is None else f"{q.final_delta:.6f}"
            rank = "" if q.true_rank is None else q.true_rank
            w.writerow([q.query, q.passes, q.dims_per_candidate, q.packets, q.bytes, delta,
                        rank, int(q.complete)])


# --------------------------------------------------------------------------
# cost model

STAGES = ("undistort", "bbox", "vertex", "patch_extract", "match", "bg_subtract")


@dataclass(frozen=True)
class CostModel:
    strong: dict
    weak: dict
    image_bytes: float = 1e6
    n_robots: int = 100
    strong_total: float | None = None
    weak_total: float | None = None
    feature_bytes: float = 8e6

    def __post_init__(self):
        for name, stages in (("strong", self.strong), ("weak", self.weak)):
            for s in STAGES:
                if stages.get(s, 0) <= 0:
                    raise ValueError(f"{name} CPU time for {s} must be > 0")

    def total(self, cpu):
        override = self.strong_total if cpu == "strong" else self.weak_total
        if override is not None:
            return float(override)
        return float(sum((self.strong if cpu == "strong" else self.weak)[s] for s in STAGES))


# Median per-stage timings of the reference deployment, seconds.  The stage
# times of the strong CPU sum to 13.2 s; the reported median total is 13.1 s.
REFERENCE_COSTS = CostModel(
    strong=dict(undistort=0.6, bbox=0.8, vertex=11.2, patch_extract=0.2, match=0.2,
                bg_subtract=0.2),
    weak=dict(undistort=3.0, bbox=9.9, vertex=41.6, patch_extract=2.6, match=6.0,
              bg_subtract=0.9),
    image_bytes=1e6, n_robots=100, strong_total=13.1, weak_total=64.0, feature_bytes=8e6,
)


def cost_model(cm, mode, ledger_bytes=None):
    """Latency and bandwidth of one farm-wide matching round."""
    if mode == "centralized":
        return {"latency_s": cm.n_robots * cm.total("strong"),
                "bandwidth_bytes": cm.n_robots * cm.image_bytes}
    if mode == "decentralized":
        bw = cm.feature_bytes if ledger_bytes is None else ledger_bytes
        return {"latency_s": cm.total("weak"), "bandwidth_bytes": float(bw)}
    raise ValueError(f"unknown mode {mode!r}")


def compare_modes(cm, ledger_bytes=None):
    c = cost_model(cm, "centralized")
    d = cost_model(cm, "decentralized", ledger_bytes)
    return {
        "centralized_latency_s": c["latency_s"],
        "decentralized_latency_s": d["latency_s"],
        "speedup": c["latency_s"] / d["latency_s"],
        "centralized_bytes": c["bandwidth_bytes"],
        "decentralized_bytes": d["bandwidth_bytes"],
        "bandwidth_reduction": c["bandwidth_bytes"] / d["bandwidth_bytes"],
    }


def break_even_robots(cm):
    return math.ceil(cm.total("weak") / cm.total("strong"))
