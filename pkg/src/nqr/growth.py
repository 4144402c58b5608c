"""Seed-growth measurement from the growing robot's time series.

Each normalized cell is run through a per-pixel mixture-of-Gaussians
background model.  Foreground masks are OR-accumulated over time and the
coverage of each 5x5 subpatch gives a growth curve h(t).  Seeds found in the
seeding view are mapped onto the same subpatch grid, so every seed gets the
time-averaged growth of the subpatch it was sown in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import normalize_raft
from .synthfarm import render_growing, render_seeding


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class MogParams:
    k: int = 3
    lr: float = 0.05
    threshold: float = 2.5
    bg_cutoff: float = 0.7
    var_init: float = 0.01
    var_floor: float = 1e-4


@dataclass
class BgModel:
    means: np.ndarray       # (K, N)
    variances: np.ndarray
    weights: np.ndarray
    shape: tuple
    params: MogParams = field(default_factory=MogParams)


def init_bg_model(first_frame, params=MogParams()):
    """Model whose dominant mode is ``first_frame``; the other modes are empty."""
    frame = np.asarray(first_frame, dtype=np.float64)
    n = frame.size
    means = np.zeros((params.k, n))
    means[0] = frame.ravel()
    variances = np.full((params.k, n), params.var_init)
    weights = np.zeros((params.k, n))
    weights[0] = 1.0
    return BgModel(means, variances, weights, frame.shape, params)


def bg_step(model, frame):
    """Update ``model`` in place with one frame; returns (model, bool mask)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != model.shape:
        raise SequenceError(f"frame shape {frame.shape} differs from sequence shape {model.shape}")
    p = model.params
    mask = kernels.mog_update(model.means, model.variances, model.weights,
                              np.ascontiguousarray(frame.ravel()), p.lr, p.threshold,
                              p.bg_cutoff, p.var_init, p.var_floor)
    return model, np.asarray(mask, dtype=bool).reshape(model.shape)


def foreground_masks(frames, params=MogParams()):
    """Masks for a whole sequence; the model is seeded from the first frame."""
    frames = list(frames)
    model = init_bg_model(frames[0], params)
    return [bg_step(model, f)[1] for f in frames]


def growth_metric(masks):
    """h(t): mean of the OR-accumulated mask over the trailing two axes."""
    m = np.asarray(masks, dtype=bool)
    cumulative = np.logical_or.accumulate(m, axis=0)
    return cumulative.mean(axis=(-2, -1))


def subpatch_growth(masks, grid=5):
    """h(t) for each of the grid x grid subpatches, shape (grid, grid, T)."""
    m = np.asarray(masks, dtype=bool)
    t, h, w = m.shape
    if h % grid or w % grid:
        raise ValueError(f"cell of {h}x{w} px does not split into a {grid}x{grid} grid")
    cumulative = np.logical_or.accumulate(m, axis=0)
    blocks = cumulative.reshape(t, grid, h // grid, grid, w // grid)
    return blocks.mean(axis=(2, 4)).transpose(1, 2, 0)


# --------------------------------------------------------------------------
# seed detection

@dataclass(frozen=True)
class DetectorParams:
    sigma: float = 0.035        # blob scale, in cell units
    ratio: float = 1.6
    threshold: float = 0.06
    border: float = 0.03        # ignore responses this close to the cell edge
    line_band: float = 0.06     # dark grid-line band filled before filtering


def detect_seeds(patch, params=DetectorParams()):
    """Bright blobs in a seeding-view cell, as (x, y) in cell units [0, 1).

    The grid-line band is filled with the interior median so line corners do
    not read as blobs.  Then difference of Gaussians at the seed scale,
    absolute threshold and 3x3 non-maximum suppression.
    """
    img = np.array(patch, dtype=np.float64)
    px = img.shape[0]
    c = (np.arange(px) + 0.5) / px
    edge = np.minimum(c, 1 - c)
    band = np.minimum(edge[:, None], edge[None, :]) < params.line_band
    if band.any() and not band.all():
        img[band] = np.median(img[~band])
    s = params.sigma * px
    dog = (ndimage.gaussian_filter(img, s, mode="nearest")
           - ndimage.gaussian_filter(img, s * params.ratio, mode="nearest"))
    peaks = (dog == ndimage.maximum_filter(dog, size=3, mode="nearest")) & (dog > params.threshold)
    rows, cols = np.nonzero(peaks)
    xs, ys = (cols + 0.5) / px, (rows + 0.5) / img.shape[1]
    keep = np.minimum.reduce([xs, ys, 1 - xs, 1 - ys]) >= params.border
    order = np.lexsort((xs[keep], ys[keep]))
    return np.stack([xs[keep][order], ys[keep][order]], axis=1) if keep.any() else np.zeros((0, 2))


def match_detections(detected, truth, radius=0.05):
    """Greedy nearest pairing; returns (true positives, n detected, n truth)."""
    detected, truth = np.asarray(detected).reshape(-1, 2), np.asarray(truth).reshape(-1, 2)
    if len(detected) == 0 or len(truth) == 0:
        return 0, len(detected), len(truth)
    d = np.hypot(*(detected[:, None, :] - truth[None, :, :]).transpose(2, 0, 1))
    used_d, used_t, tp = set(), set(), 0
    for flat in np.argsort(d, axis=None, kind="stable"):
        i, j = divmod(int(flat), d.shape[1])
        if d[i, j] > radius:
            break
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        tp += 1
    return tp, len(detected), len(truth)


# --------------------------------------------------------------------------
# records and histogram

def subpatch_of(x, y, grid=5):
    """(row, col) of the subpatch containing cell point (x, y) and its l1 radius."""
    j = min(grid - 1, max(0, int(np.floor(x * grid))))
    i = min(grid - 1, max(0, int(np.floor(y * grid))))
    c = grid // 2
    return i, j, abs(i - c) + abs(j - c)


def growth_score(h):
    """Time average of a growth curve."""
    return float(np.mean(h))


@dataclass
class SeedGrowth:
    x: float
    y: float
    sub: tuple
    r: int
    hbar: float


@dataclass
class GrowthRecord:
    raft: int
    cell: tuple
    h: np.ndarray           # (grid, grid, T)
    seeds: list

    def __post_init__(self):
        if np.any(self.h < 0) or np.any(self.h > 1):
            raise ValueError("growth curve outside [0, 1]")
        if np.any(np.diff(self.h, axis=-1) < 0):
            raise ValueError("growth curve decreases")


def make_record(raft, cell, h, positions, grid=5):
    seeds = []
    for x, y in np.asarray(positions).reshape(-1, 2):
        i, j, r = subpatch_of(x, y, grid)
        seeds.append(SeedGrowth(float(x), float(y), (i, j), r, growth_score(h[i, j])))
    return GrowthRecord(raft, tuple(cell), h, seeds)


HIST_RADII = (0, 1, 2, 3, 4)


def growth_histogram(records):
    """Per-radius count, mean growth score and share of total growth.

    Also returns center (r <= 1) and edge (r > 1) aggregates.
    """
    seeds = [s for rec in records for s in rec.seeds]
    total = sum(s.hbar for s in seeds)

    def stats(group):
        g = sum(s.hbar for s in group)
        return {
            "count": len(group),
            "mean_hbar": g / len(group) if group else 0.0,
            "share": g / total if total > 0 else 0.0,
            "seed_share": len(group) / len(seeds) if seeds else 0.0,
        }

    buckets = {r: stats([s for s in seeds if s.r == r]) for r in HIST_RADII}
    return {
        "buckets": buckets,
        "center": stats([s for s in seeds if s.r <= 1]),
        "edge": stats([s for s in seeds if s.r > 1]),
        "total_seeds": len(seeds),
    }


# --------------------------------------------------------------------------
# pipeline

@dataclass(frozen=True)
class GrowthConfig:
    cell_px: int = 40
    seed_cell_px: int = 32
    grid: int = 5
    mog: MogParams = field(default_factory=MogParams)
    detector: DetectorParams = field(default_factory=DetectorParams)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        mog = MogParams(**d.pop("mog", {}))
        det = DetectorParams(**d.pop("detector", {}))
        return cls(mog=mog, detector=det, **d)


def analyze_raft(dataset, k, config=GrowthConfig(), correspondence=None):
    """Growth records for every cell of seeding raft ``k``.

    ``correspondence`` maps seeding index to growing index; the dataset's own
    assignment is used when it is not given.
    """
    g = (dataset.assignment if correspondence is None else correspondence)[k]
    robot, slot = dataset.grow_locations[g]
    img, _, det = render_seeding(dataset, k)
    seed_view = normalize_raft(img, det[0], config.seed_cell_px)

    frames = []
    for t in range(dataset.config.growth_steps + 1):
        img, _, det = render_growing(dataset, robot, t=t)
        frames.append(normalize_raft(img, det[slot], config.cell_px).cells)
    seq = np.stack(frames)              # (T, gh, gw, px, px)
    T, gh, gw, px, _ = seq.shape
    flat = seq.reshape(T, gh * gw * px, px)
    masks = np.stack(foreground_masks(list(flat), config.mog)).reshape(T, gh, gw, px, px)

    records = []
    for i in range(gh):
        for j in range(gw):
            h = subpatch_growth(masks[:, i, j], config.grid)
            pos = detect_seeds(seed_view.cells[i, j], config.detector)
            records.append(make_record(k, (i, j), h, pos, config.grid))
    return records


def analyze_farm(dataset, config=GrowthConfig(), correspondence=None, log=None):
    records = []
    for k in range(len(dataset.seed_rafts)):
        records.extend(analyze_raft(dataset, k, config, correspondence))
        if log:
            log(f"raft {k}: {sum(len(r.seeds) for r in records)} seeds so far")
    return records


GROWTH_FIELDS = ["raft", "cell_row", "cell_col", "x", "y", "sub_row", "sub_col", "r", "hbar"]


def write_growth_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GROWTH_FIELDS)
        for rec in records:
            for s in rec.seeds:
                w.writerow([rec.raft, rec.cell[0], rec.cell[1], f"{s.x:.6f}", f"{s.y:.6f}",
                            s.sub[0], s.sub[1], s.r, f"{s.hbar:.6f}"])


def write_histogram_csv(hist, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bucket", "count", "mean_hbar", "share", "seed_share"])
        rows = [(str(r), hist["buckets"][r]) for r in HIST_RADII]
        rows += [("center", hist["center"]), ("edge", hist["edge"])]
        for name, s in rows:
            w.writerow([name, s["count"], f"{s['mean_hbar']:.6f}", f"{s['share']:.6f}",
                        f"{s['seed_share']:.6f}"])
