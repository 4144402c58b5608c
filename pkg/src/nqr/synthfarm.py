"""Procedural seeding/growing imagery with known ground-truth correspondence.

Every raft is a grid of dirt cells.  Each cell carries a band-limited value
noise texture keyed by its own seed; that texture is the only thing that
distinguishes one raft from another, because grid lines and seed holes are
identical everywhere.  Growing views occlude the texture with plant discs,
change resolution and illumination, and jostle the raft.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import apply_homography, estimate_homography

# intensities
LINE = 0.12
HOLE = 0.08
SEED = 0.95
PLANT = 0.85
BENCH = 0.25
TEX_LO, TEX_SPAN = 0.30, 0.35

LINE_HALF_WIDTH = 0.04
HOLE_RADIUS = 0.13
SEED_SIGMA = 0.035
EDGE_SOFTNESS = 0.04

# rng stream tags
_FARM, _RAFT, _ASSIGN, _RENDER, _KEYPOINTS, _SLOTS = range(1, 7)
SEEDING, GROWING = "seeding", "growing"
_CAMERA_CODE = {SEEDING: 0, GROWING: 1}


class ConfigError(ValueError):
    pass


def stream(seed, *keys):
    """Independent generator for one named stream of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *map(int, keys)]))


@dataclass(frozen=True)
class NoiseParams:
    keypoint_sigma: float = 1.75
    gain_range: tuple[float, float] = (0.75, 1.25)
    grow_scale: float = 0.5
    pixel_sigma: float = 0.02
    jostle_px: float = 2.0
    rotation_deg: float = 2.0
    perspective_px: float = 1.5

    def validate(self):
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad gain_range {self.gain_range}")
        if self.grow_scale <= 0 or self.keypoint_sigma < 0 or self.pixel_sigma < 0:
            raise ConfigError("noise scales must be non-negative (grow_scale positive)")


@dataclass(frozen=True)
class SeedingParams:
    seeds_per_cell: tuple[int, int] = (2, 5)
    hole_fraction: float = 0.55
    hole_sigma: float = 0.06
    min_spacing: float = 0.12
    p_center: float = 0.9
    p_edge: float = 0.3
    falloff: float = 0.15
    growth_rate: tuple[float, float] = (0.015, 0.03)
    germination_lag: int = 1
    max_radius: float = 0.2
    texture_lattice: int = 4

    def germination_probability(self, dist):
        """Germination chance as a function of distance from the hole center."""
        dist = np.asarray(dist, dtype=np.float64)
        return self.p_edge + (self.p_center - self.p_edge) * np.exp(-((dist / self.falloff) ** 2))


@dataclass(frozen=True)
class FarmConfig:
    n_seed_rafts: int = 17
    n_grow_robots: int = 100
    rafts_per_robot: int = 10
    n_grow_rafts: int | None = 473
    grid_h: int = 8
    grid_w: int = 16
    cell_px: int = 16
    seed_px_per_cell: int = 32
    growth_steps: int = 12
    match_t: int = 10
    rng_seed: int = 0
    noise: NoiseParams = field(default_factory=NoiseParams)
    seeding: SeedingParams = field(default_factory=SeedingParams)

    @property
    def total_grow_rafts(self):
        if self.n_grow_rafts is None:
            return self.n_grow_robots * self.rafts_per_robot
        return self.n_grow_rafts

    def validate(self):
        counts = dict(n_seed_rafts=self.n_seed_rafts, n_grow_robots=self.n_grow_robots,
                      rafts_per_robot=self.rafts_per_robot, grid_h=self.grid_h,
                      grid_w=self.grid_w, growth_steps=self.growth_steps,
                      seed_px_per_cell=self.seed_px_per_cell)
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.cell_px < 8:
            raise ConfigError(f"cell_px must be >= 8, got {self.cell_px}")
        slots = self.n_grow_robots * self.rafts_per_robot
        if self.n_seed_rafts > slots:
            raise ConfigError(
                f"{self.n_seed_rafts} seeding rafts cannot fit in {slots} growing slots")
        if not self.n_seed_rafts <= self.total_grow_rafts <= slots:
            raise ConfigError(
                f"n_grow_rafts={self.total_grow_rafts} must lie in [{self.n_seed_rafts}, {slots}]")
        if self.match_t < 0:
            raise ConfigError("match_t must be >= 0")
        grow_ppc = self.seed_px_per_cell * self.noise.grow_scale
        if abs(grow_ppc - round(grow_ppc)) > 1e-9:
            raise ConfigError("seed_px_per_cell * grow_scale must be an integer")
        self.noise.validate()
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        noise = NoiseParams(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in d.pop("noise", {}).items()})
        seeding = SeedingParams(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in d.pop("seeding", {}).items()})
        try:
            return cls(noise=noise, seeding=seeding, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class CellSpec:
    texture_seed: int
    hole_center: tuple[float, float]
    seeds: list[tuple[float, float]]
    germinated: list[bool]
    growth_rate: list[float]
    plant_radius: list[float]


@dataclass
class RaftSpec:
    raft_id: int
    cells: list[list[CellSpec]]
    growth_t: int = 0
    env: dict = field(default_factory=dict)

    @property
    def grid_shape(self):
        return len(self.cells), len(self.cells[0])

    @property
    def seeding_config(self):
        """Per-cell seed offsets in normalized cell coordinates."""
        return [[list(c.seeds) for c in row] for row in self.cells]


@dataclass
class RawImage:
    pixels: np.ndarray
    width: int
    height: int
    camera_id: str

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel grid does not match width/height")


@dataclass
class FarmDataset:
    config: FarmConfig
    seed_rafts: list[RaftSpec]
    grow_rafts: list[RaftSpec]
    grow_locations: list[tuple[int, int]]  # (robot, slot) per growing raft
    assignment: list[int]                   # seed raft index -> growing raft index

    def robot_slots(self, robot):
        """Slot -> growing-raft index for one robot."""
        return {slot: i for i, (r, slot) in enumerate(self.grow_locations) if r == robot}

    def to_json(self):
        return json.dumps({
            "config": _config_to_dict(self.config),
            "seed_rafts": [_raft_to_dict(r) for r in self.seed_rafts],
            "grow_rafts": [_raft_to_dict(r) for r in self.grow_rafts],
            "grow_locations": [list(x) for x in self.grow_locations],
            "assignment": list(self.assignment),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            config=FarmConfig.from_dict(d["config"]),
            seed_rafts=[_raft_from_dict(r) for r in d["seed_rafts"]],
            grow_rafts=[_raft_from_dict(r) for r in d["grow_rafts"]],
            grow_locations=[tuple(x) for x in d["grow_locations"]],
            assignment=list(d["assignment"]),
        )


def _config_to_dict(config):
    d = asdict(config)
    d["noise"]["gain_range"] = list(config.noise.gain_range)
    for k in ("seeds_per_cell", "growth_rate"):
        d["seeding"][k] = list(getattr(config.seeding, k))
    return d


def _raft_to_dict(raft):
    return {"raft_id": raft.raft_id, "growth_t": raft.growth_t, "env": raft.env,
            "cells": [[asdict(c) for c in row] for row in raft.cells]}


def _raft_from_dict(d):
    cells = [[CellSpec(texture_seed=c["texture_seed"], hole_center=tuple(c["hole_center"]),
                       seeds=[tuple(s) for s in c["seeds"]], germinated=list(c["germinated"]),
                       growth_rate=list(c["growth_rate"]), plant_radius=list(c["plant_radius"]))
              for c in row] for row in d["cells"]]
    return RaftSpec(raft_id=d["raft_id"], cells=cells, growth_t=d["growth_t"], env=d["env"])


# --------------------------------------------------------------------------
# generation

def _place_seeds(rng, params):
    lo, hi = params.seeds_per_cell
    n = int(rng.integers(lo, hi + 1))
    seeds = []
    attempts = 0
    while len(seeds) < n and attempts < 200:
        attempts += 1
        if rng.random() < params.hole_fraction:
            p = 0.5 + rng.normal(0.0, params.hole_sigma, size=2)
        else:
            p = rng.uniform(0.08, 0.92, size=2)
        p = np.clip(p, 0.05, 0.95)
        if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= params.min_spacing for q in seeds):
            seeds.append((float(p[0]), float(p[1])))
    return seeds


def make_raft(raft_id, config, rng):
    params = config.seeding
    cells = []
    for _ in range(config.grid_h):
        row = []
        for _ in range(config.grid_w):
            seeds = _place_seeds(rng, params)
            hole = (0.5, 0.5)
            dist = np.array([math.hypot(x - hole[0], y - hole[1]) for x, y in seeds])
            p = params.germination_probability(dist)
            germ = [bool(g) for g in rng.random(len(seeds)) < p]
            rates = [float(r) for r in rng.uniform(*params.growth_rate, size=len(seeds))]
            row.append(CellSpec(
                texture_seed=int(rng.integers(0, 2**63 - 1)),
                hole_center=hole,
                seeds=seeds,
                germinated=germ,
                growth_rate=rates,
                plant_radius=[0.0] * len(seeds),
            ))
        cells.append(row)
    env = {"growth_factor": float(rng.uniform(0.85, 1.15))}
    return RaftSpec(raft_id=raft_id, cells=cells, growth_t=0, env=env)


def apply_growth(raft, t, params=SeedingParams()):
    """Advance a raft to growth time ``t``.

    Germinated seeds grow a plant disc whose radius is nondecreasing in
    ``t``.  Textures are never touched.
    """
    if t < raft.growth_t:
        raise ValueError(f"cannot grow raft backwards from t={raft.growth_t} to t={t}")
    if t == raft.growth_t:
        return raft
    factor = raft.env.get("growth_factor", 1.0)
    active = max(0, t - params.germination_lag)
    cells = [[replace(c, plant_radius=[
        min(params.max_radius, rate * factor * active) if g else 0.0
        for g, rate in zip(c.germinated, c.growth_rate)])
        for c in row] for row in raft.cells]
    return replace(raft, cells=cells, growth_t=t)


def gen_farm(config):
    """Generate seeding rafts, growing rafts and the hidden assignment.

    Growing rafts are spread evenly across robots; the true matches of the
    seeding rafts occupy a uniformly random subset of the occupied slots and
    the remaining slots hold distractors with identical grid geometry.
    """
    config.validate()
    seed = config.rng_seed
    n_grow = config.total_grow_rafts
    R, Q = config.n_grow_robots, config.rafts_per_robot

    slot_rng = stream(seed, _SLOTS)
    locations = []
    for robot in range(R):
        count = n_grow // R + (1 if robot < n_grow % R else 0)
        slots = np.sort(slot_rng.choice(Q, size=count, replace=False))
        locations.extend((robot, int(s)) for s in slots)

    seed_rafts = [make_raft(k, config, stream(seed, _RAFT, k)) for k in range(config.n_seed_rafts)]
    assign_rng = stream(seed, _ASSIGN)
    targets = assign_rng.choice(n_grow, size=config.n_seed_rafts, replace=False)
    by_slot = {int(g): k for k, g in enumerate(targets)}

    grow_rafts = []
    next_id = config.n_seed_rafts
    for g in range(n_grow):
        if g in by_slot:
            base = seed_rafts[by_slot[g]]
        else:
            base = make_raft(next_id, config, stream(seed, _RAFT, next_id))
            next_id += 1
        grow_rafts.append(apply_growth(base, config.match_t, config.seeding))
    return FarmDataset(config=config, seed_rafts=seed_rafts, grow_rafts=grow_rafts,
                       grow_locations=locations, assignment=[int(g) for g in targets])


# --------------------------------------------------------------------------
# appearance

def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def cell_lattice(texture_seed, lattice):
    return np.random.default_rng(texture_seed).random((lattice + 1, lattice + 1))


def raft_arrays(raft, params=SeedingParams()):
    """Pack a raft's cells into dense arrays for vectorized rendering."""
    gh, gw = raft.grid_shape
    L = params.texture_lattice
    S = max(1, max(len(c.seeds) for row in raft.cells for c in row))
    lat = np.empty((gh, gw, L + 1, L + 1))
    hole = np.empty((gh, gw, 2))
    seeds = np.zeros((gh, gw, S, 2))
    mask = np.zeros((gh, gw, S))
    radius = np.zeros((gh, gw, S))
    for i, row in enumerate(raft.cells):
        for j, c in enumerate(row):
            lat[i, j] = cell_lattice(c.texture_seed, L)
            hole[i, j] = c.hole_center
            n = len(c.seeds)
            if n:
                seeds[i, j, :n] = c.seeds
                mask[i, j, :n] = 1.0
                radius[i, j, :n] = c.plant_radius
    return {"lattice": lat, "hole": hole, "seeds": seeds, "seed_mask": mask, "radius": radius}


def _soft(edge_dist):
    return np.clip(edge_dist / EDGE_SOFTNESS + 0.5, 0.0, 1.0)


def appearance(arrs, gx, gy, show_seeds=False):
    """Noise-free intensity at raft coordinates (cell units, x right, y down)."""
    gh, gw = arrs["hole"].shape[:2]
    L = arrs["lattice"].shape[-1] - 1
    ci = np.clip(np.floor(gy).astype(np.intp), 0, gh - 1)
    cj = np.clip(np.floor(gx).astype(np.intp), 0, gw - 1)
    u = gx - cj
    v = gy - ci

    lu, lv = u * L, v * L
    a0 = np.clip(np.floor(lu).astype(np.intp), 0, L - 1)
    b0 = np.clip(np.floor(lv).astype(np.intp), 0, L - 1)
    fu, fv = _fade(lu - a0), _fade(lv - b0)
    lat = arrs["lattice"]
    top = lat[ci, cj, b0, a0] * (1 - fu) + lat[ci, cj, b0, a0 + 1] * fu
    bot = lat[ci, cj, b0 + 1, a0] * (1 - fu) + lat[ci, cj, b0 + 1, a0 + 1] * fu
    img = TEX_LO + TEX_SPAN * (top * (1 - fv) + bot * fv)

    hc = arrs["hole"][ci, cj]
    a = _soft(HOLE_RADIUS - np.hypot(u - hc[..., 0], v - hc[..., 1]))
    img = img * (1 - a) + HOLE * a

    edge = np.minimum(np.minimum(u, 1 - u), np.minimum(v, 1 - v))
    a = _soft(LINE_HALF_WIDTH - edge)
    img = img * (1 - a) + LINE * a

    seeds = arrs["seeds"][ci, cj]
    mask = arrs["seed_mask"][ci, cj]
    radius = arrs["radius"][ci, cj]
    for s in range(seeds.shape[-2]):
        d = np.hypot(u - seeds[..., s, 0], v - seeds[..., s, 1])
        if show_seeds:
            a = mask[..., s] * np.exp(-(d * d) / (2 * SEED_SIGMA**2))
            img = img * (1 - a) + SEED * a
        r = radius[..., s]
        a = np.where(r > 0, _soft(r - d), 0.0) * mask[..., s]
        img = img * (1 - a) + PLANT * a
    return img


def render_cell(raft, i, j, px, show_seeds=False, params=SeedingParams()):
    """Directly render normalized cell (i, j) at ``px`` x ``px`` pixels."""
    arrs = raft_arrays(raft, params)
    c = (np.arange(px) + 0.5) / px
    gx = j + c[None, :] + np.zeros((px, 1))
    gy = i + c[:, None] + np.zeros((1, px))
    return appearance(arrs, gx, gy, show_seeds)


def render_normalized(raft, px, show_seeds=False, params=SeedingParams()):
    """Directly render the whole normalized raft, shape (gh, gw, px, px)."""
    arrs = raft_arrays(raft, params)
    gh, gw = raft.grid_shape
    c = (np.arange(px) + 0.5) / px
    gx = np.arange(gw)[None, :, None, None] + c[None, None, None, :] + np.zeros((gh, 1, px, 1))
    gy = np.arange(gh)[:, None, None, None] + c[None, None, :, None] + np.zeros((1, gw, 1, px))
    return appearance(arrs, gx, gy, show_seeds)


# --------------------------------------------------------------------------
# rendering

def tile_shape(config, camera):
    ppc = config.seed_px_per_cell * (1.0 if camera == SEEDING else config.noise.grow_scale)
    ppc = int(round(ppc))
    return ppc, (config.grid_h + 1) * ppc, (config.grid_w + 1) * ppc


def frame_layout(config, camera):
    if camera == SEEDING:
        return 1, 1
    cols = min(5, config.rafts_per_robot)
    return math.ceil(config.rafts_per_robot / cols), cols


def _placement(config, camera, noise, origin, rng):
    """Homography from raft coordinates (cell units) into frame pixels."""
    ppc, th, tw = tile_shape(config, camera)
    scale = ppc / config.seed_px_per_cell
    gh, gw = config.grid_h, config.grid_w
    corners = np.array([[0, 0], [gw, 0], [gw, gh], [0, gh]], dtype=np.float64)
    theta = math.radians(rng.uniform(-noise.rotation_deg, noise.rotation_deg))
    center = np.array([gw, gh]) / 2.0
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    dst = (corners - center) @ rot.T * ppc
    dst += np.array([tw, th]) / 2.0 + np.asarray(origin, dtype=np.float64)
    dst += rng.normal(0.0, noise.jostle_px * scale, size=2)
    dst += rng.uniform(-noise.perspective_px, noise.perspective_px, size=(4, 2)) * scale
    return estimate_homography(corners, dst)


def render_image(rafts, camera, noise, config, rng):
    """Render one camera frame.

    ``rafts`` is a single RaftSpec for the seeding camera, or a list of
    ``rafts_per_robot`` entries (None for empty slots) for a growing robot.
    Returns ``(RawImage, keypoints)`` where keypoints maps slot -> true
    vertex pixel coordinates of shape (grid_h + 1, grid_w + 1, 2).
    """
    if camera == SEEDING:
        slots = [rafts]
        if rafts is None:
            raise ValueError("seeding camera renders exactly one raft")
    else:
        slots = list(rafts)
        if len(slots) != config.rafts_per_robot:
            raise ValueError(f"growing camera expects {config.rafts_per_robot} slots")
    ppc, th, tw = tile_shape(config, camera)
    nrows, ncols = frame_layout(config, camera)
    H, W = nrows * th, ncols * tw

    gain = 1.0 if camera == SEEDING else float(rng.uniform(*noise.gain_range))
    img = np.full((H, W), BENCH)
    gh, gw = config.grid_h, config.grid_w
    vi, vj = np.mgrid[0:gh + 1, 0:gw + 1]
    raft_vertices = np.stack([vj, vi], axis=-1).reshape(-1, 2).astype(np.float64)
    keypoints = {}
    for slot, raft in enumerate(slots):
        origin = ((slot % ncols) * tw, (slot // ncols) * th)
        h = _placement(config, camera, noise, origin, rng)
        if raft is None:
            continue
        keypoints[slot] = apply_homography(h, raft_vertices).reshape(gh + 1, gw + 1, 2)
        y0, x0 = origin[1], origin[0]
        ys, xs = np.mgrid[y0:y0 + th, x0:x0 + tw]
        pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
        g = apply_homography(np.linalg.inv(h), pts)
        inside = (g[:, 0] >= 0) & (g[:, 0] < gw) & (g[:, 1] >= 0) & (g[:, 1] < gh)
        vals = appearance(raft_arrays(raft, config.seeding), g[inside, 0], g[inside, 1],
                          show_seeds=(camera == SEEDING))
        tile = img[y0:y0 + th, x0:x0 + tw].reshape(-1)
        tile[inside] = vals
        img[y0:y0 + th, x0:x0 + tw] = tile.reshape(th, tw)

    img = img * gain
    if noise.pixel_sigma > 0:
        img = img + rng.normal(0.0, noise.pixel_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return RawImage(pixels=img, width=W, height=H, camera_id=camera), keypoints


def noisy_keypoints(vertices, sigma, rng):
    """Stand-in for a keypoint detector: truth plus isotropic Gaussian error.

    Each vertex error is capped at 3 sigma; a real detector does not jump
    across a cell, and an uncapped tail can fold a cell quad over.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if sigma <= 0:
        return vertices.copy()
    err = rng.normal(0.0, sigma, size=vertices.shape)
    norm = np.linalg.norm(err, axis=-1, keepdims=True)
    err *= np.minimum(1.0, 3 * sigma / np.maximum(norm, 1e-300))
    return vertices + err


def render_seeding(dataset, k, noise=None):
    """Seeding-camera image of seeding raft ``k`` plus detected vertices."""
    config = dataset.config
    noise = config.noise if noise is None else noise
    seed = config.rng_seed
    img, kp = render_image(dataset.seed_rafts[k], SEEDING, noise, config,
                           stream(seed, _RENDER, _CAMERA_CODE[SEEDING], k))
    det = noisy_keypoints(kp[0], noise.keypoint_sigma,
                          stream(seed, _KEYPOINTS, _CAMERA_CODE[SEEDING], k))
    return img, kp, {0: det}


def render_growing(dataset, robot, noise=None, t=None):
    """Growing-robot frame plus true and detected vertices per occupied slot.

    ``t`` re-renders the robot's rafts at another growth time; placement and
    detected vertices are unchanged (the robot and its bench are stationary).
    """
    config = dataset.config
    noise = config.noise if noise is None else noise
    seed = config.rng_seed
    slots = [None] * config.rafts_per_robot
    for slot, g in dataset.robot_slots(robot).items():
        raft = dataset.grow_rafts[g]
        if t is not None:
            raft = apply_growth(_at_zero(raft), t, config.seeding)
        slots[slot] = raft
    rng = stream(seed, _RENDER, _CAMERA_CODE[GROWING], robot)
    if t is not None:
        # same placement draws, fresh pixel noise per frame
        img, kp = _render_with_frame_noise(slots, noise, config, rng, robot, t)
    else:
        img, kp = render_image(slots, GROWING, noise, config, rng)
    krng = stream(seed, _KEYPOINTS, _CAMERA_CODE[GROWING], robot)
    det = {slot: noisy_keypoints(kp[slot], noise.keypoint_sigma, krng) for slot in sorted(kp)}
    return img, kp, det


def _at_zero(raft):
    return replace(raft, growth_t=0, cells=[[replace(c, plant_radius=[0.0] * len(c.seeds))
                                             for c in row] for row in raft.cells])


def _render_with_frame_noise(slots, noise, config, rng, robot, t):
    quiet = replace(noise, pixel_sigma=0.0)
    img, kp = render_image(slots, GROWING, quiet, config, rng)
    if noise.pixel_sigma > 0:
        frng = stream(config.rng_seed, _RENDER, 100 + t, robot)
        px = np.clip(img.pixels + frng.normal(0.0, noise.pixel_sigma, size=img.pixels.shape), 0, 1)
        img = replace(img, pixels=px)
    return img, kp


# --------------------------------------------------------------------------
# persistence

def write_pgm(path, pixels):
    """16-bit binary PGM."""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return data.astype(np.float64) / maxval


def save_dataset(dataset, directory):
    """Write farm.json, images/*.pgm and keypoints.csv; returns image paths."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "farm.json"), "w") as f:
        f.write(dataset.to_json())
    rows = []
    for k in range(len(dataset.seed_rafts)):
        img, true_kp, det = render_seeding(dataset, k)
        name = f"seeding_{k:04d}.pgm"
        write_pgm(os.path.join(directory, "images", name), img.pixels)
        rows.extend(_keypoint_rows(name, true_kp, det))
    for robot in range(dataset.config.n_grow_robots):
        img, true_kp, det = render_growing(dataset, robot)
        name = f"growing_{robot:04d}.pgm"
        write_pgm(os.path.join(directory, "images", name), img.pixels)
        rows.extend(_keypoint_rows(name, true_kp, det))
    with open(os.path.join(directory, "keypoints.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "slot", "row", "col", "x_true", "y_true", "x_det", "y_det"])
        w.writerows(rows)


def _keypoint_rows(name, true_kp, det):
    rows = []
    for slot in sorted(true_kp):
        t, d = true_kp[slot], det[slot]
        for r in range(t.shape[0]):
            for c in range(t.shape[1]):
                rows.append([name, slot, r, c, f"{t[r, c, 0]:.6f}", f"{t[r, c, 1]:.6f}",
                             f"{d[r, c, 0]:.6f}", f"{d[r, c, 1]:.6f}"])
    return rows


def load_dataset(directory):
    """Read a dataset directory back.

    Returns ``(dataset, images, detected)`` where ``images`` maps file name to
    pixel arrays and ``detected`` maps (file name, slot) to vertex grids.
    """
    path = os.path.join(directory, "farm.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset at {directory} (missing farm.json)")
    with open(path) as f:
        dataset = FarmDataset.from_json(f.read())
    gh, gw = dataset.config.grid_h, dataset.config.grid_w
    detected = {}
    with open(os.path.join(directory, "keypoints.csv"), newline="") as f:
        for row in csv.DictReader(f):
            key = (row["image"], int(row["slot"]))
            grid = detected.setdefault(key, np.zeros((gh + 1, gw + 1, 2)))
            grid[int(row["row"]), int(row["col"])] = (float(row["x_det"]), float(row["y_det"]))
    images = {}
    for name in sorted({k[0] for k in detected}):
        images[name] = read_pgm(os.path.join(directory, "images", name))
    return dataset, images, detected
