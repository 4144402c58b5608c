"""Alignment of raw camera frames into normalized rafts, and patch sampling.

Each dirt cell is warped independently: its four detected vertices define a
quad, a 4-point DLT homography maps the quad onto a square, and the square is
filled by inverse mapping with bilinear sampling.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .kernels import bilinear_sample


class GeometryError(ValueError):
    pass


class DegenerateQuad(GeometryError):
    pass


class AlignmentFailure(GeometryError):
    def __init__(self, cell, reason):
        super().__init__(f"cell {cell}: {reason}")
        self.cell = cell


class InsufficientCells(GeometryError):
    pass


def _quad_cross(q):
    e = np.roll(q, -1, axis=-2) - q
    en = np.roll(e, -1, axis=-2)
    cross = e[..., 0] * en[..., 1] - e[..., 1] * en[..., 0]
    lengths = np.linalg.norm(e, axis=-1)
    return cross, lengths * np.roll(lengths, -1, axis=-1)


def quad_problems(quads):
    """Per-quad failure reason (None when valid) for a (..., 4, 2) stack."""
    q = np.asarray(quads, dtype=np.float64)
    cross, scale = _quad_cross(q)
    collinear = np.any(np.abs(cross) <= 1e-12 * np.maximum(scale, 1e-300), axis=-1)
    flipped = np.any(cross < 0, axis=-1)
    bad = ~np.all(np.isfinite(q), axis=(-2, -1))
    reasons = np.full(q.shape[:-2], None, dtype=object)
    reasons[flipped] = "quad is not convex with positive orientation (TL, TR, BR, BL)"
    reasons[collinear] = "three corners are collinear"
    reasons[bad] = "non-finite corner"
    return reasons


def validate_quad(quad):
    """Check a TL, TR, BR, BL quad is convex with positive signed area.

    Pixel coordinates have y pointing down, so this ordering is clockwise on
    screen and every consecutive edge pair has a positive cross product.
    """
    q = np.asarray(quad, dtype=np.float64)
    if q.shape != (4, 2):
        raise DegenerateQuad(f"quad must be 4 (x, y) points, got shape {q.shape}")
    reason = quad_problems(q)[()]
    if reason is not None:
        raise DegenerateQuad(reason)
    return q


def _conditioners(pts):
    c = pts.mean(axis=-2)
    d = np.mean(np.linalg.norm(pts - c[..., None, :], axis=-1), axis=-1)
    s = np.sqrt(2.0) / d
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0]
    t[..., 1, 2] = -s * c[..., 1]
    t[..., 2, 2] = 1.0
    return t


def estimate_homographies(src, dst):
    """Batched DLT over (N, 4, 2) quad stacks; inputs are assumed valid."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ts, td = _conditioners(src), _conditioners(dst)
    ones = np.ones(src.shape[:-1] + (1,))
    hs = np.concatenate([src, ones], axis=-1) @ np.swapaxes(ts, -1, -2)
    hd = np.concatenate([dst, ones], axis=-1) @ np.swapaxes(td, -1, -2)
    x, y = hs[..., 0], hs[..., 1]
    u, v = hd[..., 0], hd[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=-1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=-1)
    A = np.stack([r1, r2], axis=-2).reshape(src.shape[:-2] + (8, 9))
    _, _, vt = np.linalg.svd(A)
    hn = vt[..., -1, :].reshape(src.shape[:-2] + (3, 3))
    h = np.linalg.solve(td, hn @ ts)
    corner = h[..., 2:3, 2:3]
    return np.where(np.abs(corner) > 0, h / np.where(corner == 0, 1.0, corner), h)


def estimate_homography(src, dst):
    """4-point DLT with Hartley conditioning; maps ``src`` corners onto ``dst``.

    The returned 3x3 matrix is scaled so that ``H[2, 2] == 1``.
    """
    src = validate_quad(src)
    dst = validate_quad(dst)
    h = estimate_homographies(src[None], dst[None])[0]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateQuad("homography is singular")
    return h


def apply_homography(h, pts):
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ h[:, :2].T + h[:, 2]
    return hom[..., :2] / hom[..., 2:3]


def _pixels(img):
    return img.pixels if hasattr(img, "pixels") else np.asarray(img, dtype=np.float64)


def warp_cell(img, h, out_px):
    """Fill an output grid by inverse-mapping its pixel centers through ``h``.

    ``h`` maps source-image coordinates to output coordinates.  ``out_px``
    is an int (square output) or an ``(height, width)`` pair.
    """
    oh, ow = (out_px, out_px) if np.isscalar(out_px) else out_px
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    src = apply_homography(np.linalg.inv(h), pts)
    return bilinear_sample(_pixels(img), src[:, 0], src[:, 1]).reshape(oh, ow)


@dataclass
class NormalizedRaft:
    cells: np.ndarray          # (grid_h, grid_w, cell_px, cell_px)
    raft_id: object = None

    @property
    def grid_shape(self):
        return self.cells.shape[:2]

    @property
    def cell_px(self):
        return self.cells.shape[2]

    def mosaic(self):
        gh, gw, p, _ = self.cells.shape
        return self.cells.transpose(0, 2, 1, 3).reshape(gh * p, gw * p)


def cell_quads(vertices):
    """(gh+1, gw+1, 2) vertex grid -> (gh, gw, 4, 2) TL, TR, BR, BL quads."""
    v = np.asarray(vertices, dtype=np.float64)
    return np.stack([v[:-1, :-1], v[:-1, 1:], v[1:, 1:], v[1:, :-1]], axis=2)


def normalize_raft(img, vertices, cell_px, raft_id=None):
    """Warp every cell of a raft into a ``cell_px`` square and reassemble."""
    quads = cell_quads(vertices)
    gh, gw = quads.shape[:2]
    square = np.array([[0, 0], [cell_px, 0], [cell_px, cell_px], [0, cell_px]], dtype=np.float64)
    flat = quads.reshape(-1, 4, 2)
    reasons = quad_problems(flat)
    for k, reason in enumerate(reasons):
        if reason is not None:
            raise AlignmentFailure((k // gw, k % gw), reason)
    inv = estimate_homographies(np.broadcast_to(square, flat.shape), flat)
    ys, xs = np.mgrid[0:cell_px, 0:cell_px]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5, np.ones(cell_px * cell_px)], axis=1)
    hom = np.einsum("kab,nb->kna", inv, pts)
    src = hom[..., :2] / hom[..., 2:3]
    vals = bilinear_sample(_pixels(img), src[..., 0].ravel(), src[..., 1].ravel())
    return NormalizedRaft(cells=vals.reshape(gh, gw, cell_px, cell_px), raft_id=raft_id)


def refine_vertices(img, vertices, window=4, sigma=1.5):
    """Snap noisy vertices to the nearest grid-line crossing.

    Two dark lines cross at each vertex, so the crossing is the darkest point
    of the smoothed image nearby.  Each vertex moves to that minimum within
    ``window`` pixels, refined to sub-pixel accuracy by a quadratic fit on
    the 3x3 neighbourhood.
    """
    from scipy import ndimage

    resp = -ndimage.gaussian_filter(_pixels(img), sigma, mode="nearest")
    h, w = resp.shape
    out = np.array(vertices, dtype=np.float64, copy=True)
    flat = out.reshape(-1, 2)
    for n, (x, y) in enumerate(flat):
        c0, r0 = int(np.floor(x)), int(np.floor(y))
        r_lo, r_hi = max(r0 - window, 1), min(r0 + window + 1, h - 1)
        c_lo, c_hi = max(c0 - window, 1), min(c0 + window + 1, w - 1)
        if r_lo >= r_hi or c_lo >= c_hi:
            continue
        patch = resp[r_lo:r_hi, c_lo:c_hi]
        r, c = np.unravel_index(np.argmax(patch), patch.shape)
        r, c = r + r_lo, c + c_lo
        dx = _parabola_peak(resp[r, c - 1], resp[r, c], resp[r, c + 1])
        dy = _parabola_peak(resp[r - 1, c], resp[r, c], resp[r + 1, c])
        flat[n] = (c + 0.5 + dx, r + 0.5 + dy)
    return out


def _parabola_peak(a, b, c):
    denom = a - 2 * b + c
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


@dataclass
class PatchSet:
    patches: np.ndarray     # (P, patch_px, patch_px)
    locations: np.ndarray   # (P, 3) int: cell index, y offset, x offset

    def __len__(self):
        return len(self.patches)


def patch_offsets(cell_px, patch_px, offset_step=2):
    if patch_px > cell_px:
        raise GeometryError(f"patch of {patch_px}px does not fit a {cell_px}px cell")
    if offset_step <= 0:
        return np.array([0])
    return np.arange(0, cell_px - patch_px + 1, offset_step)


def sample_locations(grid_shape, P, rng, cell_px, patch_px, offset_step=2):
    """Draw P distinct cells uniformly, each with a random sub-offset."""
    n_cells = int(np.prod(grid_shape))
    if P < 1:
        raise ValueError("P must be >= 1")
    if P > n_cells:
        raise InsufficientCells(f"P={P} exceeds the {n_cells} available cells")
    offs = patch_offsets(cell_px, patch_px, offset_step)
    cells = rng.choice(n_cells, size=P, replace=False)
    oy = offs[rng.integers(0, len(offs), size=P)]
    ox = offs[rng.integers(0, len(offs), size=P)]
    return np.stack([cells, oy, ox], axis=1).astype(np.int64)


def extract_patches(raft, locations, patch_px):
    cells = raft.cells.reshape(-1, raft.cell_px, raft.cell_px)
    loc = np.asarray(locations)
    rows = loc[:, 1, None] + np.arange(patch_px)[None, :]
    cols = loc[:, 2, None] + np.arange(patch_px)[None, :]
    return cells[loc[:, 0, None, None], rows[:, :, None], cols[:, None, :]]


def sample_patches(raft, P, rng, patch_px=12, offset_step=2, locations=None):
    """Sample a patch ensemble; pass ``locations`` to reuse a paired raft's."""
    if locations is None:
        locations = sample_locations(raft.grid_shape, P, rng, raft.cell_px, patch_px, offset_step)
    return PatchSet(patches=extract_patches(raft, locations, patch_px),
                    locations=np.asarray(locations))


def save_normalized(rafts, directory):
    """PGM mosaic per raft plus a raft_meta.json index."""
    from .synthfarm import write_pgm

    os.makedirs(directory, exist_ok=True)
    meta = []
    for n, raft in enumerate(rafts):
        name = f"raft_{n:04d}.pgm"
        write_pgm(os.path.join(directory, name), raft.mosaic())
        gh, gw = raft.grid_shape
        meta.append({"file": name, "grid_h": int(gh), "grid_w": int(gw),
                     "cell_px": int(raft.cell_px), "raft_id": raft.raft_id})
    with open(os.path.join(directory, "raft_meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_normalized(directory):
    from .synthfarm import read_pgm

    with open(os.path.join(directory, "raft_meta.json")) as f:
        meta = json.load(f)
    out = []
    for m in meta:
        img = read_pgm(os.path.join(directory, m["file"]))
        gh, gw, p = m["grid_h"], m["grid_w"], m["cell_px"]
        cells = img.reshape(gh, p, gw, p).transpose(0, 2, 1, 3)
        out.append(NormalizedRaft(cells=np.ascontiguousarray(cells), raft_id=m["raft_id"]))
    return out
