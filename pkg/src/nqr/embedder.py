"""Patch encoder, ensemble heads and triplet-loss training.

The seeding and growing sides have separate weights of identical shape.
Each side encodes every patch with a small strided convolution stack into a
``d_patch`` feature; the P features are stacked in sampling order and a
linear head per output dimension maps the stack to an L2-normalized
embedding.  Gradients are written out by hand.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import PatchSet, extract_patches, patch_offsets, sample_locations

SIDES = ("seeding", "growing")
NEGATIVE_CLASSES = ("same-raft-cells", "same-robot", "any")
NEGATIVE_MIX = (0.4, 0.4, 0.2)
_EPS = 1e-12


class ParamShapeError(ValueError):
    pass


class EmptyClass(LookupError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EmbedderParams:
    weights: dict               # side -> {name: array}
    n_patches: int
    patch_px: int
    d_patch: int
    head_dims: tuple
    channels: tuple = (8, 16)
    version: int = 1
    meta: dict = field(default_factory=dict)

    def copy(self):
        return EmbedderParams(
            weights={s: {k: v.copy() for k, v in w.items()} for s, w in self.weights.items()},
            n_patches=self.n_patches, patch_px=self.patch_px, d_patch=self.d_patch,
            head_dims=tuple(self.head_dims), channels=tuple(self.channels),
            version=self.version, meta=dict(self.meta))

    def arrays(self):
        """(side, name, array) in a fixed order."""
        for side in SIDES:
            for name in sorted(self.weights[side]):
                yield side, name, self.weights[side][name]


@dataclass
class Embedding:
    values: np.ndarray
    dim: int
    source: tuple = ()          # (robot id, raft slot, pass index)
    patch_features: np.ndarray | None = None


def _conv_out(n):
    return (n + 2 - 3) // 2 + 1


def init_params(rng, n_patches, patch_px=12, d_patch=32, head_dims=(16, 128), channels=(8, 16)):
    c1, c2 = channels
    o2 = _conv_out(_conv_out(patch_px))
    flat = o2 * o2 * c2
    weights = {}
    for side in SIDES:
        w = {
            "conv1_w": rng.normal(0, math.sqrt(2.0 / 9), (3, 3, 1, c1)),
            "conv1_b": np.zeros(c1),
            "conv2_w": rng.normal(0, math.sqrt(2.0 / (9 * c1)), (3, 3, c1, c2)),
            "conv2_b": np.zeros(c2),
            "proj_w": rng.normal(0, math.sqrt(1.0 / flat), (flat, d_patch)),
            "proj_b": np.zeros(d_patch),
        }
        for F in head_dims:
            w[f"head{F}_w"] = rng.normal(0, math.sqrt(1.0 / (n_patches * d_patch)),
                                         (n_patches * d_patch, F))
            w[f"head{F}_b"] = np.zeros(F)
        weights[side] = w
    return EmbedderParams(weights=weights, n_patches=n_patches, patch_px=patch_px,
                          d_patch=d_patch, head_dims=tuple(head_dims), channels=tuple(channels))


# --------------------------------------------------------------------------
# layers

def _standardize(patches):
    x = np.asarray(patches, dtype=np.float64)
    m = x.mean(axis=(1, 2), keepdims=True)
    s = x.std(axis=(1, 2), keepdims=True)
    return (x - m) / (s + 1e-3)


def _im2col(x):
    """3x3 kernel, stride 2, pad 1, NHWC input -> (N*o*o, 9*C) columns."""
    n, h, w, c = x.shape
    o = _conv_out(h)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, o, o, 3, 3, c))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + 2 * o:2, kx:kx + 2 * o:2, :]
    return cols.reshape(n * o * o, 9 * c), o


def _col2im(dcols, shape):
    n, h, w, c = shape
    o = _conv_out(h)
    dcols = dcols.reshape(n, o, o, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + 2 * o:2, kx:kx + 2 * o:2, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _encode(w, patches, keep=False):
    x0 = _standardize(patches)[..., None]
    n = x0.shape[0]
    cols1, o1 = _im2col(x0)
    h1 = cols1 @ w["conv1_w"].reshape(-1, w["conv1_w"].shape[-1]) + w["conv1_b"]
    a1 = np.maximum(h1, 0.0).reshape(n, o1, o1, -1)
    cols2, o2 = _im2col(a1)
    h2 = cols2 @ w["conv2_w"].reshape(-1, w["conv2_w"].shape[-1]) + w["conv2_b"]
    flat = np.maximum(h2, 0.0).reshape(n, -1)
    z = flat @ w["proj_w"] + w["proj_b"]
    if not keep:
        return z
    return z, dict(cols1=cols1, h1=h1, a1_shape=a1.shape, cols2=cols2, h2=h2, flat=flat)


def _encode_backward(w, cache, dz):
    g = {}
    g["proj_w"] = cache["flat"].T @ dz
    g["proj_b"] = dz.sum(axis=0)
    dh2 = (dz @ w["proj_w"].T).reshape(cache["h2"].shape) * (cache["h2"] > 0)
    g["conv2_w"] = (cache["cols2"].T @ dh2).reshape(w["conv2_w"].shape)
    g["conv2_b"] = dh2.sum(axis=0)
    da1 = _col2im(dh2 @ w["conv2_w"].reshape(-1, w["conv2_w"].shape[-1]).T, cache["a1_shape"])
    dh1 = da1.reshape(cache["h1"].shape) * (cache["h1"] > 0)
    g["conv1_w"] = (cache["cols1"].T @ dh1).reshape(w["conv1_w"].shape)
    g["conv1_b"] = dh1.sum(axis=0)
    return g


def _normalize(e):
    r = np.sqrt(np.sum(e * e, axis=-1, keepdims=True))
    return e / np.maximum(r, _EPS), r


def _normalize_backward(f, r, df):
    return (df - f * np.sum(f * df, axis=-1, keepdims=True)) / np.maximum(r, _EPS)


def encode_patches(params, side, patches):
    """Per-patch features, shape (N, d_patch), for an (N, p, p) stack."""
    patches = np.asarray(patches)
    if patches.shape[-2:] != (params.patch_px, params.patch_px):
        raise ParamShapeError(
            f"patches are {patches.shape[-2:]}, encoder expects {params.patch_px}px")
    return _encode(params.weights[side], patches.reshape(-1, params.patch_px, params.patch_px))


def apply_head(params, side, stacked, dim):
    """(B, P, d_patch) stacked features -> (B, dim) unit embeddings."""
    if dim not in params.head_dims:
        raise ParamShapeError(f"no {dim}-d head; available: {params.head_dims}")
    stacked = np.asarray(stacked)
    if stacked.shape[-2:] != (params.n_patches, params.d_patch):
        raise ParamShapeError(
            f"head expects {params.n_patches} x {params.d_patch} features, got {stacked.shape[-2:]}")
    w = params.weights[side]
    e = stacked.reshape(len(stacked), -1) @ w[f"head{dim}_w"] + w[f"head{dim}_b"]
    return _normalize(e)[0]


def embed(params, patches, dim, side="growing", source=()):
    """Embed one PatchSet (or a raw (P, p, p) stack)."""
    arr = patches.patches if hasattr(patches, "patches") else np.asarray(patches)
    if arr.ndim != 3 or len(arr) != params.n_patches:
        raise ParamShapeError(
            f"ensemble head was built for P={params.n_patches}, got {arr.shape[:1]} patches")
    z = encode_patches(params, side, arr)
    f = apply_head(params, side, z[None], dim)[0]
    return Embedding(values=f, dim=dim, source=tuple(source), patch_features=z)


def feature_bank(params, side, raft, offset_step=2):
    """Encoder features for every (cell, y offset, x offset) of a raft."""
    offs = patch_offsets(raft.cell_px, params.patch_px, offset_step)
    p = params.patch_px
    cells = raft.cells.reshape(-1, raft.cell_px, raft.cell_px)
    rows = offs[:, None] + np.arange(p)[None, :]
    patches = cells[:, rows[:, None, :, None], rows[None, :, None, :]]
    n, k = cells.shape[0], len(offs)
    z = encode_patches(params, side, patches.reshape(-1, p, p))
    return z.reshape(n, k, k, params.d_patch)


def bank_lookup(bank, locations, offset_step=2):
    loc = np.asarray(locations)
    step = max(offset_step, 1)
    return bank[loc[..., 0], loc[..., 1] // step, loc[..., 2] // step]


# --------------------------------------------------------------------------
# losses

def triplet_loss(d_pos, d_neg, alpha):
    """Hinge on the margin between positive and negative distances."""
    return np.maximum(np.asarray(d_pos) - np.asarray(d_neg) + alpha, 0.0)


def _triplet_terms(fa, fp, fn, alpha):
    dpv, dnv = fa - fp, fa - fn
    dp = np.sqrt(np.sum(dpv * dpv, axis=-1))
    dn = np.sqrt(np.sum(dnv * dnv, axis=-1))
    loss = triplet_loss(dp, dn, alpha)
    m = (loss > 0).astype(np.float64)[..., None]
    gp = dpv / np.maximum(dp, _EPS)[..., None]
    gn = dnv / np.maximum(dn, _EPS)[..., None]
    return loss, m * (gp - gn), -m * gp, m * gn, dp, dn


@dataclass
class Triplet:
    anchor: object              # PatchSet from the seeding raft
    positive: object            # PatchSet from its growing match
    negative: object            # PatchSet from a growing raft or other cells
    negative_class: str
    anchor_raft: int = -1
    negative_raft: int = -1


@dataclass
class TripletBatch:
    anchor: np.ndarray          # (B, P, p, p)
    positive: np.ndarray
    negative: np.ndarray
    classes: list


def loss_and_grads(params, batch, alpha=0.2, lam=1.0, need_grads=True):
    """Total loss = sum over heads of image-level triplet loss + lam * patch-level."""
    B, P = batch.anchor.shape[:2]
    p = params.patch_px
    ws, wg = params.weights["seeding"], params.weights["growing"]
    za, ca = _encode(ws, batch.anchor.reshape(-1, p, p), keep=True)
    zg, cg = _encode(wg, np.concatenate([batch.positive, batch.negative]).reshape(-1, p, p),
                     keep=True)
    zp, zn = zg[:B * P], zg[B * P:]

    dza = np.zeros_like(za)
    dzg = np.zeros_like(zg)
    grads = {"seeding": {}, "growing": {}}
    parts = {}
    total = 0.0

    for F in params.head_dims:
        hw, hb = f"head{F}_w", f"head{F}_b"
        sa = za.reshape(B, -1)
        sg = zg.reshape(2 * B, -1)
        ea = sa @ ws[hw] + ws[hb]
        eg = sg @ wg[hw] + wg[hb]
        fa, ra = _normalize(ea)
        fg, rg = _normalize(eg)
        loss, dfa, dfp, dfn, _, _ = _triplet_terms(fa, fg[:B], fg[B:], alpha)
        le = loss.mean()
        parts[f"LE{F}"] = le
        total += le
        if need_grads:
            dea = _normalize_backward(fa, ra, dfa / B)
            deg = _normalize_backward(fg, rg, np.concatenate([dfp, dfn]) / B)
            grads["seeding"][hw] = sa.T @ dea
            grads["seeding"][hb] = dea.sum(axis=0)
            grads["growing"][hw] = sg.T @ deg
            grads["growing"][hb] = deg.sum(axis=0)
            dza += (dea @ ws[hw].T).reshape(za.shape)
            dzg += (deg @ wg[hw].T).reshape(zg.shape)

    if lam:
        na, rna = _normalize(za)
        ng, rng_ = _normalize(zg)
        loss, dna, dnp, dnn, _, _ = _triplet_terms(na, ng[:B * P], ng[B * P:], alpha)
        lp = loss.mean()
        parts["LP"] = lp
        total += lam * lp
        if need_grads:
            scale = lam / (B * P)
            dza += _normalize_backward(na, rna, dna * scale)
            dzg += _normalize_backward(ng, rng_, np.concatenate([dnp, dnn]) * scale)

    if need_grads:
        grads["seeding"].update(_encode_backward(ws, ca, dza))
        grads["growing"].update(_encode_backward(wg, cg, dzg))
    parts["total"] = total
    return total, grads, parts


# --------------------------------------------------------------------------
# triplet sampling

def _class_candidates(data, pos):
    robot = data.grow_locations[pos][0]
    same_robot = [g for g, (r, _) in enumerate(data.grow_locations) if r == robot and g != pos]
    other = [g for g, (r, _) in enumerate(data.grow_locations) if r != robot]
    return same_robot, other


def class_weights(n_same_robot, n_other, mix=NEGATIVE_MIX):
    """Class probabilities after folding empty classes into the rest."""
    w = np.array([mix[0], mix[1] if n_same_robot else 0.0, mix[2] if n_other else 0.0])
    return w / w.sum()


def sample_triplets(data, batch_size, rng, P, patch_px=12, offset_step=2, mix=NEGATIVE_MIX):
    """Hard-negative triplets from a prepared farm.

    ``same-raft-cells`` negatives come from the positive raft at a fresh set
    of cell locations; ``same-robot`` from another raft on the positive's
    robot; ``any`` from a raft on a different robot.  A class with no
    candidates has its probability spread proportionally over the others.
    """
    if not data.seed:
        raise EmptyClass("no seeding rafts to anchor triplets")
    grid = data.seed[0].grid_shape
    cell_px = data.seed[0].cell_px
    cache = {}
    out = []
    for _ in range(batch_size):
        k = int(rng.integers(len(data.seed)))
        pos = data.assignment[k]
        if pos not in cache:
            cache[pos] = _class_candidates(data, pos)
        same_robot, other = cache[pos]
        w = class_weights(len(same_robot), len(other), mix)
        cls = NEGATIVE_CLASSES[int(rng.choice(3, p=w))]
        loc = sample_locations(grid, P, rng, cell_px, patch_px, offset_step)
        neg_loc = loc
        if cls == "same-raft-cells":
            neg = pos
            neg_loc = sample_locations(grid, P, rng, cell_px, patch_px, offset_step)
            while np.array_equal(neg_loc, loc):
                neg_loc = sample_locations(grid, P, rng, cell_px, patch_px, offset_step)
        elif cls == "same-robot":
            neg = same_robot[int(rng.integers(len(same_robot)))]
        else:
            neg = other[int(rng.integers(len(other)))]
        out.append(Triplet(
            anchor=PatchSet(extract_patches(data.seed[k], loc, patch_px), loc),
            positive=PatchSet(extract_patches(data.grow[pos], loc, patch_px), loc),
            negative=PatchSet(extract_patches(data.grow[neg], neg_loc, patch_px), neg_loc),
            negative_class=cls,
            anchor_raft=data.seed_ids[k],
            negative_raft=data.grow_ids[neg],
        ))
    return out


def stack_triplets(triplets):
    return TripletBatch(
        anchor=np.stack([t.anchor.patches for t in triplets]),
        positive=np.stack([t.positive.patches for t in triplets]),
        negative=np.stack([t.negative.patches for t in triplets]),
        classes=[t.negative_class for t in triplets],
    )


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 100
    batch: int = 16
    lr: float = 2e-3
    alpha: float = 0.2
    lam: float = 1.0
    offset_step: int = 2


def train(params, data, epochs, alpha, lr, rng, batch=16, steps_per_epoch=100, lam=1.0,
          offset_step=2, log=None):
    """Adam on the total triplet loss; returns (new params, per-epoch mean loss)."""
    params = params.copy()
    moments = {(s, n): (np.zeros_like(a), np.zeros_like(a)) for s, n, a in params.arrays()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    curve = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            trip = sample_triplets(data, batch, rng, params.n_patches, params.patch_px, offset_step)
            loss, grads, parts = loss_and_grads(params, stack_triplets(trip), alpha, lam)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    + ", ".join(f"{k}={v:.4g}" for k, v in parts.items()))
            step += 1
            if lr:
                for side, name, arr in params.arrays():
                    g = grads[side][name]
                    m, v = moments[(side, name)]
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    mhat = m / (1 - b1**step)
                    vhat = v / (1 - b2**step)
                    arr -= lr * mhat / (np.sqrt(vhat) + eps)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {curve[-1]:.4f}")
    params.meta.update(dict(alpha=alpha, lr=lr, lam=lam, batch=batch, epochs=epochs,
                            steps_per_epoch=steps_per_epoch))
    return params, curve


# --------------------------------------------------------------------------
# persistence

_MAGIC = b"NQRP"


def save_params(params, path):
    """Magic, u32 version, u32 header length, JSON header, little-endian f64 payload."""
    entries = []
    chunks = []
    offset = 0
    for side, name, arr in params.arrays():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"side": side, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({
        "version": params.version, "n_patches": params.n_patches, "patch_px": params.patch_px,
        "d_patch": params.d_patch, "head_dims": list(params.head_dims),
        "channels": list(params.channels), "arrays": entries, "meta": params.meta,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", params.version, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_params(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an embedder params file")
    version, hlen = struct.unpack("<II", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    weights = {s: {} for s in SIDES}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=base + e["offset"])
        weights[e["side"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return EmbedderParams(weights=weights, n_patches=header["n_patches"],
                          patch_px=header["patch_px"], d_patch=header["d_patch"],
                          head_dims=tuple(header["head_dims"]), channels=tuple(header["channels"]),
                          version=version, meta=header.get("meta", {}))
