"""Turn a farm dataset into normalized rafts, the way each robot would."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .geometry import load_normalized, normalize_raft, refine_vertices, save_normalized
from .synthfarm import render_growing, render_seeding


@dataclass
class PreparedFarm:
    seed: list                  # NormalizedRaft per seeding raft (queries)
    grow: list                  # NormalizedRaft per growing raft (candidates)
    grow_locations: list        # (robot, slot) per growing raft
    assignment: list            # seeding index -> growing index
    seed_ids: list
    grow_ids: list

    @property
    def n_candidates(self):
        return len(self.grow)


def _seed_frame(dataset, k, images, detected):
    if images is None:
        img, _, det = render_seeding(dataset, k)
        return img, det[0]
    name = f"seeding_{k:04d}.pgm"
    return images[name], detected[(name, 0)]


def _grow_frame(dataset, robot, images, detected):
    if images is None:
        img, _, det = render_growing(dataset, robot)
        return img, det
    name = f"growing_{robot:04d}.pgm"
    return images[name], {slot: v for (n, slot), v in detected.items() if n == name}


def prepare_farm(dataset, cell_px=None, refine=False, images=None, detected=None):
    """Normalize every seeding and growing raft of ``dataset``.

    Frames are rendered on the fly unless ``images``/``detected`` (as
    returned by ``load_dataset``) are supplied.
    """
    config = dataset.config
    cell_px = config.cell_px if cell_px is None else cell_px
    seed = []
    for k, raft in enumerate(dataset.seed_rafts):
        img, verts = _seed_frame(dataset, k, images, detected)
        if refine:
            verts = refine_vertices(img, verts)
        seed.append(normalize_raft(img, verts, cell_px, raft_id=raft.raft_id))
    grow = [None] * len(dataset.grow_rafts)
    for robot in range(config.n_grow_robots):
        slots = dataset.robot_slots(robot)
        if not slots:
            continue
        img, det = _grow_frame(dataset, robot, images, detected)
        for slot, g in slots.items():
            verts = det[slot]
            if refine:
                verts = refine_vertices(img, verts)
            grow[g] = normalize_raft(img, verts, cell_px, raft_id=dataset.grow_rafts[g].raft_id)
    return PreparedFarm(
        seed=seed, grow=grow, grow_locations=list(dataset.grow_locations),
        assignment=list(dataset.assignment),
        seed_ids=[r.raft_id for r in dataset.seed_rafts],
        grow_ids=[r.raft_id for r in dataset.grow_rafts],
    )


def save_prepared(data, directory):
    """Normalized rafts under seeding/ and growing/ plus the correspondence index."""
    os.makedirs(directory, exist_ok=True)
    save_normalized(data.seed, os.path.join(directory, "seeding"))
    save_normalized(data.grow, os.path.join(directory, "growing"))
    index = {"grow_locations": [list(x) for x in data.grow_locations],
             "assignment": list(data.assignment),
             "seed_ids": list(data.seed_ids), "grow_ids": list(data.grow_ids)}
    with open(os.path.join(directory, "prepared.json"), "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def load_prepared(directory):
    with open(os.path.join(directory, "prepared.json")) as f:
        index = json.load(f)
    return PreparedFarm(
        seed=load_normalized(os.path.join(directory, "seeding")),
        grow=load_normalized(os.path.join(directory, "growing")),
        grow_locations=[tuple(x) for x in index["grow_locations"]],
        assignment=index["assignment"], seed_ids=index["seed_ids"], grow_ids=index["grow_ids"],
    )
