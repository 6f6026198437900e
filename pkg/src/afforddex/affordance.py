"""Ground-truth affordance maps from groups of grasps sharing one guidance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .blobs import read_blob, write_blob
from .geometry import InvalidInputError
from .hand import GraspPose, HandModel, PosedHand, forward_kinematics

DEFAULT_D_MAX = 0.02
DEFAULT_K = 16


@dataclass
class GraspGroup:
    scene_id: str
    guidance: dict  # GuidanceRecord fields (category, intention, part, direction)
    grasps: list[GraspPose]

    def __post_init__(self):
        if not self.grasps:
            raise InvalidInputError("a grasp group needs at least one grasp")


@dataclass
class AffordanceMap:
    values: np.ndarray
    provenance: str = "ground-truth"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.min(initial=0.0) < 0.0 or self.values.max(initial=0.0) > 1.0:
            raise InvalidInputError("affordance values must lie in [0, 1]")


def contact_map(scene, posed: PosedHand) -> np.ndarray:
    """Distance from every scene point to the nearest posed-hand surface sample."""
    return geometry.nearest_distances(scene, posed.surface)


def union_min(maps) -> np.ndarray:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise InvalidInputError("union_min needs at least one contact map")
    if any(m.shape != maps[0].shape for m in maps):
        raise InvalidInputError("contact maps have different lengths")
    return np.minimum.reduce(maps)


def normalize_distance(d, d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Map a (smoothed) contact distance to graspability: 1 at contact, 0 beyond ``d_max``."""
    return np.clip(1.0 - np.asarray(d) / d_max, 0.0, 1.0)


def build_affordance_gt(
    scene,
    group: GraspGroup,
    hand: HandModel,
    d_max: float = DEFAULT_D_MAX,
    sigma: float | None = None,
    k: int = DEFAULT_K,
    smooth: bool = True,
) -> AffordanceMap:
    """Contact map per grasp, min-union, Gaussian smoothing, then inversion to [0, 1].

    ``sigma`` defaults to the scene's average nearest-neighbour spacing.
    ``smooth=False`` skips filtering (the sigma -> 0 limit).
    """
    pts = geometry.as_cloud(scene, "scene")
    d = union_min([contact_map(pts, forward_kinematics(hand, g)) for g in group.grasps])
    if smooth:
        sigma = geometry.avg_nn_distance(pts) if sigma is None else sigma
        d = geometry.gaussian_smooth(pts, d, sigma, k=k)
    return AffordanceMap(
        normalize_distance(d, d_max),
        "ground-truth",
        {"scene_id": group.scene_id, "d_max": d_max, "sigma": sigma if smooth else 0.0, "k": k},
    )


def part_affordance(labels: np.ndarray, part_id: int) -> AffordanceMap:
    """Binary pseudo-affordance covering one labelled part (used for grasp synthesis)."""
    return AffordanceMap((np.asarray(labels) == part_id).astype(np.float64), "part-label")


def save_affordance(amap: AffordanceMap, path) -> None:
    """Write ``<path>.bin`` (f32 blob) and ``<path>.json`` (header)."""
    path = Path(path)
    write_blob(path.with_suffix(".bin"), amap.values)
    header = {"provenance": amap.provenance, "count": int(amap.values.size), **amap.meta}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")


def load_affordance(path) -> AffordanceMap:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    values = read_blob(path.with_suffix(".bin")).reshape(-1).astype(np.float64)
    prov = header.pop("provenance")
    header.pop("count", None)
    return AffordanceMap(values, prov, header)
