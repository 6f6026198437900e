"""Procedural tabletop dataset: primitive objects, simulated depth cameras, guidance and grasp groups.

World frame: z up, x front. The six direction tokens are front=+x, back=-x,
left=+y, right=-y, up=+z, down=-z. A direction describes where the hand
comes from, i.e. the discretized vector from the grasped part to the wrist.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .affordance import GraspGroup, build_affordance_gt, part_affordance
from .blobs import decode_blob, encode_blob
from .geometry import InvalidInputError
from .hand import EXTRINSIC_DIM, GraspPose, HandModel, _kinematics, axis_angle_matrix, default_hand, forward_kinematics, matrix_to_rot6d, world_points
from .metrics import Q1Config, detect_contacts, success_proxy
from .optimize import OptimConfig, max_penetration_depth, refine_grasp

log = logging.getLogger(__name__)

DATASET_FORMAT = "afforddex-dataset"
DATASET_VERSION = 1
DIRECTIONS = ("front", "back", "left", "right", "up", "down")
_AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


class DatasetError(RuntimeError):
    pass


class DatasetCorruptionError(DatasetError):
    """A blob's bytes do not match the hash recorded in the manifest."""


class DatasetIntegrityError(DatasetError):
    """A referenced blob is missing or the manifest is malformed."""


def f32(x) -> np.ndarray:
    """Round to float32 precision (what blobs store) but keep float64 dtype."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ----------------------------------------------------------------------------- directions and guidance


def discretize_direction(v) -> tuple[str, np.ndarray]:
    """Nearest signed coordinate axis. Ties go to the earlier axis (x < y < z)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)) or not np.any(v != 0):
        raise InvalidInputError("direction vector must be non-zero and finite")
    ax = int(np.argmax(np.abs(v)))
    k = 2 * ax + (0 if v[ax] > 0 else 1)
    onehot = np.zeros(6)
    onehot[k] = 1.0
    return DIRECTIONS[k], onehot


def direction_vector(token: str) -> np.ndarray:
    if token not in DIRECTIONS:
        raise InvalidInputError(f"unknown direction {token!r}")
    return _AXES[DIRECTIONS.index(token)].copy()


@dataclass(frozen=True)
class GuidanceRecord:
    category: str
    intention: str
    part: str
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InvalidInputError(f"direction must be one of {DIRECTIONS}")

    def __getitem__(self, key):
        return getattr(self, key)

    @property
    def sentence(self) -> str:
        return format_guidance(self)

    def as_dict(self) -> dict:
        return asdict(self)


_SENTENCE = re.compile(r"^(?P<intention>\S+) the (?P<category>.+?) from the (?P<direction>\S+) by contacting the (?P<part>.+)$")


def format_guidance(rec) -> str:
    return f"{rec['intention']} the {rec['category']} from the {rec['direction']} by contacting the {rec['part']}"


def parse_guidance(sentence: str) -> GuidanceRecord:
    m = _SENTENCE.match(sentence.strip())
    if not m:
        raise InvalidInputError(f"sentence does not follow the guidance template: {sentence!r}")
    return GuidanceRecord(m["category"], m["intention"], m["part"], m["direction"])


# ----------------------------------------------------------------------------- primitives


@dataclass
class Primitive:
    """Solid primitive in world coordinates. Local axes are the columns of ``rot``.

    sizes: sphere (r,), cylinder (r, half_height) along local z,
    box (hx, hy, hz), torus (major R, minor r) around local z.
    """

    kind: str
    part: str
    center: np.ndarray
    rot: np.ndarray
    size: tuple

    def local(self, p):
        return (np.asarray(p) - self.center) @ self.rot

    def sdf(self, p) -> np.ndarray:
        q = self.local(p)
        s = self.size
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - s[0]
        if self.kind == "cylinder":
            d = np.stack([np.hypot(q[..., 0], q[..., 1]) - s[0], np.abs(q[..., 2]) - s[1]], axis=-1)
            return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        if self.kind == "box":
            d = np.abs(q) - np.asarray(s)
            return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        if self.kind == "torus":
            ring = np.hypot(q[..., 0], q[..., 1]) - s[0]
            return np.hypot(ring, q[..., 2]) - s[1]
        raise InvalidInputError(f"unknown primitive {self.kind!r}")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.size
        if self.kind == "sphere":
            ext = np.full(3, s[0])
            return self.center - ext, self.center + ext
        half = {"cylinder": (s[0], s[0], s[1]), "box": tuple(s), "torus": (s[0] + s[1], s[0] + s[1], s[1])}[self.kind]
        ext = np.abs(self.rot) @ np.asarray(half)
        return self.center - ext, self.center + ext

    def to_dict(self) -> dict:
        return {"kind": self.kind, "part": self.part, "center": [float(x) for x in self.center], "rot": [[float(x) for x in r] for r in self.rot], "size": [float(x) for x in self.size]}

    @classmethod
    def from_dict(cls, d) -> "Primitive":
        return cls(d["kind"], d["part"], np.array(d["center"], dtype=float), np.array(d["rot"], dtype=float), tuple(d["size"]))


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


_RX90 = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]])  # local z -> world -y (torus axis along y)
_RY90 = np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0.0]])  # local z -> world x


# Each template returns primitives in the object frame (resting on z = 0) and a
# task list of (intention, part, approach direction in the object frame).
def _mug(r):
    rb, h = r.uniform(0.03, 0.038), r.uniform(0.08, 0.1)
    R, rt = r.uniform(0.022, 0.028), r.uniform(0.005, 0.007)
    prims = [
        Primitive("cylinder", "body", np.array([0, 0, h / 2]), np.eye(3), (rb, h / 2)),
        Primitive("torus", "handle", np.array([rb, 0, h / 2]), _RX90, (R, rt)),
    ]
    tasks = [("use", "handle", (0, 0, 1)), ("hold", "body", (0, 1, 0)), ("hold", "body", (0, -1, 0)), ("lift", "body", (0, 0, 1))]
    return prims, tasks


def _bottle(r):
    rb, h = r.uniform(0.028, 0.034), r.uniform(0.11, 0.14)
    rn, hn = r.uniform(0.011, 0.014), r.uniform(0.04, 0.05)
    prims = [
        Primitive("cylinder", "body", np.array([0, 0, h / 2]), np.eye(3), (rb, h / 2)),
        Primitive("cylinder", "neck", np.array([0, 0, h + hn / 2]), np.eye(3), (rn, hn / 2)),
    ]
    tasks = [("hold", "body", (1, 0, 0)), ("hold", "body", (0, 1, 0)), ("use", "neck", (0, -1, 0)), ("lift", "neck", (-1, 0, 0))]
    return prims, tasks


def _hammer(r):
    rh, L = r.uniform(0.012, 0.015), r.uniform(0.2, 0.24)
    hx, hy, hz = r.uniform(0.016, 0.02), r.uniform(0.045, 0.055), r.uniform(0.016, 0.02)
    prims = [
        Primitive("cylinder", "handle", np.array([0, 0, hz]), _RY90, (rh, L / 2)),
        Primitive("box", "head", np.array([L / 2 + hx, 0, hz]), np.eye(3), (hx, hy, hz)),
    ]
    tasks = [("use", "handle", (0, 0, 1)), ("use", "handle", (0, 1, 0)), ("hold", "head", (0, 0, 1)), ("lift", "handle", (0, -1, 0))]
    return prims, tasks


def _pan(r):
    rb, hh = r.uniform(0.07, 0.085), r.uniform(0.014, 0.018)
    L, w, t = r.uniform(0.1, 0.13), r.uniform(0.01, 0.013), r.uniform(0.006, 0.008)
    prims = [
        Primitive("cylinder", "body", np.array([0, 0, hh]), np.eye(3), (rb, hh)),
        Primitive("box", "handle", np.array([rb + L / 2, 0, 2 * hh - t]), np.eye(3), (L / 2, w, t)),
    ]
    tasks = [("use", "handle", (0, 0, 1)), ("use", "handle", (0, 1, 0)), ("hold", "body", (-1, 0, 0)), ("lift", "handle", (1, 0, 0))]
    return prims, tasks


def _screwdriver(r):
    rh, Lh = r.uniform(0.013, 0.016), r.uniform(0.08, 0.1)
    rs, Ls = r.uniform(0.004, 0.005), r.uniform(0.08, 0.1)
    prims = [
        Primitive("cylinder", "handle", np.array([-Lh / 2, 0, rh]), _RY90, (rh, Lh / 2)),
        Primitive("cylinder", "shaft", np.array([Ls / 2, 0, rh]), _RY90, (rs, Ls / 2)),
    ]
    tasks = [("use", "handle", (0, 0, 1)), ("use", "handle", (0, 1, 0)), ("hold", "shaft", (0, 0, 1)), ("lift", "handle", (-1, 0, 0))]
    return prims, tasks


def _lightbulb(r):
    rb, rbase, hb = r.uniform(0.028, 0.034), r.uniform(0.012, 0.014), r.uniform(0.025, 0.03)
    prims = [
        Primitive("cylinder", "base", np.array([0, 0, hb / 2]), np.eye(3), (rbase, hb / 2)),
        Primitive("sphere", "bulb", np.array([0, 0, hb + 0.85 * rb]), np.eye(3), (rb,)),
    ]
    tasks = [("use", "bulb", (0, 0, 1)), ("hold", "bulb", (1, 0, 0)), ("hold", "bulb", (0, -1, 0)), ("lift", "bulb", (-1, 0, 0))]
    return prims, tasks


def _ball(r):
    rb = r.uniform(0.03, 0.04)
    prims = [Primitive("sphere", "body", np.array([0, 0, rb]), np.eye(3), (rb,))]
    tasks = [("lift", "body", (0, 0, 1)), ("hold", "body", (1, 0, 0)), ("hold", "body", (0, 1, 0)), ("use", "body", (-1, 0, 0))]
    return prims, tasks


TEMPLATES = {
    "mug": _mug,
    "bottle": _bottle,
    "hammer": _hammer,
    "pan": _pan,
    "screwdriver": _screwdriver,
    "lightbulb": _lightbulb,
    "ball": _ball,
}


@dataclass
class SceneSpec:
    scene_id: str
    category: str
    seed: int
    table_z: float
    yaw: float
    primitives: list[Primitive]
    tasks: list[tuple]  # (intention, part, approach vector in world frame)

    @property
    def parts(self) -> list[str]:
        out = []
        for p in self.primitives:
            if p.part not in out:
                out.append(p.part)
        return out

    def sdf(self, p) -> np.ndarray:
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def part_sdf(self, p, part: str) -> np.ndarray:
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives if pr.part == part]), axis=0)

    def bounds(self):
        lo = np.min([pr.bounds()[0] for pr in self.primitives], axis=0)
        hi = np.max([pr.bounds()[1] for pr in self.primitives], axis=0)
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "category": self.category,
            "seed": self.seed,
            "table_z": self.table_z,
            "yaw": self.yaw,
            "primitives": [p.to_dict() for p in self.primitives],
            "tasks": [[i, p, [float(x) for x in a]] for i, p, a in self.tasks],
        }

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        return cls(d["scene_id"], d["category"], d["seed"], d["table_z"], d["yaw"], [Primitive.from_dict(p) for p in d["primitives"]], [(i, p, tuple(a)) for i, p, a in d["tasks"]])


def generate_scene(seed: int, template: str, scene_id: str | None = None) -> SceneSpec:
    """Randomized instance of a category template resting on a table or shelf; deterministic per seed."""
    if template not in TEMPLATES:
        raise InvalidInputError(f"unknown template {template!r}; known: {sorted(TEMPLATES)}")
    r = np.random.default_rng([seed, sum(map(ord, template))])
    prims, tasks = TEMPLATES[template](r)
    table_z = 0.0 if r.random() < 0.5 else float(r.uniform(0.1, 0.3))
    yaw = float(r.uniform(0, 2 * np.pi))
    Rz = _rz(yaw)
    offset = np.array([r.uniform(-0.05, 0.05), r.uniform(-0.05, 0.05), table_z])
    placed = [Primitive(p.kind, p.part, Rz @ p.center + offset, Rz @ p.rot, p.size) for p in prims]
    wtasks = [(i, part, tuple(float(x) for x in Rz @ np.asarray(a, dtype=float))) for i, part, a in tasks]
    return SceneSpec(scene_id or f"{template}-{seed:04d}", template, int(seed), table_z, yaw, placed, wtasks)


# ----------------------------------------------------------------------------- rendering


@dataclass
class CameraRig:
    """Four elevated lateral cameras and one overhead camera around the object's bounding box.

    Lateral cameras sit ``side_offset`` x (longest bbox edge) beyond each side
    face at ``height_offset`` x (longest edge) above the box centre; the top
    camera sits ``top_offset`` x (longest edge) above the top face.
    """

    side_offset: float = 0.5
    height_offset: float = 0.25
    top_offset: float = 0.5
    resolution: int = 64
    use: tuple = ("front", "back", "left", "right", "top")

    def cameras(self, lo, hi):
        c = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        L = float(np.max(hi - lo))
        out = []
        for name, ax, sgn in (("front", 0, 1), ("back", 0, -1), ("left", 1, 1), ("right", 1, -1)):
            if name in self.use:
                pos = c.copy()
                pos[ax] += sgn * (half[ax] + self.side_offset * L)
                pos[2] += self.height_offset * L
                out.append((name, pos))
        if "top" in self.use:
            out.append(("top", c + np.array([0, 0, half[2] + self.top_offset * L])))
        return c, out


def _camera_rays(pos, target, lo, hi, res):
    """Unit ray directions on a ``res x res`` image grid spanning the projected bounding box."""
    fwd = target - pos
    fwd /= np.linalg.norm(fwd)
    up = np.array([0, 1.0, 0]) if abs(fwd[2]) > 0.99 else np.array([0, 0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]) - pos
    depth = np.maximum(corners @ fwd, 1e-3)
    cu, cv = corners @ right / depth, corners @ up / depth
    lim = math.tan(math.radians(75))
    pad = 0.05 * max(cu.max() - cu.min(), cv.max() - cv.min())
    gu = np.linspace(max(cu.min() - pad, -lim), min(cu.max() + pad, lim), res)
    gv = np.linspace(max(cv.min() - pad, -lim), min(cv.max() + pad, lim), res)
    u, v = np.meshgrid(gu, gv, indexing="ij")
    d = fwd[None] + u.reshape(-1, 1) * right[None] + v.reshape(-1, 1) * up[None]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _sphere_trace(scene: SceneSpec, origin, dirs, t_max, iters=128, eps=2e-5):
    t = np.zeros(len(dirs))
    hit = np.zeros(len(dirs), dtype=bool)
    alive = np.ones(len(dirs), dtype=bool)
    # table plane occludes (rays travelling downward stop there)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = np.where(dirs[:, 2] < 0, (scene.table_z - origin[2]) / dirs[:, 2], np.inf)
    t_stop = np.minimum(t_max, t_table)
    for _ in range(iters):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        p = origin + t[idx, None] * dirs[idx]
        d = scene.sdf(p)
        done = d < eps
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        gone = t[idx] > t_stop[idx]
        alive[idx[done | gone]] = False
    return origin + t[hit, None] * dirs[hit]


def sdf_normals(scene: SceneSpec, p, h: float = 1e-5) -> np.ndarray:
    g = np.stack([(scene.sdf(p + h * e) - scene.sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(n > 0, n, 1.0)


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Indices of one point per occupied voxel (the one closest to the voxel mean, lowest index on ties)."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    n = inv.max() + 1
    mean = np.zeros((n, 3))
    np.add.at(mean, inv, points)
    mean /= np.bincount(inv, minlength=n)[:, None]
    d = np.sum((points - mean[inv]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(points)), d, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    return np.sort(order[first])


def farthest_point_sample(points, n: int) -> np.ndarray:
    """Deterministic farthest-point sampling starting from the point farthest from the centroid."""
    points = np.asarray(points)
    if n >= len(points):
        return np.arange(len(points))
    sel = np.empty(n, dtype=np.int64)
    sel[0] = int(np.argmax(np.sum((points - points.mean(0)) ** 2, axis=1)))
    d = np.sum((points - points[sel[0]]) ** 2, axis=1)
    for i in range(1, n):
        sel[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((points - points[sel[i]]) ** 2, axis=1))
    return np.sort(sel)


def render_merged_cloud(scene: SceneSpec, rig: CameraRig | None = None, max_points: int = 2048, downsample: bool = True):
    """Ray-cast every camera against the object SDF, merge, and voxel-downsample to at most ``max_points``.

    Returns ``(points, normals)``.
    """
    rig = rig or CameraRig()
    lo, hi = scene.bounds()
    center, cams = rig.cameras(lo, hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo))
    pts = []
    for name, pos in cams:
        if scene.sdf(pos[None])[0] <= 0:
            raise InvalidInputError(f"camera {name} is inside the object")
        dirs = _camera_rays(pos, center, lo, hi, rig.resolution)
        pts.append(_sphere_trace(scene, pos, dirs, np.linalg.norm(pos - center) + 2 * radius))
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(pts) == 0:
        raise InvalidInputError("no camera ray hit the object")
    if downsample:
        voxel = float(np.max(hi - lo)) / 64
        keep = voxel_downsample(pts, voxel)
        while len(keep) > max_points:
            voxel *= 1.15
            keep = voxel_downsample(pts, voxel)
        pts = pts[keep]
    return pts, sdf_normals(scene, pts)


def part_labels(scene: SceneSpec, points) -> np.ndarray:
    """Index into ``scene.parts`` of the primitive whose surface is closest to each point."""
    parts = scene.parts
    d = np.stack([np.abs(pr.sdf(points)) for pr in scene.primitives], axis=1)
    prim_part = np.array([parts.index(pr.part) for pr in scene.primitives])
    return prim_part[np.argmin(d, axis=1)]


@dataclass
class SceneCloud:
    spec: SceneSpec
    points: np.ndarray
    normals: np.ndarray
    labels: np.ndarray  # part index per point


def build_scene_cloud(spec: SceneSpec, n_points: int, rig: CameraRig | None = None) -> SceneCloud:
    pts, nrm = render_merged_cloud(spec, rig)
    sel = farthest_point_sample(pts, n_points)
    if len(sel) < n_points:
        raise InvalidInputError(f"rendered cloud has only {len(sel)} points (< {n_points})")
    pts, nrm = f32(pts[sel]), f32(nrm[sel])
    return SceneCloud(spec, pts, nrm, part_labels(spec, pts))


# ----------------------------------------------------------------------------- grasp synthesis


@dataclass
class SynthConfig:
    refine_iters: int = 60
    max_attempts: int = 12
    standoff_max: float = 0.2
    standoff_step: float = 0.002
    close_steps: int = 24
    contact_gap: float = 0.002
    max_penetration: float = 0.005
    min_part_contact: float = 0.65
    mu: float = 0.5


_OPEN = np.array([-0.35, 0.15, 0.1])
_CLOSED = np.array([1.3, 1.5, 1.3])


def _frame_for(approach, part_pts, rng):
    """Wrist rotation with fingers pointing against ``approach`` and the closing axis across the part.

    The closing axis is the part's narrowest in-plane direction (as seen along
    the approach); for round cross-sections it is random.
    """
    z = -approach / np.linalg.norm(approach)
    P = part_pts - part_pts.mean(0)
    P = P - np.outer(P @ z, z)
    evals, evecs = np.linalg.eigh(P.T @ P)
    inplane = [i for i in range(3) if abs(evecs[:, i] @ z) < 0.9]
    lo, hi = inplane[0], inplane[-1]
    x = evecs[:, lo] if evals[lo] < 0.8 * evals[hi] else rng.standard_normal(3)
    x = x - (x @ z) * z
    x /= np.linalg.norm(x)
    if rng.random() < 0.5:
        x = -x
    R = np.stack([x, np.cross(z, x), z], axis=1)
    spin = axis_angle_matrix(np.array([0, 0, 1.0]), np.array([rng.uniform(-0.2, 0.2)]))[0]
    tilt_x, tilt_y = rng.normal(0, 0.08, size=2)
    tilt = axis_angle_matrix(np.array([1.0, 0, 0]), np.array([tilt_x]))[0] @ axis_angle_matrix(np.array([0, 1.0, 0]), np.array([tilt_y]))[0]
    return R @ tilt @ spin


def _pose_vec(R, t, q):
    return np.concatenate([matrix_to_rot6d(R[None])[0], t, q])


def _place_and_close(spec: SceneSpec, hand: HandModel, R, center, approach, cfg: SynthConfig):
    """Slide the open hand along ``approach`` until it meets the object, then curl each finger to contact."""
    q_open = np.tile(_OPEN, 3)
    s = np.arange(cfg.standoff_max, -0.03, -cfg.standoff_step)
    vecs = np.stack([_pose_vec(R, center + si * approach, q_open) for si in s])
    kin = _kinematics(hand, vecs)
    surf = world_points(kin, hand.surface)  # (S, N, 3)
    sd = spec.sdf(surf.reshape(-1, 3)).reshape(surf.shape[:2])
    palm = hand.surface.link == 0
    stop = (sd[:, palm].min(axis=1) < 0.004) | (sd.min(axis=1) < -0.001)
    if not stop.any():
        i = len(s) - 1
    else:
        i = max(int(np.argmax(stop)) - 1, 0)
    t = center + s[i] * approach
    lam = np.linspace(0, 1, cfg.close_steps)
    qs = q_open[None] + lam[:, None] * (np.tile(_CLOSED, 3) - q_open)[None]
    vecs = np.stack([_pose_vec(R, t, q) for q in qs])
    surf = world_points(_kinematics(hand, vecs), hand.surface)
    sd = spec.sdf(surf.reshape(-1, 3)).reshape(surf.shape[:2])
    q = np.empty(hand.dof)
    for f in range(3):
        links = np.arange(1 + 3 * f, 4 + 3 * f)
        m = np.isin(hand.surface.link, links)
        touch = sd[:, m].min(axis=1) < cfg.contact_gap
        k = int(np.argmax(touch)) if touch.any() else len(lam) - 1
        q[3 * f : 3 * f + 3] = qs[k, 3 * f : 3 * f + 3]
    return _pose_vec(R, t, q)


def check_grasp(vec, cloud: SceneCloud, part_id: int, hand: HandModel, cfg: SynthConfig) -> bool:
    """Synthesizer filters: joint limits, penetration, success proxy and contact on the requested part."""
    q = vec[EXTRINSIC_DIM:]
    if np.any(q < hand.q_min) or np.any(q > hand.q_max):
        return False
    if max_penetration_depth(cloud.points, vec, hand) >= cfg.max_penetration:
        return False
    posed = forward_kinematics(hand, vec)
    qcfg = Q1Config(mu=cfg.mu)
    cp, _ = detect_contacts(cloud.points, cloud.normals, posed, qcfg.contact_threshold)
    if len(cp) == 0:
        return False
    d = geometry.nearest_distances(cloud.points, posed.surface)
    on = d < qcfg.contact_threshold
    if np.mean(cloud.labels[on] == part_id) < cfg.min_part_contact:
        return False
    return success_proxy(cloud.points, cloud.normals, posed, hand, cfg=qcfg)


def synthesize_grasp_group(
    cloud: SceneCloud,
    part: str,
    direction,
    hand: HandModel,
    k: int = 3,
    seed: int = 0,
    cfg: SynthConfig | None = None,
    intention: str = "hold",
) -> GraspGroup:
    """Grasps on ``part`` approached from ``direction`` (token or vector).

    Returns up to ``k`` grasps; a partial group is returned with a warning if
    the attempt budget runs out.
    """
    cfg = cfg or SynthConfig()
    spec = cloud.spec
    if part not in spec.parts:
        raise InvalidInputError(f"scene {spec.scene_id} has no part {part!r}")
    approach = direction_vector(direction) if isinstance(direction, str) else np.asarray(direction, dtype=float)
    approach = approach / np.linalg.norm(approach)
    token, _ = discretize_direction(approach)
    pid = spec.parts.index(part)
    ppts = cloud.points[cloud.labels == pid]
    if len(ppts) == 0:
        raise InvalidInputError(f"part {part!r} is not visible in scene {spec.scene_id}")
    pseudo = part_affordance(cloud.labels, pid)
    rng = np.random.default_rng([seed, pid, DIRECTIONS.index(token)])
    ocfg = OptimConfig(iterations=cfg.refine_iters)
    grasps = []
    for _ in range(cfg.max_attempts * k):
        if len(grasps) == k:
            break
        R = _frame_for(approach, ppts, rng)
        center = ppts[rng.integers(len(ppts))] * 0.5 + ppts.mean(0) * 0.5
        center = center - (center - ppts.mean(0)) @ approach * approach
        vec = _place_and_close(spec, hand, R, center, approach, cfg)
        vec = refine_grasp(vec, cloud.points, pseudo, hand, ocfg).pose.vector()
        vec[EXTRINSIC_DIM:] = np.clip(vec[EXTRINSIC_DIM:], hand.q_min, hand.q_max)
        if check_grasp(vec, cloud, pid, hand, cfg):
            grasps.append(GraspPose.from_vector(vec))
    if len(grasps) < k:
        log.warning("scene %s part %s from %s: only %d of %d grasps", spec.scene_id, part, token, len(grasps), k)
    if not grasps:
        raise DatasetError(f"no valid grasp for scene {spec.scene_id} part {part} from {token}")
    g = GuidanceRecord(spec.category, intention, part, token)
    return GraspGroup(spec.scene_id, g.as_dict(), grasps)


def penetrating_grasp(cloud: SceneCloud, hand: HandModel, rng: np.random.Generator, min_depth: float = 0.005, cfg: SynthConfig | None = None):
    """A closed grasp on a random task part, pushed along its approach until it penetrates deeper than ``min_depth``.

    Returns ``(pose vector, part affordance map)``; used to exercise refinement.
    The push grows in 5 mm increments up to 6 cm.
    """
    cfg = cfg or SynthConfig()
    spec = cloud.spec
    _, part, approach = spec.tasks[rng.integers(len(spec.tasks))]
    approach = np.asarray(approach, dtype=float)
    pid = spec.parts.index(part)
    ppts = cloud.points[cloud.labels == pid]
    vec = _place_and_close(spec, hand, _frame_for(approach, ppts, rng), ppts.mean(0), approach, cfg)
    for push in np.arange(0.01, 0.06, 0.005):
        v = vec.copy()
        v[6:9] -= push * approach
        if max_penetration_depth(cloud.points, v, hand) > min_depth:
            break
    return v, part_affordance(cloud.labels, pid)


# ----------------------------------------------------------------------------- dataset


@dataclass
class DataConfig:
    categories: tuple = ("mug", "bottle", "hammer", "pan", "screwdriver", "lightbulb", "ball")
    unseen: tuple = ("bottle",)
    scenes_per_category: int = 5
    train_fraction: float = 0.8
    grasps_per_group: int = 3
    points_per_scene: int = 512
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    rig: CameraRig = field(default_factory=CameraRig)

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if isinstance(self.rig, dict):
            self.rig = CameraRig(**{k: tuple(v) if k == "use" else v for k, v in self.rig.items()})
        self.categories = tuple(self.categories)
        self.unseen = tuple(self.unseen)
        unknown = [c for c in self.categories if c not in TEMPLATES]
        if unknown:
            raise InvalidInputError(f"unknown categories {unknown}")
        if not set(self.unseen) <= set(self.categories):
            raise InvalidInputError("unseen categories must be listed in categories")
        if self.scenes_per_category < 1 or self.grasps_per_group < 1 or self.points_per_scene < 16:
            raise InvalidInputError("dataset sizes must be positive")
        if not 0 < self.train_fraction <= 1:
            raise InvalidInputError("train_fraction must lie in (0, 1]")


@dataclass
class SceneRecord:
    cloud: SceneCloud
    split: str

    @property
    def scene_id(self):
        return self.cloud.spec.scene_id


@dataclass
class GroupRecord:
    group_id: str
    group: GraspGroup
    affordance: np.ndarray


@dataclass
class Dataset:
    config: dict
    scenes: dict  # scene_id -> SceneRecord
    groups: list  # GroupRecord
    hand_name: str = "tri-finger-capsule"

    def split_groups(self, split: str) -> list[GroupRecord]:
        return [g for g in self.groups if self.scenes[g.group.scene_id].split == split]

    @property
    def unseen_categories(self) -> tuple:
        return tuple(self.config.get("unseen", ()))

    def train_categories(self) -> set:
        return {r.cloud.spec.category for r in self.scenes.values() if r.split == "train"}


def _assign_split(cat: str, i: int, n: int, cfg: DataConfig) -> str:
    if cat in cfg.unseen:
        return "test_unseen"
    n_train = max(1, int(round(cfg.train_fraction * n))) if n > 1 else 1
    return "train" if i < n_train else "test_seen"


def generate_dataset(cfg: DataConfig | None = None, hand: HandModel | None = None) -> Dataset:
    """Scenes, grasp groups (one per task) and ground-truth affordance maps; deterministic per config."""
    cfg = cfg or DataConfig()
    hand = hand or default_hand()
    scenes, groups = {}, []
    for ci, cat in enumerate(cfg.categories):
        for i in range(cfg.scenes_per_category):
            seed = cfg.seed * 100_003 + ci * 1000 + i
            spec = generate_scene(seed, cat, f"{cat}-{i:03d}")
            cloud = build_scene_cloud(spec, cfg.points_per_scene, cfg.rig)
            scenes[spec.scene_id] = SceneRecord(cloud, _assign_split(cat, i, cfg.scenes_per_category, cfg))
            for ti, (intention, part, approach) in enumerate(spec.tasks):
                try:
                    grp = synthesize_grasp_group(cloud, part, approach, hand, cfg.grasps_per_group, seed=seed * 10 + ti, cfg=cfg.synth, intention=intention)
                except (DatasetError, InvalidInputError) as e:
                    log.warning("skipping task: %s", e)
                    continue
                grp.grasps = [GraspPose.from_vector(g.vector()) for g in grp.grasps]
                amap = build_affordance_gt(cloud.points, grp, hand)
                groups.append(GroupRecord(f"{spec.scene_id}-t{ti}", grp, f32(amap.values)))
            log.info("scene %s: %d groups so far", spec.scene_id, len(groups))
    return Dataset(_config_dict(cfg), scenes, groups, hand.name)


def _config_dict(cfg: DataConfig) -> dict:
    d = asdict(cfg)
    d["categories"] = list(cfg.categories)
    d["unseen"] = list(cfg.unseen)
    d["rig"]["use"] = list(cfg.rig.use)
    return d


def _canonical(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=True) + "\n").encode()


def save_dataset(ds: Dataset, path) -> None:
    """Write ``manifest.json`` and ``blobs/*.bin``; identical datasets give identical bytes."""
    path = Path(path)
    blobs = path / "blobs"
    if blobs.exists():
        shutil.rmtree(blobs)
    blobs.mkdir(parents=True)

    def put(name, arr):
        data = encode_blob(arr)
        (blobs / name).write_bytes(data)
        return {"blob": f"blobs/{name}", "sha256": hashlib.sha256(data).hexdigest()}

    scenes = []
    for sid in sorted(ds.scenes):
        rec = ds.scenes[sid]
        c = rec.cloud
        scenes.append({
            "id": sid,
            "category": c.spec.category,
            "split": rec.split,
            "spec": c.spec.to_dict(),
            "parts": c.spec.parts,
            "points": put(f"{sid}.points.bin", c.points),
            "normals": put(f"{sid}.normals.bin", c.normals),
            "labels": put(f"{sid}.labels.bin", c.labels.astype(np.float64)),
        })
    groups = []
    for g in ds.groups:
        groups.append({
            "id": g.group_id,
            "scene": g.group.scene_id,
            "guidance": dict(g.group.guidance),
            "sentence": format_guidance(g.group.guidance),
            "grasps": [[float(x) for x in p.vector()] for p in g.group.grasps],
            "affordance": put(f"{g.group_id}.affordance.bin", g.affordance),
        })
    doc = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "hand": ds.hand_name, "config": ds.config, "scenes": scenes, "groups": groups}
    (path / "manifest.json").write_bytes(_canonical(doc))


def _get(root: Path, ref: dict) -> np.ndarray:
    p = root / ref["blob"]
    if not p.is_file():
        raise DatasetIntegrityError(f"missing blob {ref['blob']}")
    data = p.read_bytes()
    if hashlib.sha256(data).hexdigest() != ref["sha256"]:
        raise DatasetCorruptionError(f"hash mismatch for {ref['blob']}")
    return decode_blob(data).astype(np.float64)


def load_dataset(path) -> Dataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise DatasetIntegrityError(f"{mf} not found")
    try:
        doc = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise DatasetIntegrityError(f"manifest is not valid JSON: {e}") from e
    if doc.get("format") != DATASET_FORMAT:
        raise DatasetIntegrityError("not a dataset manifest")
    scenes = {}
    for s in doc["scenes"]:
        spec = SceneSpec.from_dict(s["spec"])
        cloud = SceneCloud(spec, _get(root, s["points"]), _get(root, s["normals"]), _get(root, s["labels"]).astype(np.int64))
        scenes[s["id"]] = SceneRecord(cloud, s["split"])
    groups = []
    for g in doc["groups"]:
        grp = GraspGroup(g["scene"], g["guidance"], [GraspPose.from_vector(v) for v in g["grasps"]])
        groups.append(GroupRecord(g["id"], grp, _get(root, g["affordance"])))
    ds = Dataset(doc["config"], scenes, groups, doc.get("hand", ""))
    unseen = set(ds.unseen_categories)
    if unseen & ds.train_categories():
        raise DatasetIntegrityError("an unseen category appears in the train split")
    return ds


def recheck_filters(ds: Dataset, hand: HandModel | None = None, cfg: SynthConfig | None = None) -> list[str]:
    """Ids of stored groups containing a grasp that fails the synthesizer filters."""
    hand = hand or default_hand()
    cfg = cfg or SynthConfig(**ds.config.get("synth", {}))
    bad = []
    for g in ds.groups:
        cloud = ds.scenes[g.group.scene_id].cloud
        pid = cloud.spec.parts.index(g.group.guidance["part"])
        if not all(check_grasp(p.vector(), cloud, pid, hand, cfg) for p in g.group.grasps):
            bad.append(g.group_id)
    return bad
