"""Parametric articulated hand built from capsules.

Pose vectors are laid out as ``[rot6d (6), translation (3), joints (J)]``.
The 6D rotation is the first two columns of the wrist rotation before
Gram-Schmidt; decoding orthonormalizes them and takes the cross product for
the third column.

Everything kinematic is batched over poses internally (``(B, D)`` arrays);
the single-pose functions are thin wrappers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import InvalidInputError

HAND_FORMAT = "afforddex-hand"
HAND_FORMAT_VERSION = 1
ROT_DIM = 6
TRANS_DIM = 3
EXTRINSIC_DIM = ROT_DIM + TRANS_DIM

_GOLDEN = math.pi * (3.0 - math.sqrt(5.0))


class DegenerateRotationError(ValueError):
    pass


# ----------------------------------------------------------------------------- rotations


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, ``(..., 3) -> (..., 3, 3)``."""
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def _rot6d_frames(r6: np.ndarray, eps: float = 0.0):
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = np.sqrt(np.sum(a1 * a1, -1) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):  # degenerate inputs are rejected by the caller
        b1 = a1 / n1[..., None]
        u = a2 - np.sum(b1 * a2, -1)[..., None] * b1
        nu = np.sqrt(np.sum(u * u, -1) + eps)
        b2 = u / nu[..., None]
    return a1, a2, n1, b1, u, nu, b2


def rot6d_to_matrix_batch(r6: np.ndarray, strict: bool = True, eps: float = 1e-12) -> np.ndarray:
    r6 = np.asarray(r6, dtype=np.float64)
    if strict:
        _, a2, n1, _, _, nu, _ = _rot6d_frames(r6)
        if np.any(n1 < 1e-12) or np.any(nu < 1e-9 * np.maximum(1.0, np.linalg.norm(a2, axis=-1))):
            raise DegenerateRotationError("6D rotation has a zero or collinear column")
        eps = 0.0
    _, _, _, b1, _, _, b2 = _rot6d_frames(r6, eps)
    return np.stack([b1, b2, np.cross(b1, b2)], axis=-1)


def rot6d_to_matrix(r) -> np.ndarray:
    """Decode a 6D rotation ``(a1, a2)`` into an orthonormal matrix with det +1."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (6,):
        raise InvalidInputError("rot6d must have 6 entries")
    return rot6d_to_matrix_batch(r[None])[0]


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_jacobian(r6: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """``dR[b, i, j, k] = d R_ij / d r6_k`` for a batch of 6D rotations."""
    a1, a2, n1, b1, u, nu, b2 = _rot6d_frames(r6, eps)
    eye = np.eye(3)
    outer11 = b1[..., :, None] * b1[..., None, :]
    db1_da1 = (eye - outer11) / n1[..., None, None]
    du_db1 = -np.sum(b1 * a2, -1)[..., None, None] * eye - b1[..., :, None] * a2[..., None, :]
    du_da2 = eye - outer11
    db2_du = (eye - b2[..., :, None] * b2[..., None, :]) / nu[..., None, None]
    db2_da1 = db2_du @ du_db1 @ db1_da1
    db2_da2 = db2_du @ du_da2
    s1, s2 = _skew(b1), _skew(b2)
    db3_da1 = -s2 @ db1_da1 + s1 @ db2_da1
    db3_da2 = s1 @ db2_da2
    zero = np.zeros_like(db1_da1)
    col1 = np.concatenate([db1_da1, zero], -1)
    col2 = np.concatenate([db2_da1, db2_da2], -1)
    col3 = np.concatenate([db3_da1, db3_da2], -1)
    return np.stack([col1, col2, col3], axis=-2)  # (..., 3 rows, 3 cols, 6)


def axis_angle_matrix(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for a fixed unit axis and a batch of angles."""
    K = _skew(np.asarray(axis, dtype=np.float64))
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


# ----------------------------------------------------------------------------- model


@dataclass(frozen=True)
class Link:
    name: str
    parent: int  # -1 for the root (attached to the wrist frame)
    joint: int  # -1 for a fixed link
    origin_rot: np.ndarray
    origin_pos: np.ndarray
    axis: np.ndarray
    cap_a: np.ndarray
    cap_b: np.ndarray
    radius: float
    anchor_center: np.ndarray
    anchor_radius: float
    surface_count: int


@dataclass(frozen=True)
class Joint:
    name: str
    lower: float
    upper: float


@dataclass(frozen=True)
class PointSet:
    """Points rigidly attached to links: link index per point plus link-local coordinates."""

    link: np.ndarray
    local: np.ndarray

    def __len__(self):
        return self.link.shape[0]


class HandModel:
    """Immutable kinematic tree with capsule geometry and derived point sets."""

    def __init__(
        self,
        links: list[Link],
        joints: list[Joint],
        fingertips: PointSet,
        contacts: PointSet,
        margin: float | None = None,
        name: str = "hand",
    ):
        self.name = name
        self.links = tuple(links)
        self.joints = tuple(joints)
        for i, lk in enumerate(self.links):
            if lk.parent >= i:
                raise InvalidInputError(f"link {lk.name} must come after its parent")
            if lk.anchor_radius > lk.radius:
                raise InvalidInputError(f"anchor of {lk.name} does not fit its capsule")
        for jt in self.joints:
            if not jt.lower < jt.upper:
                raise InvalidInputError(f"joint {jt.name} has lower >= upper")
        used = [lk.joint for lk in self.links if lk.joint >= 0]
        if sorted(used) != list(range(len(self.joints))):
            raise InvalidInputError("every joint must drive exactly one link")

        self.q_min = np.array([j.lower for j in self.joints])
        self.q_max = np.array([j.upper for j in self.joints])
        self.fingertips = fingertips
        self.contacts = contacts
        self.anchors = PointSet(
            np.arange(len(self.links)), np.array([lk.anchor_center for lk in self.links])
        )
        self.anchor_radii = np.array([lk.anchor_radius for lk in self.links])
        self.margin = float(margin) if margin is not None else 2.0 * float(self.anchor_radii.max())

        n = len(self.links)
        self.cap_a = np.array([lk.cap_a for lk in self.links])
        self.cap_b = np.array([lk.cap_b for lk in self.links])
        self.radii = np.array([lk.radius for lk in self.links])
        # subtree[l, m]: link m is link l or one of its descendants
        sub = np.eye(n, dtype=bool)
        for m in range(n - 1, -1, -1):
            p = self.links[m].parent
            if p >= 0:
                sub[p] |= sub[m]
        self.subtree = sub
        self.joint_link = np.array([next(i for i, lk in enumerate(self.links) if lk.joint == j) for j in range(self.dof)], dtype=np.int64)
        self.surface = self._sample_surface()
        for lk in self.links:
            a = np.asarray(lk.anchor_center)
            if _point_segment_dist(a[None], lk.cap_a[None], lk.cap_b[None])[0] + lk.anchor_radius > lk.radius + 1e-12:
                raise InvalidInputError(f"anchor of {lk.name} does not fit its capsule")

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def pose_dim(self) -> int:
        return EXTRINSIC_DIM + self.dof

    def point_set(self, selector) -> PointSet:
        if isinstance(selector, PointSet):
            return selector
        if isinstance(selector, tuple):
            return PointSet(np.asarray(selector[0], dtype=np.int64), np.asarray(selector[1], dtype=np.float64))
        try:
            return {"surface": self.surface, "fingertips": self.fingertips, "contacts": self.contacts, "anchors": self.anchors}[selector]
        except KeyError:
            raise InvalidInputError(f"unknown point set {selector!r}") from None

    def rest_pose(self) -> "GraspPose":
        return GraspPose(np.array([1.0, 0, 0, 0, 1, 0]), np.zeros(3), np.zeros(self.dof))

    def _sample_surface(self) -> PointSet:
        rest = _kinematics(self, self.rest_pose().vector()[None])
        links, pts = [], []
        for li, lk in enumerate(self.links):
            cand = _capsule_samples(lk.cap_a, lk.cap_b, lk.radius, 4 * lk.surface_count)
            world = cand @ rest.rot[0, li].T + rest.pos[0, li]
            others = [m for m in range(len(self.links)) if m != li]
            sdf_other = _capsule_sdf_all(self, rest, 0, world)[:, others].max(axis=1) if others else np.full(len(world), -np.inf)
            free = cand[sdf_other < -1e-5]
            # candidates are spatially ordered, so an even stride keeps coverage uniform
            pick = np.unique(np.round(np.linspace(0, len(free) - 1, min(lk.surface_count, len(free)))).astype(int))
            keep = free[pick]
            links.append(np.full(len(keep), li))
            pts.append(keep)
        return PointSet(np.concatenate(links), np.concatenate(pts))

    # -------------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        def v(a):
            return [float(x) for x in np.asarray(a).ravel()]

        names = [lk.name for lk in self.links]
        return {
            "format": HAND_FORMAT,
            "version": HAND_FORMAT_VERSION,
            "name": self.name,
            "margin": self.margin,
            "joints": [{"name": j.name, "lower": j.lower, "upper": j.upper} for j in self.joints],
            "links": [
                {
                    "name": lk.name,
                    "parent": names[lk.parent] if lk.parent >= 0 else None,
                    "joint": self.joints[lk.joint].name if lk.joint >= 0 else None,
                    "origin": {"rot": v(lk.origin_rot), "xyz": v(lk.origin_pos)},
                    "axis": v(lk.axis),
                    "capsule": {"a": v(lk.cap_a), "b": v(lk.cap_b), "radius": lk.radius},
                    "anchor": {"center": v(lk.anchor_center), "radius": lk.anchor_radius},
                    "surface_samples": lk.surface_count,
                }
                for lk in self.links
            ],
            "fingertips": [{"link": names[l], "point": v(p)} for l, p in zip(self.fingertips.link, self.fingertips.local)],
            "contact_candidates": [{"link": names[l], "point": v(p)} for l, p in zip(self.contacts.link, self.contacts.local)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HandModel":
        if doc.get("format") != HAND_FORMAT:
            raise InvalidInputError("not an afforddex hand document")
        if doc.get("version") != HAND_FORMAT_VERSION:
            raise InvalidInputError(f"unsupported hand format version {doc.get('version')}")
        joints = [Joint(j["name"], float(j["lower"]), float(j["upper"])) for j in doc["joints"]]
        jidx = {j.name: i for i, j in enumerate(joints)}
        lidx = {l["name"]: i for i, l in enumerate(doc["links"])}
        links = []
        for l in doc["links"]:
            axis = np.asarray(l.get("axis", [0, 0, 1]), dtype=np.float64)
            links.append(
                Link(
                    name=l["name"],
                    parent=lidx[l["parent"]] if l["parent"] is not None else -1,
                    joint=jidx[l["joint"]] if l["joint"] is not None else -1,
                    origin_rot=np.asarray(l["origin"]["rot"], dtype=np.float64).reshape(3, 3),
                    origin_pos=np.asarray(l["origin"]["xyz"], dtype=np.float64),
                    axis=axis / np.linalg.norm(axis),
                    cap_a=np.asarray(l["capsule"]["a"], dtype=np.float64),
                    cap_b=np.asarray(l["capsule"]["b"], dtype=np.float64),
                    radius=float(l["capsule"]["radius"]),
                    anchor_center=np.asarray(l["anchor"]["center"], dtype=np.float64),
                    anchor_radius=float(l["anchor"]["radius"]),
                    surface_count=int(l["surface_samples"]),
                )
            )

        def pset(items):
            return PointSet(
                np.array([lidx[i["link"]] for i in items], dtype=np.int64),
                np.array([i["point"] for i in items], dtype=np.float64).reshape(-1, 3),
            )

        return cls(links, joints, pset(doc["fingertips"]), pset(doc["contact_candidates"]), doc.get("margin"), doc.get("name", "hand"))


def save_hand(hand: HandModel, path) -> None:
    Path(path).write_text(json.dumps(hand.to_dict(), indent=2, sort_keys=True) + "\n")


def load_hand(path) -> HandModel:
    return HandModel.from_dict(json.loads(Path(path).read_text()))


def _capsule_samples(a, b, r, n) -> np.ndarray:
    """Deterministic, roughly uniform samples on a capsule surface."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = float(np.linalg.norm(axis))
    w = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
    tmp = np.array([1.0, 0, 0]) if abs(w[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(w, tmp)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(w, e1)
    cyl_area = 2 * math.pi * r * length
    sph_area = 4 * math.pi * r * r
    n_cyl = int(round(n * cyl_area / (cyl_area + sph_area)))
    n_sph = n - n_cyl
    out = []
    i = np.arange(n_cyl)
    s = (i + 0.5) / max(n_cyl, 1)
    ang = i * _GOLDEN
    out.append(a + s[:, None] * axis + r * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2))
    i = np.arange(n_sph)
    z = 1.0 - 2.0 * (i + 0.5) / max(n_sph, 1)
    rr = np.sqrt(1.0 - z * z)
    ang = i * _GOLDEN
    d = z[:, None] * w + rr[:, None] * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    centre = np.where((z >= 0)[:, None], b, a)
    out.append(centre + r * d)
    return np.concatenate(out)


def _point_segment_dist(p, a, b):
    ab = b - a
    denom = np.sum(ab * ab, -1)
    s = np.where(denom > 0, np.sum((p - a) * ab, -1) / np.where(denom > 0, denom, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    c = a + s[..., None] * ab
    return np.linalg.norm(p - c, axis=-1)


def default_hand() -> HandModel:
    """Three-finger, nine-joint capsule hand.

    Wrist frame: fingers extend along +z (the approach axis), the thumb sits
    at +x and the two opposing fingers at -x, so closing the hand squeezes
    along x. Each finger is a planar chain of three flexion joints whose
    positive direction curls toward the palm centre line.
    """
    I = np.eye(3)
    rz_pi = np.diag([-1.0, -1.0, 1.0])
    palm_r, fr, ar_f, ar_p = 0.02, 0.009, 0.007, 0.008
    lengths = (0.05, 0.035, 0.03)
    limits = ((-0.5, 1.5), (0.0, 1.6), (0.0, 1.4))
    links = [
        Link("palm", -1, -1, I, np.zeros(3), np.array([0, 0, 1.0]), np.array([-0.035, 0, 0]), np.array([0.035, 0, 0]),
             palm_r, np.zeros(3), ar_p, 58)
    ]
    joints = []
    tips_l, tips_p, con_l, con_p = [], [], [], []
    bases = (("thumb", np.array([0.035, 0.0, 0.02]), rz_pi), ("index", np.array([-0.035, 0.022, 0.02]), I), ("middle", np.array([-0.035, -0.022, 0.02]), I))
    for fname, base, rot in bases:
        parent = 0
        for seg, (length, (lo, hi)) in enumerate(zip(lengths, limits)):
            origin = base if seg == 0 else np.array([0, 0, lengths[seg - 1]])
            orot = rot if seg == 0 else I
            jn = len(joints)
            joints.append(Joint(f"{fname}_j{seg + 1}", lo, hi))
            li = len(links)
            links.append(
                Link(f"{fname}_{('prox', 'mid', 'dist')[seg]}", parent, jn, orot, origin, np.array([0, 1.0, 0]),
                     np.zeros(3), np.array([0, 0, length]), fr, np.array([0, 0, length / 2]), ar_f, 25 if seg < 2 else 16)
            )
            for s in (0.25, 0.5, 0.75):
                con_l.append(li)
                con_p.append([fr, 0.0, s * length])
            parent = li
        tips_l.append(parent)
        tips_p.append([fr, 0.0, lengths[-1]])
    for x in (-0.03, -0.015, 0.0, 0.015, 0.03):
        con_l.append(0)
        con_p.append([x, 0.0, palm_r])
    return HandModel(
        links,
        joints,
        PointSet(np.array(tips_l), np.array(tips_p, dtype=float)),
        PointSet(np.array(con_l), np.array(con_p, dtype=float)),
        name="tri-finger-capsule",
    )


# ----------------------------------------------------------------------------- poses


@dataclass
class GraspPose:
    rot6d: np.ndarray
    trans: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64).reshape(6)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rot6d, self.trans, self.joints])

    @classmethod
    def from_vector(cls, vec) -> "GraspPose":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:6], vec[6:9], vec[9:])

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot6d)

    def copy(self) -> "GraspPose":
        return GraspPose(self.rot6d.copy(), self.trans.copy(), self.joints.copy())


def pose_vector(pose) -> np.ndarray:
    return pose.vector() if isinstance(pose, GraspPose) else np.asarray(pose, dtype=np.float64)


@dataclass
class Kinematics:
    """Batched forward-kinematics state: wrist rotation plus world link frames."""

    vec: np.ndarray  # (B, D)
    wrist: np.ndarray  # (B, 3, 3)
    trans: np.ndarray  # (B, 3)
    rot: np.ndarray  # (B, L, 3, 3)
    pos: np.ndarray  # (B, L, 3)


def _kinematics(hand: HandModel, vec: np.ndarray, strict: bool = True, eps: float = 1e-12) -> Kinematics:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 2 or vec.shape[1] != hand.pose_dim:
        raise InvalidInputError(f"pose vector must have {hand.pose_dim} entries (got shape {vec.shape})")
    B = vec.shape[0]
    wrist = rot6d_to_matrix_batch(vec[:, :6], strict=strict, eps=eps)
    trans = vec[:, 6:9]
    q = vec[:, 9:]
    L = len(hand.links)
    rot = np.empty((B, L, 3, 3))
    pos = np.empty((B, L, 3))
    for i, lk in enumerate(hand.links):
        if lk.parent < 0:
            pr, pp = wrist, trans
        else:
            pr, pp = rot[:, lk.parent], pos[:, lk.parent]
        r = pr @ lk.origin_rot
        if lk.joint >= 0:
            r = r @ axis_angle_matrix(lk.axis, q[:, lk.joint])
        rot[:, i] = r
        pos[:, i] = pp + pr @ lk.origin_pos
    return Kinematics(vec, wrist, trans, rot, pos)


def kinematics(hand: HandModel, poses, strict: bool = True) -> Kinematics:
    """Forward kinematics for a pose or a ``(B, D)`` batch of pose vectors."""
    vec = pose_vector(poses) if isinstance(poses, GraspPose) else np.asarray(poses, dtype=np.float64)
    return _kinematics(hand, np.atleast_2d(vec), strict=strict)


def world_points(kin: Kinematics, ps: PointSet) -> np.ndarray:
    """World positions ``(B, P, 3)`` of link-attached points."""
    R = kin.rot[:, ps.link]
    return np.einsum("bpij,pj->bpi", R, ps.local) + kin.pos[:, ps.link]


def point_jacobian(hand: HandModel, kin: Kinematics, ps: PointSet, eps: float = 0.0) -> np.ndarray:
    """Analytic Jacobian ``(B, P, 3, D)`` of world points w.r.t. the pose vector."""
    pts = world_points(kin, ps)
    B, P, _ = pts.shape
    J = np.zeros((B, P, 3, hand.pose_dim))
    J[:, :, :, 6:9] = np.eye(3)
    y = np.einsum("bji,bpj->bpi", kin.wrist, pts - kin.trans[:, None, :])  # wrist-frame coords
    dR = rot6d_jacobian(kin.vec[:, :6], eps)
    J[:, :, :, :6] = np.einsum("bijk,bpj->bpik", dR, y)
    for j in range(hand.dof):
        lj = hand.joint_link[j]
        mask = hand.subtree[lj][ps.link]
        if not mask.any():
            continue
        omega = kin.rot[:, lj] @ hand.links[lj].axis  # (B, 3)
        arm = pts[:, mask] - kin.pos[:, lj][:, None, :]
        Jq = J[..., 9 + j]
        Jq[:, mask] = np.cross(omega[:, None, :], arm)
    return J


def point_vjp(hand: HandModel, kin: Kinematics, ps: PointSet, grad: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Vector-Jacobian product: ``sum_p J_p^T grad_p`` without forming J. Returns ``(B, D)``."""
    pts = world_points(kin, ps)
    B = pts.shape[0]
    out = np.zeros((B, hand.pose_dim))
    out[:, 6:9] = grad.sum(axis=1)
    y = np.einsum("bji,bpj->bpi", kin.wrist, pts - kin.trans[:, None, :])
    G = np.einsum("bpi,bpj->bij", grad, y)
    out[:, :6] = np.einsum("bij,bijk->bk", G, rot6d_jacobian(kin.vec[:, :6], eps))
    L = len(hand.links)
    F = np.zeros((B, L, 3))
    M = np.zeros((B, L, 3))
    np.add.at(F, (slice(None), ps.link), grad)
    np.add.at(M, (slice(None), ps.link), np.cross(pts, grad))
    sub = hand.subtree[hand.joint_link].astype(np.float64)  # (J, L)
    Fs = np.einsum("jl,blc->bjc", sub, F)
    Ms = np.einsum("jl,blc->bjc", sub, M)
    omega = np.einsum("bjik,jk->bji", kin.rot[:, hand.joint_link], np.array([lk.axis for lk in (hand.links[l] for l in hand.joint_link)]))
    origin = kin.pos[:, hand.joint_link]
    out[:, 9:] = np.sum(omega * (Ms - np.cross(origin, Fs)), axis=-1)
    return out


# ----------------------------------------------------------------------------- posed hand


@dataclass
class PosedHand:
    link_rot: np.ndarray
    link_pos: np.ndarray
    surface: np.ndarray
    fingertips: np.ndarray
    contacts: np.ndarray
    anchors: np.ndarray
    kin: Kinematics = field(repr=False)


def forward_kinematics(hand: HandModel, pose) -> PosedHand:
    vec = pose_vector(pose)
    if vec.shape != (hand.pose_dim,):
        raise InvalidInputError(f"pose has {vec.shape[0] - EXTRINSIC_DIM} joints, hand has {hand.dof}")
    kin = _kinematics(hand, vec[None])
    return PosedHand(
        kin.rot[0],
        kin.pos[0],
        world_points(kin, hand.surface)[0],
        world_points(kin, hand.fingertips)[0],
        world_points(kin, hand.contacts)[0],
        world_points(kin, hand.anchors)[0],
        kin,
    )


def fk_point_jacobian(hand: HandModel, pose, selector="surface") -> np.ndarray:
    """``(P, 3, D)`` Jacobian of a named point set (or ``(links, local)`` tuple)."""
    vec = pose_vector(pose)
    kin = _kinematics(hand, vec[None])
    return point_jacobian(hand, kin, hand.point_set(selector))[0]


# ----------------------------------------------------------------------------- signed distance


def _capsule_sdf_all(hand: HandModel, kin: Kinematics, b: int, pts: np.ndarray, return_closest: bool = False):
    """Per-capsule signed distance ``(P, L)`` (positive inside) for batch item ``b``."""
    R = kin.rot[b]  # (L, 3, 3)
    local = np.einsum("lji,plj->pli", R, pts[:, None, :] - kin.pos[b][None])  # R^T (p - o)
    a, ab = hand.cap_a, hand.cap_b - hand.cap_a
    denom = np.sum(ab * ab, -1)
    s = np.sum((local - a) * ab, -1) / np.where(denom > 0, denom, 1.0)
    s = np.clip(s, 0.0, 1.0)
    c = a + s[..., None] * ab
    diff = local - c
    dist = np.sqrt(np.sum(diff * diff, -1))
    sdf = hand.radii - dist
    if return_closest:
        return sdf, c, diff, dist
    return sdf


def hand_sdf(posed: PosedHand, hand: HandModel, p) -> np.ndarray | float:
    """Signed distance to the capsule union, positive inside the hand.

    Accepts a single 3-vector (returns a float) or an ``(P, 3)`` array.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    sdf = _capsule_sdf_all(hand, posed.kin, 0, np.atleast_2d(pts)).max(axis=1)
    return float(sdf[0]) if single else sdf


def sdf_with_grad(hand: HandModel, kin: Kinematics, pts: np.ndarray, active_weights=None):
    """Hand SDF at ``pts`` and the gradient of ``sum_i w_i * sdf_i`` w.r.t. the pose.

    ``active_weights`` is a per-point weight (default: 1 where sdf > 0, i.e. the
    penetration loss). Returns ``(sdf (P,), grad (D,))`` for batch item 0.
    """
    sdf_all, c, diff, dist = _capsule_sdf_all(hand, kin, 0, pts, return_closest=True)
    best = np.argmax(sdf_all, axis=1)
    rows = np.arange(len(pts))
    sdf = sdf_all[rows, best]
    w = (sdf > 0).astype(np.float64) if active_weights is None else np.asarray(active_weights, dtype=np.float64)
    sel = (w != 0) & (dist[rows, best] > 0)
    if not sel.any():
        return sdf, np.zeros(hand.pose_dim)
    link = best[sel]
    c_local = c[rows[sel], link]
    # outward normal in world frame at the closest axis point
    n_local = diff[rows[sel], link] / dist[rows[sel], link][:, None]
    n_world = np.einsum("pij,pj->pi", kin.rot[0, link], n_local)
    ps = PointSet(link, c_local)
    g = point_vjp(hand, Kinematics(kin.vec[:1], kin.wrist[:1], kin.trans[:1], kin.rot[:1], kin.pos[:1]), ps, (w[sel, None] * n_world)[None])
    return sdf, g[0]
