"""Affordance-guided test-time refinement of grasp poses.

The objective is a weighted sum of five terms evaluated through the hand
kinematics:

* ``aff_dist``   pull gated contact candidates onto the high-affordance region
* ``aff_finger`` keep fingertips that already touch that region in place
* ``pen``        object points inside the hand (summed depth)
* ``spen``       hinge on inter-link anchor distances
* ``joint``      joint-limit violation

All loss functions take raw pose vectors and return ``(value, grad)`` with the
gradient over the full pose vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .geometry import InvalidInputError
from .hand import GraspPose, HandModel, Kinematics, _kinematics, point_vjp, pose_vector, sdf_with_grad, world_points

log = logging.getLogger(__name__)

TERMS = ("aff_dist", "aff_finger", "pen", "spen", "joint")


class EmptyAffordanceRegion(InvalidInputError):
    """No scene point exceeds the affordance gate."""


@dataclass
class OptimConfig:
    lambdas: tuple = (100.0, 10.0, 100.0, 10.0, 100.0)
    iterations: int = 200
    step_size: float = 1e-3
    max_step: float | None = 0.02
    tau1: float = 0.01
    tau2: float = 0.5
    tau3: float = 0.01
    delta: float | None = None  # defaults to the hand's margin

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if len(self.lambdas) != 5 or any(x < 0 for x in self.lambdas):
            raise InvalidInputError("lambdas must be five non-negative weights")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if not 0.0 < self.tau2 < 1.0:
            raise InvalidInputError("tau2 must lie in (0, 1)")
        if self.step_size <= 0 or self.tau1 <= 0 or self.tau3 <= 0:
            raise InvalidInputError("step size and distance gates must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise InvalidInputError("max_step must be positive or None")


@dataclass
class LossBreakdown:
    aff_dist: float
    aff_finger: float
    pen: float
    spen: float
    joint: float
    total: float

    @classmethod
    def weighted(cls, values: dict, lambdas) -> "LossBreakdown":
        total = float(sum(l * values[k] for l, k in zip(lambdas, TERMS)))
        return cls(**{k: float(values[k]) for k in TERMS}, total=total)


def _kin(hand: HandModel, vec) -> Kinematics:
    return _kinematics(hand, np.asarray(vec, dtype=np.float64)[None])


class AffordanceRegion:
    """Scene points whose affordance exceeds ``tau2``, with nearest-point queries."""

    def __init__(self, scene, affordance, tau2: float):
        scene = geometry.as_cloud(scene, "scene")
        a = np.asarray(getattr(affordance, "values", affordance), dtype=np.float64)
        if a.shape != (scene.shape[0],):
            raise InvalidInputError("affordance map is not aligned with the scene")
        self.points = scene[a > tau2]
        if len(self.points) == 0:
            raise EmptyAffordanceRegion(f"no scene point has affordance above {tau2}")

    def query(self, p):
        d, idx = geometry.nearest(p, self.points)
        return d, self.points[idx]


# ----------------------------------------------------------------------------- loss terms
# Each public loss takes poses; the underscored kernels take precomputed
# kinematics so the refinement loop runs FK once per iteration.


def _aff_contact(hand, kin, region, dc, tau1):
    pr = world_points(kin, hand.contacts)[0]
    dr, nn = region.query(pr)
    gate = (dc < tau1) | (dr < tau1)
    loss = float(np.sum(dr[gate]))
    g = np.zeros_like(pr)
    on = gate & (dr > 0)
    g[on] = (pr[on] - nn[on]) / dr[on, None]
    return loss, point_vjp(hand, kin, hand.contacts, g[None])[0]


def _aff_fingertip(hand, kin, qc, gate):
    qr = world_points(kin, hand.fingertips)[0]
    diff = qr - qc
    n = np.linalg.norm(diff, axis=1)
    loss = float(np.sum(n[gate]))
    g = np.zeros_like(qr)
    on = gate & (n > 0)
    g[on] = diff[on] / n[on, None]
    return loss, point_vjp(hand, kin, hand.fingertips, g[None])[0]


def _penetration(hand, kin, pts):
    sdf, g = sdf_with_grad(hand, kin, pts)
    return float(np.sum(np.maximum(sdf, 0.0))), g


def _self_pen(hand, kin, delta):
    p = world_points(kin, hand.anchors)[0]
    lk = hand.anchors.link
    diff = p[:, None, :] - p[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    act = (lk[:, None] != lk[None, :]) & (dist < delta)
    loss = float(np.sum((delta - dist)[act]))
    safe = np.where(dist > 0, dist, 1.0)
    # ordered pair (i, j) moves p_i along -(p_i - p_j)/d and p_j the opposite way
    u = np.where((act & (dist > 0))[..., None], diff / safe[..., None], 0.0)
    g = -u.sum(axis=1) + u.sum(axis=0)
    return loss, point_vjp(hand, kin, hand.anchors, g[None])[0]


def _joint(hand, vec):
    q = vec[9:]
    if q.shape != hand.q_min.shape:
        raise InvalidInputError("pose joint count does not match the hand")
    over = q - hand.q_max
    under = hand.q_min - q
    loss = float(np.sum(np.maximum(over, 0.0)) + np.sum(np.maximum(under, 0.0)))
    g = np.zeros_like(vec)
    g[9:] = (over > 0).astype(float) - (under > 0).astype(float)
    return loss, g


def aff_contact_loss(coarse, refined, hand: HandModel, region: AffordanceRegion, tau1: float):
    """Sum of region distances of contact candidates gated on in either pose."""
    pc = world_points(_kin(hand, pose_vector(coarse)), hand.contacts)[0]
    return _aff_contact(hand, _kin(hand, pose_vector(refined)), region, region.query(pc)[0], tau1)


def aff_fingertip_loss(coarse, refined, hand: HandModel, region: AffordanceRegion, tau3: float):
    """Displacement of fingertips that start within ``tau3`` of the affordance region."""
    qc = world_points(_kin(hand, pose_vector(coarse)), hand.fingertips)[0]
    return _aff_fingertip(hand, _kin(hand, pose_vector(refined)), qc, region.query(qc)[0] < tau3)


def penetration_loss(scene, pose, hand: HandModel):
    """Summed penetration depth of scene points inside the hand capsules."""
    return _penetration(hand, _kin(hand, pose_vector(pose)), geometry.as_cloud(scene, "scene"))


def self_pen_loss(pose, hand: HandModel, delta: float | None = None):
    """Hinge ``max(0, delta - |p_i - p_j|)`` over ordered anchor pairs on different links."""
    return _self_pen(hand, _kin(hand, pose_vector(pose)), hand.margin if delta is None else delta)


def joint_limit_loss(pose, hand: HandModel):
    return _joint(hand, pose_vector(pose))


def max_penetration_depth(scene, pose, hand: HandModel) -> float:
    """Largest penetration depth in meters (0 if none)."""
    sdf, _ = sdf_with_grad(hand, _kin(hand, pose_vector(pose)), geometry.as_cloud(scene, "scene"), np.zeros(len(scene)))
    return float(max(sdf.max(), 0.0))


@dataclass
class CoarseGates:
    """Quantities fixed by the coarse (initial) pose."""

    contact_dist: np.ndarray | None
    tips: np.ndarray
    tip_gate: np.ndarray | None

    @classmethod
    def build(cls, hand: HandModel, coarse, region: AffordanceRegion | None, tau3: float) -> "CoarseGates":
        kin = _kin(hand, pose_vector(coarse))
        tips = world_points(kin, hand.fingertips)[0]
        if region is None:
            return cls(None, tips, None)
        return cls(region.query(world_points(kin, hand.contacts)[0])[0], tips, region.query(tips)[0] < tau3)


def objective(vec, gates: CoarseGates, scene, hand: HandModel, region: AffordanceRegion | None, cfg: OptimConfig):
    """Weighted objective ``(LossBreakdown, grad)``. Terms with zero weight are not evaluated."""
    l1, l2, l3, l4, l5 = cfg.lambdas
    kin = _kin(hand, vec)
    vals = dict.fromkeys(TERMS, 0.0)
    grad = np.zeros_like(vec)
    if region is not None and l1 > 0:
        vals["aff_dist"], g = _aff_contact(hand, kin, region, gates.contact_dist, cfg.tau1)
        grad += l1 * g
    if region is not None and l2 > 0:
        vals["aff_finger"], g = _aff_fingertip(hand, kin, gates.tips, gates.tip_gate)
        grad += l2 * g
    if l3 > 0:
        vals["pen"], g = _penetration(hand, kin, scene)
        grad += l3 * g
    if l4 > 0:
        vals["spen"], g = _self_pen(hand, kin, hand.margin if cfg.delta is None else cfg.delta)
        grad += l4 * g
    if l5 > 0:
        vals["joint"], g = _joint(hand, vec)
        grad += l5 * g
    return LossBreakdown.weighted(vals, cfg.lambdas), grad


# ----------------------------------------------------------------------------- refinement


def pose_scales(hand: HandModel, scene) -> np.ndarray:
    """Per-dimension scale of the normalized pose vector used for descent."""
    pts = geometry.as_cloud(scene, "scene")
    extent = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1))) or 1.0
    return np.concatenate([np.ones(6), np.full(3, extent), 0.5 * (hand.q_max - hand.q_min)])


@dataclass
class RefineResult:
    pose: GraspPose
    trace: list[LossBreakdown]
    best_iteration: int
    flags: list[str] = field(default_factory=list)

    def trace_jsonl(self, poses: list | None = None) -> str:
        lines = []
        for i, br in enumerate(self.trace):
            rec = {"iteration": i, **asdict(br)}
            if poses is not None:
                rec["pose"] = [float(x) for x in poses[i]]
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def refine_grasp(initial, scene, affordance, hand: HandModel, cfg: OptimConfig | None = None) -> RefineResult:
    """Gradient descent on the weighted objective; returns the best iterate seen.

    Descent runs on the pose vector with translation divided by the scene
    radius and joints by their half range. Each step is the fixed step size
    times the normalized gradient; steps longer than ``cfg.max_step`` (in
    normalized units) are shortened to that length.
    """
    cfg = cfg or OptimConfig()
    scene = geometry.as_cloud(scene, "scene")
    coarse = pose_vector(initial).copy()
    flags = []
    region = None
    if cfg.lambdas[0] > 0 or cfg.lambdas[1] > 0:
        try:
            region = AffordanceRegion(scene, affordance, cfg.tau2)
        except EmptyAffordanceRegion:
            flags.append("empty-affordance-region")
            log.warning("empty affordance region; refining without affordance terms")
    scale = pose_scales(hand, scene)
    gates = CoarseGates.build(hand, coarse, region, cfg.tau3)
    vec = coarse.copy()
    trace = []
    best_vec, best_total, best_it = vec.copy(), np.inf, 0
    for it in range(cfg.iterations + 1):
        br, grad = objective(vec, gates, scene, hand, region, cfg)
        trace.append(br)
        if br.total < best_total:
            best_vec, best_total, best_it = vec.copy(), br.total, it
        if it == cfg.iterations or br.total == 0.0:
            break
        step = cfg.step_size * grad * scale  # gradient w.r.t. normalized coordinates
        if cfg.max_step is not None:
            n = np.linalg.norm(step)
            if n > cfg.max_step:
                step *= cfg.max_step / n
        vec = vec - step * scale
    return RefineResult(GraspPose.from_vector(best_vec), trace, best_it, flags)
