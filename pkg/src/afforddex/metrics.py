"""Evaluation: grasp quality (Q1, success proxy, penetration), diversity, intention CD and R-precision."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.spatial.transform import Rotation

from . import geometry
from .geometry import InvalidInputError
from .hand import GraspPose, HandModel, PosedHand, forward_kinematics, hand_sdf, pose_vector
from .neural import MLP, Adam, Embedding, PointEncoder, TrainerConfig

log = logging.getLogger(__name__)

DIVERSITY_SAMPLES = 8
POOL_SIZE = 32
SAME_CATEGORY_DISTRACTORS = 3


# ----------------------------------------------------------------------------- grasp quality


@dataclass
class Q1Config:
    mu: float = 0.5
    cone_edges: int = 8
    contact_threshold: float = 0.01  # m
    penetration_threshold: float = 0.005  # m
    n_directions: int = 2048
    direction_seed: int = 20240601
    success_margin: float = 0.1

    def __post_init__(self):
        if self.mu <= 0:
            raise InvalidInputError("mu must be positive")
        if self.cone_edges < 3:
            raise InvalidInputError("cone_edges must be >= 3")
        if self.n_directions < 1:
            raise InvalidInputError("n_directions must be >= 1")


_DIRECTION_CACHE: dict = {}


def wrench_directions(n: int = 2048, seed: int = 20240601) -> np.ndarray:
    """Fixed, versioned set of unit directions in R^6 (Gaussian draws, normalized)."""
    key = (n, seed)
    if key not in _DIRECTION_CACHE:
        u = np.random.default_rng(seed).standard_normal((n, 6))
        _DIRECTION_CACHE[key] = u / np.linalg.norm(u, axis=1, keepdims=True)
    return _DIRECTION_CACHE[key]


def _tangent_basis(n):
    a = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return t1, np.cross(n, t1)


def contact_wrenches(positions, normals, center, radius: float, mu: float, edges: int) -> np.ndarray:
    """Friction-cone edge wrenches ``(K*edges, 6)``.

    ``normals`` point out of the object; each edge force is ``-n + mu * t`` (unit
    normal component). Torques are taken about ``center`` and divided by ``radius``.
    """
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    t1, t2 = _tangent_basis(n)
    ang = 2 * np.pi * np.arange(edges) / edges
    f = -n[:, None, :] + mu * (np.cos(ang)[None, :, None] * t1[:, None, :] + np.sin(ang)[None, :, None] * t2[:, None, :])
    tau = np.cross((p - np.asarray(center))[:, None, :], f) / radius
    return np.concatenate([f, tau], axis=-1).reshape(-1, 6)


def origin_interior(W: np.ndarray) -> bool:
    """True if the origin lies in the interior of the convex hull of the rows of ``W``."""
    if len(W) < 7 or np.linalg.matrix_rank(W, tol=1e-9) < 6:
        return False
    # a strictly positive combination summing to zero (lambda >= 1 after rescaling)
    res = linprog(np.zeros(len(W)), A_eq=W.T, b_eq=np.zeros(6), bounds=[(1.0, None)] * len(W), method="highs")
    return res.status == 0


def q1_from_wrenches(W: np.ndarray, directions: np.ndarray) -> float:
    """Minimum sampled support ``min_u max_i u . w_i`` if the origin is interior, else 0."""
    if len(W) == 0 or not origin_interior(W):
        return 0.0
    return float(max(np.min(np.max(directions @ W.T, axis=1)), 0.0))


def detect_contacts(obj_points, obj_normals, posed: PosedHand, threshold: float):
    """Object points within ``threshold`` of the posed hand surface, with their normals."""
    pts = geometry.as_cloud(obj_points, "object")
    d = geometry.nearest_distances(pts, posed.surface)
    sel = d < threshold
    return pts[sel], np.asarray(obj_normals, dtype=np.float64)[sel]


def _object_frame(pts):
    c = pts.mean(axis=0)
    return c, float(np.max(np.linalg.norm(pts - c, axis=1))) or 1.0


def max_penetration(scene, posed: PosedHand, hand: HandModel) -> float:
    """Maximal penetration depth of scene points into the hand, in centimetres."""
    sdf = hand_sdf(posed, hand, geometry.as_cloud(scene, "scene"))
    return float(max(np.max(sdf), 0.0) * 100.0)


def q1_ferrari_canny(obj_points, obj_normals, posed: PosedHand, hand: HandModel, cfg: Q1Config | None = None) -> float:
    """Epsilon quality of the contacts between a posed hand and an object cloud.

    Returns 0 without force closure, without contacts, or when the maximum
    penetration exceeds ``cfg.penetration_threshold``.
    """
    cfg = cfg or Q1Config()
    pts = geometry.as_cloud(obj_points, "object")
    if max_penetration(pts, posed, hand) / 100.0 > cfg.penetration_threshold:
        return 0.0
    cp, cn = detect_contacts(pts, obj_normals, posed, cfg.contact_threshold)
    if len(cp) == 0:
        return 0.0
    c, rad = _object_frame(pts)
    W = contact_wrenches(cp, cn, c, rad, cfg.mu, cfg.cone_edges)
    return q1_from_wrenches(W, wrench_directions(cfg.n_directions, cfg.direction_seed))


def resists(W: np.ndarray, target: np.ndarray, tol: float = 1e-6) -> bool:
    """Whether ``target`` is a non-negative combination of the rows of ``W`` (NNLS residual test)."""
    if len(W) == 0:
        return False
    _, r = nnls(W.T, target)
    return r <= tol * max(1.0, np.linalg.norm(target))


def _gravity(k: int) -> np.ndarray:
    g = np.zeros(6)
    g[k // 2] = 1.0 if k % 2 == 0 else -1.0
    return g


def resists_gravity(W: np.ndarray, k: int, margin: float = 0.1) -> bool:
    """Can the contacts robustly oppose gravity along axis direction ``k`` (+x, -x, +y, -y, +z, -z)?

    The opposing wrench and its perturbations by ``margin`` along every wrench
    axis must all be attainable, so a lone frictionless contact never counts.
    """
    need = -_gravity(k)
    if not resists(W, need):
        return False
    return margin <= 0 or all(resists(W, need + s * margin * e) for e in np.eye(6) for s in (1.0, -1.0))


def gravity_resistance(W: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Per-direction results of :func:`resists_gravity` for all six axis directions."""
    return np.array([resists_gravity(W, k, margin) for k in range(6)])


def success_proxy(obj_points, obj_normals, posed: PosedHand, hand: HandModel, mu: float | None = None, cfg: Q1Config | None = None) -> bool:
    """True if the contact wrenches robustly oppose at least one of six axis gravity wrenches."""
    cfg = cfg or Q1Config()
    mu = cfg.mu if mu is None else mu
    pts = geometry.as_cloud(obj_points, "object")
    cp, cn = detect_contacts(pts, obj_normals, posed, cfg.contact_threshold)
    if len(cp) == 0:
        return False
    c, rad = _object_frame(pts)
    W = contact_wrenches(cp, cn, c, rad, mu, cfg.cone_edges)
    return any(resists_gravity(W, k, cfg.success_margin) for k in range(6))


# ----------------------------------------------------------------------------- diversity and CD


@dataclass
class DiversityReport:
    delta_t: float  # cm
    delta_r: float  # degrees
    delta_q: float  # degrees


def diversity(samples) -> DiversityReport:
    """Mean per-dimension population standard deviation of translation (cm), intrinsic XYZ Euler angles (deg) and joints (deg)."""
    vecs = np.stack([pose_vector(s) for s in samples]) if len(samples) else np.zeros((0, 0))
    if len(vecs) < 2:
        raise InvalidInputError("diversity needs at least two samples")
    from .hand import rot6d_to_matrix_batch

    eul = Rotation.from_matrix(rot6d_to_matrix_batch(vecs[:, :6])).as_euler("XYZ", degrees=True)

    def spread(x):
        # centring on the first sample keeps identical samples at exactly zero
        return float(np.mean(np.std(x - x[0], axis=0)))

    return DiversityReport(spread(vecs[:, 6:9] * 100.0), spread(eul), spread(np.degrees(vecs[:, 9:])))


def intention_cd(pred, pool, hand: HandModel) -> float:
    """Normalized chamfer (m^2) from the predicted hand cloud to the closest pool member."""
    if len(pool) == 0:
        raise InvalidInputError("intention_cd needs a non-empty pool")
    hp = forward_kinematics(hand, pred).surface
    return min(geometry.chamfer_distance(hp, forward_kinematics(hand, g).surface, normalized=True) for g in pool)


# ----------------------------------------------------------------------------- evaluation encoder


def action_key(g: dict) -> tuple:
    return (g["intention"], g["part"], g["direction"])


def guidance_key(g: dict) -> tuple:
    return (g["category"],) + action_key(g)


def match_matrix(guidances) -> np.ndarray:
    """``M[i, j]``: same category and same action (intention, part, direction)."""
    keys = [guidance_key(g) for g in guidances]
    return np.array([[a == b for b in keys] for a in keys])


def info_nce(g: np.ndarray, f: np.ndarray, match: np.ndarray, tau: float):
    """Multi-positive InfoNCE over cosine similarities; returns ``(loss, dL/dg, dL/df)`` for raw features."""
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    gn_ = np.linalg.norm(g, axis=1, keepdims=True)
    fn_ = np.linalg.norm(f, axis=1, keepdims=True)
    gh, fh = g / gn_, f / fn_
    S = gh @ fh.T / tau
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    den = E.sum(axis=1)
    num = (E * match).sum(axis=1)
    B = len(g)
    loss = float(np.mean(np.log(den) - np.log(num)))
    P = E / den[:, None]
    Q = E * match / num[:, None]
    dS = (P - Q) / (B * tau)
    dgh = dS @ fh
    dfh = dS.T @ gh
    dg = (dgh - gh * np.sum(dgh * gh, axis=1, keepdims=True)) / gn_
    df = (dfh - fh * np.sum(dfh * fh, axis=1, keepdims=True)) / fn_
    return loss, dg, df


@dataclass
class EvalEncoderConfig:
    feat_dim: int = 32
    tau: float = 0.1
    batch_size: int = 32
    steps: int = 300
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidInputError("tau must be positive")
        if self.batch_size < 8:
            raise InvalidInputError("batch_size must be >= 8")


class EvalEncoder:
    """Hand-object cloud encoder and guidance encoder projecting to a shared unit sphere."""

    def __init__(self, vocab_tokens, cfg: EvalEncoderConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.tokens = ["<unk>"] + sorted(set(vocab_tokens) - {"<unk>"})
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.enc = PointEncoder(4, 64, rng, name="eval.enc")
        self.gproj = MLP([64, 64, cfg.feat_dim], rng, name="eval.gproj")
        self.emb = Embedding(len(self.tokens), 64, rng, name="eval.emb")
        self.fproj = MLP([64, 64, cfg.feat_dim], rng, name="eval.fproj")
        self.params = {**self.enc.params, **self.gproj.params, **self.emb.params, **self.fproj.params}

    @staticmethod
    def guidance_tokens(g: dict) -> list[str]:
        return [f"category:{g['category']}", f"intention:{g['intention']}", f"part:{g['part']}", f"direction:{g['direction']}"]

    def _ids(self, guidances):
        return np.array([[self.index.get(t, 0) for t in self.guidance_tokens(g)] for g in guidances], dtype=np.int64)

    @staticmethod
    def grasp_cloud(obj_points, hand_points) -> np.ndarray:
        """Concatenated hand/object cloud in the object frame with a hand indicator channel."""
        c, rad = _object_frame(np.asarray(obj_points))
        o = (np.asarray(obj_points) - c) / rad
        h = (np.asarray(hand_points) - c) / rad
        return np.concatenate([np.c_[o, np.zeros(len(o))], np.c_[h, np.ones(len(h))]])

    def _g_forward(self, clouds):
        _, glob, ecache = self.enc.forward(clouds)
        g, pcache = self.gproj.forward(glob)
        return g, (ecache, pcache)

    def _f_forward(self, guidances):
        ids = self._ids(guidances)
        e = sum(self.emb.forward(ids[:, c])[0] for c in range(ids.shape[1]))
        f, pcache = self.fproj.forward(e)
        return f, (ids, pcache)

    def grasp_features(self, clouds) -> np.ndarray:
        g = self._g_forward(np.asarray(clouds))[0]
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def guidance_features(self, guidances) -> np.ndarray:
        f = self._f_forward(guidances)[0]
        return f / np.linalg.norm(f, axis=1, keepdims=True)

    def loss_and_grads(self, clouds, guidances):
        g, (ecache, gcache) = self._g_forward(clouds)
        f, (ids, fcache) = self._f_forward(guidances)
        loss, dg, df = info_nce(g, f, match_matrix(guidances), self.cfg.tau)
        grads = {}
        gglob, gr = self.gproj.backward(gcache, dg)
        grads.update(gr)
        grads.update(self.enc.backward(ecache, None, gglob)[1])
        ge, fr = self.fproj.backward(fcache, df)
        grads.update(fr)
        tg = np.zeros_like(self.emb.params["eval.emb.table"])
        for c in range(ids.shape[1]):
            tg += self.emb.backward(ids[:, c], ge)["eval.emb.table"]
        grads["eval.emb.table"] = tg
        return loss, grads


def category_batches(categories, batch_size: int, rng: np.random.Generator, n_cat: int = 8):
    """Index batches drawing ``n_cat`` distinct categories with ``batch_size // n_cat`` items each.

    With fewer than ``n_cat`` categories a warning is issued and batches are
    drawn uniformly.
    """
    categories = np.asarray(categories)
    uniq = sorted(set(categories.tolist()))
    if len(uniq) < n_cat:
        warnings.warn(f"only {len(uniq)} categories (< {n_cat}); falling back to uniform batches", RuntimeWarning, stacklevel=2)
        while True:
            yield rng.choice(len(categories), size=min(batch_size, len(categories)), replace=False)
    per = batch_size // n_cat
    by_cat = {c: np.flatnonzero(categories == c) for c in uniq}
    while True:
        cats = rng.choice(len(uniq), size=n_cat, replace=False)
        idx = [rng.choice(by_cat[uniq[c]], size=per, replace=len(by_cat[uniq[c]]) < per) for c in cats]
        yield np.concatenate(idx)


def train_eval_encoder(clouds: np.ndarray, guidances: list[dict], cfg: EvalEncoderConfig | None = None) -> tuple[EvalEncoder, list[float]]:
    """Contrastive training of the evaluation encoder on (hand-object cloud, guidance) pairs."""
    cfg = cfg or EvalEncoderConfig()
    if len(clouds) != len(guidances) or len(guidances) == 0:
        raise InvalidInputError("need one guidance per cloud and a non-empty dataset")
    tokens = [t for g in guidances for t in EvalEncoder.guidance_tokens(g)]
    enc = EvalEncoder(tokens, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    tcfg = TrainerConfig(lr_start=cfg.lr, lr_end=cfg.lr * 0.1, weight_decay=0.0, batch_size=cfg.batch_size, seed=cfg.seed)
    opt = Adam(enc.params, tcfg, cfg.steps)
    batches = category_batches([g["category"] for g in guidances], cfg.batch_size, rng)
    losses = []
    clouds = np.asarray(clouds)
    for step in range(cfg.steps):
        idx = next(batches)
        loss, grads = enc.loss_and_grads(clouds[idx], [guidances[i] for i in idx])
        opt.step(grads, step)
        losses.append(loss)
    return enc, losses


# ----------------------------------------------------------------------------- R-precision


def build_pool(gt: dict, candidates: list[dict], rng: np.random.Generator, pool_size: int = POOL_SIZE, n_same: int = SAME_CATEGORY_DISTRACTORS) -> list[dict]:
    """Ground truth first, then same-category/different-action and other-category distractors.

    Candidates are de-duplicated by guidance key. If there are not enough of
    either kind, the pool is smaller and a warning is issued.
    """
    seen, uniq = set(), []
    for c in candidates:
        k = guidance_key(c)
        if k not in seen:
            seen.add(k)
            uniq.append(c)
    same = [c for c in uniq if c["category"] == gt["category"] and action_key(c) != action_key(gt)]
    other = [c for c in uniq if c["category"] != gt["category"]]
    n_other = pool_size - 1 - n_same
    if len(same) < n_same or len(other) < n_other:
        warnings.warn("not enough candidates for a full retrieval pool; using a smaller pool", RuntimeWarning, stacklevel=2)
    pick_s = [same[i] for i in rng.choice(len(same), size=min(n_same, len(same)), replace=False)] if same else []
    pick_o = [other[i] for i in rng.choice(len(other), size=min(n_other, len(other)), replace=False)] if other else []
    return [gt] + pick_s + pick_o


def rank_of_first(sims: np.ndarray) -> int:
    """1-based rank of entry 0; ties count against it."""
    return int(1 + np.sum(sims[1:] >= sims[0]))


def r_precision_from_features(grasp_feats: np.ndarray, pool_feats: list[np.ndarray], top_k=(1, 2, 3)) -> dict:
    """Top-k hit rates given each grasp feature and its pool's guidance features (ground truth first)."""
    ranks = []
    for g, pf in zip(grasp_feats, pool_feats):
        gh = g / np.linalg.norm(g)
        ph = pf / np.linalg.norm(pf, axis=1, keepdims=True)
        ranks.append(rank_of_first(ph @ gh))
    ranks = np.array(ranks)
    return {f"top{k}": float(np.mean(ranks <= k)) for k in top_k}


def r_precision(encoder, clouds, gts: list[dict], candidates: list[dict], rng: np.random.Generator, pool_size: int = POOL_SIZE, top_k=(1, 2, 3)) -> dict:
    """R-precision of generated grasps (as hand-object clouds) against their ground-truth guidance."""
    if len(gts) == 0:
        raise InvalidInputError("no grasps to evaluate")
    gf = encoder.grasp_features(np.asarray(clouds))
    pools = [build_pool(gt, candidates, rng, pool_size) for gt in gts]
    pf = [encoder.guidance_features(p) for p in pools]
    return r_precision_from_features(gf, pf, top_k)


def random_top1_band(pool_size: int = POOL_SIZE, trials: int = 10_000) -> tuple[float, float]:
    """``1/pool ± 3 sigma`` binomial band for the mean top-1 hit rate of random features."""
    p = 1.0 / pool_size
    s = math.sqrt(p * (1 - p) / trials)
    return p - 3 * s, p + 3 * s
