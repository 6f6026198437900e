"""Conditional flow matching: a generic engine plus the affordance (AFM) and grasp (GFM) fields.

Both fields follow the straight-line path ``x_t = (1 - t) x0 + t x1`` from a
standard-normal source, regress the velocity ``x1 - x0``, and are sampled
with explicit Euler steps.

Conditioning uses a max-pool point encoder over the scene, a summed token
embedding for the guidance (category, intention, part) and a small MLP over
the one-hot approach direction. The grasp field also lets a query built from
the pose state and guidance attend over the per-point features.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import InvalidInputError, chamfer_with_grad
from .hand import HandModel, _kinematics, matrix_to_rot6d, point_vjp, rot6d_to_matrix_batch, world_points
from .neural import MLP, Adam, CrossAttention, Embedding, LocalPointEncoder, PointEncoder, TrainerConfig, afm_trainer_config, gfm_trainer_config, time_features

log = logging.getLogger(__name__)

AFM_STEPS = 10
GFM_STEPS = 20
LAMBDA_POSE = 10.0
LAMBDA_CHAMFER = 1.0
LAMBDA_TIP = 2.0
DIRECTIONS = ("front", "back", "left", "right", "up", "down")

C_SCENE = 64
C_AFF = 64
C_DIR = 16
C_LAN = 32
C_ATT = 64
N_TIME_FREQ = 4
T_DIM = 1 + 2 * N_TIME_FREQ
_RAW_EPS = 1e-10
TOKEN_DROPOUT = 0.2
N_NEIGHBORS = 16


@dataclass
class SamplerConfig:
    afm_steps: int = AFM_STEPS
    gfm_steps: int = GFM_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.afm_steps < 1 or self.gfm_steps < 1:
            raise InvalidInputError("sampler steps must be >= 1")


# ----------------------------------------------------------------------------- engine


def interpolate_path(x0, x1, t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise InvalidInputError("x0 and x1 must have the same shape")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidInputError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim)) if t.ndim else t
    return (1.0 - tb) * x0 + tb * x1


def _bcast_t(t, x):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def cfm_loss(field, x0, x1, t, condition=None):
    """Flow-matching regression loss and parameter gradients.

    Loss is ``mean_batch || v(x_t, t | c) - (x1 - x0) ||^2`` with the squared
    norm summed over state dimensions. Returns ``(loss, grads)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise InvalidInputError("x0 and x1 dimensions differ")
    xt = interpolate_path(x0, x1, t)
    v, cache = field.forward(xt, t, condition)
    if v.shape != x0.shape:
        raise InvalidInputError("velocity field output does not match state dimension")
    r = v - (x1 - x0)
    B = x0.shape[0]
    loss = float(np.sum(r * r) / B)
    grads = field.backward(cache, 2.0 * r / B)
    return loss, grads


def _call_field(field, x, t, condition):
    if hasattr(field, "forward"):
        return field.forward(x, t, condition)[0]
    return field(x, t, condition)


def euler_sample(field, x0, steps: int, condition=None):
    """Integrate ``dx/dt = v(x, t | c)`` from t=0 to 1 with ``steps`` explicit Euler steps."""
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    B = x.shape[0] if x.ndim else 1
    for i in range(steps):
        t = np.full(B, i * dt)
        x = x + dt * np.asarray(_call_field(field, x, t, condition))
    return x


def gfm_estimate_x1(x_t, t, field, condition=None):
    """One-step estimate ``x_t + (1 - t) v(x_t, t | c)`` of the clean sample."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1) or np.any(t < 0):
        raise InvalidInputError("t must lie in [0, 1)")
    x_t = np.asarray(x_t, dtype=np.float64)
    v = np.asarray(_call_field(field, x_t, t if t.ndim else np.full(x_t.shape[0], float(t)), condition))
    return x_t + (1.0 - _bcast_t(t, x_t)) * v


class MLPVelocityField:
    """Unconditional velocity field ``v(x, t)`` for vector states (engine sanity checks)."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 128, depth: int = 3):
        self.dim = dim
        self.net = MLP([dim + T_DIM] + [hidden] * depth + [dim], rng, name="vf")
        self.params = self.net.params

    def forward(self, x, t, condition=None):
        inp = np.concatenate([x, time_features(np.broadcast_to(t, x.shape[:1]), N_TIME_FREQ)], axis=1)
        v, cache = self.net.forward(inp)
        return v, cache

    def __call__(self, x, t, condition=None):
        return self.forward(x, t)[0]

    def backward(self, cache, gv):
        return self.net.backward(cache, gv)[1]


def fit_unconditional(field, sample_target, steps: int, cfg: TrainerConfig, rng: np.random.Generator) -> list[float]:
    """Train an unconditional field on draws from ``sample_target(n, rng)``."""
    opt = Adam(field.params, cfg, steps)
    losses = []
    for i in range(steps):
        x1 = sample_target(cfg.batch_size, rng)
        x0 = rng.standard_normal(x1.shape)
        t = rng.random(cfg.batch_size)
        loss, grads = cfm_loss(field, x0, x1, t)
        opt.step(grads, i)
        losses.append(loss)
    return losses


def energy_distance(x, y) -> float:
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    from scipy.spatial.distance import cdist

    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


# ----------------------------------------------------------------------------- conditioning


class Vocabulary:
    """Closed guidance vocabulary; unseen tokens map to ``<unk>``."""

    UNK = "<unk>"

    def __init__(self, tokens=()):
        self.tokens = [self.UNK] + sorted(set(tokens) - {self.UNK})
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @staticmethod
    def guidance_tokens(g: dict) -> list[str]:
        return [f"category:{g['category']}", f"intention:{g['intention']}", f"part:{g['part']}"]

    @classmethod
    def from_guidance(cls, records) -> "Vocabulary":
        return cls(t for g in records for t in cls.guidance_tokens(g))

    def encode(self, g: dict) -> np.ndarray:
        return np.array([self.index.get(t, 0) for t in self.guidance_tokens(g)], dtype=np.int64)

    def __len__(self):
        return len(self.tokens)


def affordance_to_state(a):
    """Affordance in [0, 1] to the flow state in [-1, 1] (unit-scale like the noise)."""
    return 2.0 * np.asarray(a, dtype=np.float64) - 1.0


def state_to_affordance(x):
    return 0.5 * (np.asarray(x, dtype=np.float64) + 1.0)


def drop_tokens(tokens: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each guidance token by ``<unk>`` with probability ``p`` so the unknown slot is trained."""
    if p <= 0:
        return tokens
    return np.where(rng.random(tokens.shape) < p, 0, tokens)


def direction_onehot(direction: str) -> np.ndarray:
    if direction not in DIRECTIONS:
        raise InvalidInputError(f"unknown direction {direction!r}")
    v = np.zeros(len(DIRECTIONS))
    v[DIRECTIONS.index(direction)] = 1.0
    return v


@dataclass
class SceneInput:
    """Scene cloud with the normalization frame and per-point encoder channels."""

    points: np.ndarray
    normals: np.ndarray
    center: np.ndarray = field(init=False)
    scale: float = field(init=False)
    xyz: np.ndarray = field(init=False, repr=False)
    feats: np.ndarray = field(init=False, repr=False)
    nbr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = geometry.as_cloud(self.points, "scene")
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.center = self.points.mean(axis=0)
        self.scale = float(np.max(np.linalg.norm(self.points - self.center, axis=1))) or 1.0
        self.xyz = (self.points - self.center) / self.scale
        self.feats = np.concatenate([self.xyz, self.normals, geometry.local_shape_descriptors(self.points)], axis=1)
        k = min(N_NEIGHBORS, len(self.points))
        self.nbr = geometry.NeighborIndex(self.points).knn(self.points, k)[0].reshape(len(self.points), k)


SCENE_CHANNELS = 10


class PoseNormalizer:
    """Maps raw pose vectors to the network state space and back.

    Translation is expressed relative to the scene centre in units of the
    scene radius; joints are mapped linearly from their limits to [-1, 1];
    the 6D rotation passes through.
    """

    def __init__(self, hand: HandModel):
        self.q_mid = 0.5 * (hand.q_max + hand.q_min)
        self.q_half = 0.5 * (hand.q_max - hand.q_min)

    def scales(self, scale) -> np.ndarray:
        scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
        B = scale.shape[0]
        return np.concatenate([np.ones((B, 6)), np.repeat(scale[:, None], 3, axis=1), np.broadcast_to(self.q_half, (B, self.q_half.size))], axis=1)

    def encode(self, raw, center, scale):
        raw = np.atleast_2d(raw)
        out = raw.copy()
        out[:, 6:9] = (raw[:, 6:9] - np.atleast_2d(center)) / np.atleast_1d(scale)[:, None]
        out[:, 9:] = (raw[:, 9:] - self.q_mid) / self.q_half
        return out

    def decode(self, norm, center, scale):
        norm = np.atleast_2d(norm)
        out = norm.copy()
        out[:, 6:9] = norm[:, 6:9] * np.atleast_1d(scale)[:, None] + np.atleast_2d(center)
        out[:, 9:] = norm[:, 9:] * self.q_half + self.q_mid
        return out


class _Conditioner:
    """Guidance embedding + direction MLP shared by both fields."""

    def __init__(self, vocab: Vocabulary, rng, prefix: str):
        self.vocab = vocab
        self.emb = Embedding(len(vocab), C_LAN, rng, name=f"{prefix}.lan")
        self.dir = MLP([len(DIRECTIONS), C_DIR, C_DIR], rng, name=f"{prefix}.dir")
        self.params = {**self.emb.params, **self.dir.params}

    def forward(self, tokens, dirs):
        lan = 0.0
        for c in range(tokens.shape[1]):
            lan = lan + self.emb.forward(tokens[:, c])[0]
        d, dcache = self.dir.forward(dirs)
        return lan, d, (tokens, dcache)

    def backward(self, cache, g_lan, g_dir):
        tokens, dcache = cache
        grads = {k: np.zeros_like(v) for k, v in self.emb.params.items()}
        for c in range(tokens.shape[1]):
            for k, v in self.emb.backward(tokens[:, c], g_lan).items():
                grads[k] += v
        grads.update(self.dir.backward(dcache, g_dir)[1])
        return grads


class AffordanceField:
    """Per-point velocity over an affordance map, conditioned on scene and guidance."""

    kind = "afm"

    def __init__(self, vocab: Vocabulary, seed: int = 0, hidden: int = 128):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.enc = LocalPointEncoder(SCENE_CHANNELS, C_SCENE, rng, name="afm.enc")
        self.cond = _Conditioner(vocab, rng, "afm")
        head_in = 1 + 3 + C_SCENE + C_SCENE + C_LAN + C_DIR + T_DIM
        self.head = MLP([head_in, hidden, hidden, 1], rng, name="afm.head")
        self.params = {**self.enc.params, **self.cond.params, **self.head.params}

    def forward(self, x, t, cond):
        B, M = x.shape
        per, glob, ecache = self.enc.forward(cond["feats"], cond["nbr"])
        lan, d, ccache = self.cond.forward(cond["tokens"], cond["dirs"])
        tf = time_features(np.broadcast_to(t, (B,)), N_TIME_FREQ)
        ctx = np.concatenate([glob, lan, d, tf], axis=1)
        inp = np.concatenate([x[..., None], cond["xyz"], per, np.broadcast_to(ctx[:, None, :], (B, M, ctx.shape[1]))], axis=2)
        g, hcache = self.head.forward(inp)
        # skip connection: at t = 0 the target x1 - x0 equals x1 - x, so the head only regresses x1
        return g[..., 0] - x, (ecache, ccache, hcache, M)

    def __call__(self, x, t, cond):
        return self.forward(x, t, cond)[0]

    def backward(self, cache, gv):
        ecache, ccache, hcache, M = cache
        gin, grads = self.head.backward(hcache, gv[..., None])
        o = 4
        g_per = gin[..., o : o + C_SCENE]
        o += C_SCENE
        g_ctx = gin[..., o:].sum(axis=1)
        g_glob = g_ctx[:, :C_SCENE]
        g_lan = g_ctx[:, C_SCENE : C_SCENE + C_LAN]
        g_dir = g_ctx[:, C_SCENE + C_LAN : C_SCENE + C_LAN + C_DIR]
        grads.update(self.enc.backward(ecache, g_per, g_glob)[1])
        grads.update(self.cond.backward(ccache, g_lan, g_dir))
        return grads


class GraspField:
    """Velocity over normalized grasp poses, conditioned on scene (+ affordance) and guidance."""

    kind = "gfm"

    def __init__(self, vocab: Vocabulary, pose_dim: int, use_affordance: bool = True, seed: int = 0, hidden: int = 256):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.pose_dim = pose_dim
        self.use_affordance = use_affordance
        in_ch = SCENE_CHANNELS + (4 if use_affordance else 0)
        self.enc = PointEncoder(in_ch, C_AFF, rng, name="gfm.enc")
        self.cond = _Conditioner(vocab, rng, "gfm")
        self.query_dim = pose_dim + C_LAN + C_DIR + T_DIM
        self.attn = CrossAttention(self.query_dim, C_AFF, C_ATT, rng, name="gfm.attn")
        self.head = MLP([self.query_dim + C_AFF + C_ATT, hidden, hidden, pose_dim], rng, name="gfm.head")
        self.params = {**self.enc.params, **self.cond.params, **self.attn.params, **self.head.params}

    @staticmethod
    def point_channels(scene_feats, xyz, affordance):
        a = np.asarray(affordance)[..., None]
        return np.concatenate([scene_feats, a, a * xyz], axis=-1)

    def forward(self, x, t, cond):
        B = x.shape[0]
        per, glob, ecache = self.enc.forward(cond["feats"])
        lan, d, ccache = self.cond.forward(cond["tokens"], cond["dirs"])
        tf = time_features(np.broadcast_to(t, (B,)), N_TIME_FREQ)
        query = np.concatenate([x, lan, d, tf], axis=1)
        att, acache = self.attn.forward(query, per)
        v, hcache = self.head.forward(np.concatenate([query, glob, att], axis=1))
        return v, (ecache, ccache, acache, hcache)

    def __call__(self, x, t, cond):
        return self.forward(x, t, cond)[0]

    def backward(self, cache, gv):
        ecache, ccache, acache, hcache = cache
        gin, grads = self.head.backward(hcache, gv)
        qd = self.query_dim
        g_query = gin[:, :qd]
        g_glob = gin[:, qd : qd + C_AFF]
        g_q, g_per, agrads = self.attn.backward(acache, gin[:, qd + C_AFF :])
        grads.update(agrads)
        g_query = g_query + g_q
        o = self.pose_dim
        g_lan = g_query[:, o : o + C_LAN]
        g_dir = g_query[:, o + C_LAN : o + C_LAN + C_DIR]
        grads.update(self.enc.backward(ecache, g_per, g_glob)[1])
        grads.update(self.cond.backward(ccache, g_lan, g_dir))
        return grads


# ----------------------------------------------------------------------------- grasp loss


def gfm_loss_batch(est_raw: np.ndarray, tgt_raw: np.ndarray, hand: HandModel, weights=(LAMBDA_POSE, LAMBDA_CHAMFER, LAMBDA_TIP)):
    """Composite pose / hand-chamfer / fingertip loss over a batch of raw pose vectors.

    ``L_pose`` is the mean squared error over pose dimensions, ``L_chamfer`` the
    unnormalized bidirectional chamfer between FK surface clouds and
    ``L_tip`` the summed squared fingertip displacement. Batch reduction is a
    mean. Returns ``(total, terms dict, grad wrt est_raw)``.
    """
    est_raw = np.atleast_2d(np.asarray(est_raw, dtype=np.float64))
    tgt_raw = np.atleast_2d(np.asarray(tgt_raw, dtype=np.float64))
    B, D = est_raw.shape
    lp, lc, lt = weights
    kin_e = _kinematics(hand, est_raw, strict=False, eps=_RAW_EPS)
    kin_t = _kinematics(hand, tgt_raw, strict=False, eps=_RAW_EPS)
    diff = est_raw - tgt_raw
    pose = np.mean(diff * diff, axis=1)
    surf_e = world_points(kin_e, hand.surface)
    surf_t = world_points(kin_t, hand.surface)
    cham, g_surf, _ = chamfer_with_grad(surf_e, surf_t)
    tip_d = world_points(kin_e, hand.fingertips) - world_points(kin_t, hand.fingertips)
    tip = np.sum(tip_d * tip_d, axis=(1, 2))
    total = float(np.mean(lp * pose + lc * cham + lt * tip))
    grad = lp * 2.0 * diff / D
    grad += point_vjp(hand, kin_e, hand.surface, lc * g_surf, eps=_RAW_EPS)
    grad += point_vjp(hand, kin_e, hand.fingertips, lt * 2.0 * tip_d, eps=_RAW_EPS)
    terms = {"pose": float(pose.mean()), "chamfer": float(cham.mean()), "tip": float(tip.mean())}
    return total, terms, grad / B


def gfm_loss(estimate, target, hand: HandModel, weights=(LAMBDA_POSE, LAMBDA_CHAMFER, LAMBDA_TIP)):
    """Single-grasp composite loss; returns ``(loss, grad wrt the estimate's pose vector)``."""
    from .hand import pose_vector

    total, _, grad = gfm_loss_batch(pose_vector(estimate)[None], pose_vector(target)[None], hand, weights)
    return total, grad[0]


# ----------------------------------------------------------------------------- augmentation
# Quarter turns about the vertical axis through the scene centre map the six
# direction tokens onto each other, so scenes, poses and guidance rotate together.

_QUARTER = {"front": "left", "left": "back", "back": "right", "right": "front", "up": "up", "down": "down"}


def quarter_turn_matrix(k: int) -> np.ndarray:
    c, s = ((1, 0), (0, 1), (-1, 0), (0, -1))[k % 4]
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def turn_direction(token: str, k: int) -> str:
    for _ in range(k % 4):
        token = _QUARTER[token]
    return token


def turn_scene(scene: SceneInput, k: int) -> SceneInput:
    R = quarter_turn_matrix(k)
    # rotation about the centre keeps the frame, neighbour lists and shape descriptors
    out = copy.copy(scene)
    out.points = (scene.points - scene.center) @ R.T + scene.center
    out.normals = scene.normals @ R.T
    out.xyz = scene.xyz @ R.T
    out.feats = np.concatenate([out.xyz, out.normals, scene.feats[:, 6:]], axis=1)
    return out


def turn_pose(vec, k: int, center) -> np.ndarray:
    """Rotate a raw pose vector by ``k`` quarter turns about z through ``center``."""
    R = quarter_turn_matrix(k)
    v = np.array(vec, dtype=np.float64)
    v[0:3] = R @ v[0:3]
    v[3:6] = R @ v[3:6]
    v[6:9] = R @ (v[6:9] - center) + center
    return v


class _TurnCache:
    """Rotated copies of each scene, built on first use."""

    def __init__(self):
        self._c = {}

    def get(self, scene: SceneInput, k: int) -> SceneInput:
        if k % 4 == 0:
            return scene
        key = (id(scene), k % 4)
        if key not in self._c:
            self._c[key] = (scene, turn_scene(scene, k))  # keep scene alive so id() stays unique
        return self._c[key][1]


def _turned_batch(ex, augment: bool, rng, cache: _TurnCache):
    """Scenes, guidances and turn counts for a batch (all zero turns when not augmenting)."""
    ks = rng.integers(0, 4, len(ex)) if augment else np.zeros(len(ex), dtype=np.int64)
    scenes = [cache.get(e.scene, int(k)) for e, k in zip(ex, ks)]
    guid = [{**e.guidance, "direction": turn_direction(e.guidance["direction"], int(k))} for e, k in zip(ex, ks)]
    return scenes, guid, ks


# ----------------------------------------------------------------------------- training


@dataclass
class AfmExample:
    scene: SceneInput
    guidance: dict
    affordance: np.ndarray


@dataclass
class GfmExample:
    scene: SceneInput
    guidance: dict
    affordance: np.ndarray
    grasp: np.ndarray  # raw pose vector


def _batches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch):
        yield perm[s : s + batch]


def _stack_points(arrs):
    sizes = {a.shape[0] for a in arrs}
    if len(sizes) != 1:
        raise InvalidInputError("all scenes in a batch must have the same point count")
    return np.stack(arrs)


def afm_condition(field: AffordanceField, scenes, guidances):
    return {
        "feats": _stack_points([s.feats for s in scenes]),
        "xyz": _stack_points([s.xyz for s in scenes]),
        "nbr": np.stack([s.nbr for s in scenes]),
        "tokens": np.stack([field.vocab.encode(g) for g in guidances]),
        "dirs": np.stack([direction_onehot(g["direction"]) for g in guidances]),
    }


def gfm_condition(field: GraspField, scenes, guidances, affordances=None):
    if field.use_affordance:
        if affordances is None:
            raise InvalidInputError("affordance-conditioned GFM needs affordance maps")
        feats = _stack_points([GraspField.point_channels(s.feats, s.xyz, a) for s, a in zip(scenes, affordances)])
    else:
        feats = _stack_points([s.feats for s in scenes])
    return {
        "feats": feats,
        "nbr": np.stack([s.nbr for s in scenes]),
        "tokens": np.stack([field.vocab.encode(g) for g in guidances]),
        "dirs": np.stack([direction_onehot(g["direction"]) for g in guidances]),
    }


@dataclass
class TrainResult:
    field: object
    epoch_losses: list[float]


def train_afm(
    dataset: list[AfmExample],
    config: TrainerConfig | None = None,
    vocab: Vocabulary | None = None,
    token_dropout: float = TOKEN_DROPOUT,
    augment: bool = True,
) -> TrainResult:
    """Train the affordance field; ``augment`` applies random quarter turns about z."""
    if not dataset:
        raise InvalidInputError("empty AFM dataset")
    cfg = config or afm_trainer_config()
    vocab = vocab or Vocabulary.from_guidance(e.guidance for e in dataset)
    fld = AffordanceField(vocab, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    steps = cfg.epochs * math.ceil(len(dataset) / cfg.batch_size)
    opt = Adam(fld.params, cfg, steps)
    turns = _TurnCache()
    epoch_losses = []
    for ep in range(cfg.epochs):
        tot = 0.0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            ex = [dataset[i] for i in idx]
            scenes, guid, _ = _turned_batch(ex, augment, rng, turns)
            cond = afm_condition(fld, scenes, guid)
            cond["tokens"] = drop_tokens(cond["tokens"], token_dropout, rng)
            x1 = affordance_to_state(np.stack([e.affordance for e in ex]))
            x0 = rng.standard_normal(x1.shape)
            t = rng.random(len(ex))
            loss, grads = cfm_loss(fld, x0, x1, t, cond)
            opt.step(grads)
            tot += loss * len(ex)
        epoch_losses.append(tot / len(dataset))
        log.debug("afm epoch %d loss %.5f", ep, epoch_losses[-1])
    return TrainResult(fld, epoch_losses)


def train_gfm(
    dataset: list[GfmExample],
    hand: HandModel,
    config: TrainerConfig | None = None,
    use_affordance: bool = True,
    vocab: Vocabulary | None = None,
    token_dropout: float = TOKEN_DROPOUT,
    augment: bool = True,
) -> TrainResult:
    """Train the grasp field with the one-step estimate fed into the composite loss.

    No object-penetration term is used here; penetration is handled at test
    time by refinement.
    """
    if not dataset:
        raise InvalidInputError("empty GFM dataset")
    cfg = config or gfm_trainer_config()
    vocab = vocab or Vocabulary.from_guidance(e.guidance for e in dataset)
    fld = GraspField(vocab, hand.pose_dim, use_affordance=use_affordance, seed=cfg.seed)
    norm = PoseNormalizer(hand)
    rng = np.random.default_rng(cfg.seed + 1)
    steps = cfg.epochs * math.ceil(len(dataset) / cfg.batch_size)
    opt = Adam(fld.params, cfg, steps)
    turns = _TurnCache()
    epoch_losses = []
    for ep in range(cfg.epochs):
        tot = 0.0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            ex = [dataset[i] for i in idx]
            scenes, guid, ks = _turned_batch(ex, augment, rng, turns)
            cond = gfm_condition(fld, scenes, guid, [e.affordance for e in ex])
            cond["tokens"] = drop_tokens(cond["tokens"], token_dropout, rng)
            centers = np.stack([s.center for s in scenes])
            scales = np.array([s.scale for s in scenes])
            target = np.stack([turn_pose(e.grasp, int(k), s.center) for e, k, s in zip(ex, ks, scenes)])
            x1 = norm.encode(target, centers, scales)
            x0 = rng.standard_normal(x1.shape)
            t = rng.random(len(ex))
            xt = interpolate_path(x0, x1, t)
            v, fcache = fld.forward(xt, t, cond)
            x1_hat = xt + (1.0 - t)[:, None] * v
            raw_hat = norm.decode(x1_hat, centers, scales)
            loss, _, g_raw = gfm_loss_batch(raw_hat, target, hand)
            g_v = (1.0 - t)[:, None] * g_raw * norm.scales(scales)
            opt.step(fld.backward(fcache, g_v))
            tot += loss * len(ex)
        epoch_losses.append(tot / len(dataset))
        log.debug("gfm epoch %d loss %.5f", ep, epoch_losses[-1])
    return TrainResult(fld, epoch_losses)


# ----------------------------------------------------------------------------- sampling


def sample_affordance(fld: AffordanceField, scene: SceneInput, guidance: dict, steps: int = AFM_STEPS, rng=None, n: int = 1) -> np.ndarray:
    """Draw ``n`` affordance maps ``(n, M)`` clipped to [0, 1]."""
    rng = np.random.default_rng(0) if rng is None else rng
    cond = afm_condition(fld, [scene] * n, [guidance] * n)
    x = euler_sample(fld, rng.standard_normal((n, scene.points.shape[0])), steps, cond)
    return np.clip(state_to_affordance(x), 0.0, 1.0)


def sample_grasps(
    fld: GraspField,
    hand: HandModel,
    scene: SceneInput,
    guidance: dict,
    affordance=None,
    steps: int = GFM_STEPS,
    rng=None,
    n: int = 1,
) -> np.ndarray:
    """Draw ``n`` raw grasp pose vectors ``(n, D)`` with orthonormalized rotations."""
    rng = np.random.default_rng(0) if rng is None else rng
    cond = gfm_condition(fld, [scene] * n, [guidance] * n, None if affordance is None else [affordance] * n)
    x = euler_sample(fld, rng.standard_normal((n, hand.pose_dim)), steps, cond)
    raw = PoseNormalizer(hand).decode(x, np.repeat(scene.center[None], n, 0), np.full(n, scene.scale))
    raw[:, :6] = matrix_to_rot6d(rot6d_to_matrix_batch(raw[:, :6], strict=False))
    return raw


# ----------------------------------------------------------------------------- persistence


def field_header(fld, cfg: TrainerConfig | None = None) -> dict:
    hdr = {"tag": fld.kind, "vocabulary": fld.vocab.tokens}
    if isinstance(fld, GraspField):
        hdr.update(pose_dim=fld.pose_dim, use_affordance=fld.use_affordance)
    if cfg is not None:
        hdr["trainer"] = cfg
    return hdr


def field_from_checkpoint(params: dict, header: dict):
    vocab = Vocabulary(header["vocabulary"])
    if header["tag"] == "afm":
        fld = AffordanceField(vocab)
    elif header["tag"] == "gfm":
        fld = GraspField(vocab, header["pose_dim"], use_affordance=header["use_affordance"])
    else:
        raise InvalidInputError(f"unknown checkpoint tag {header['tag']!r}")
    if set(params) != set(fld.params):
        raise InvalidInputError("checkpoint parameters do not match the field layout")
    for k, v in params.items():
        if fld.params[k].shape != v.shape:
            raise InvalidInputError(f"shape mismatch for {k}")
        fld.params[k][...] = v
    return fld
