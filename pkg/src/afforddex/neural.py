"""Small numpy networks with hand-written backprop, an AdamW optimizer and checkpoints.

Every module keeps its parameters in a flat ``dict[str, ndarray]`` so a model
is just the union of its modules' dicts; gradients use the same keys.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import InvalidInputError

CHECKPOINT_FORMAT = "afforddex-checkpoint"
CHECKPOINT_VERSION = 1


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


class MLP:
    """Fully connected net with SiLU between layers and a linear output."""

    def __init__(self, sizes, rng: np.random.Generator, name: str = "mlp", zero_last: bool = False):
        if len(sizes) < 2:
            raise InvalidInputError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = math.sqrt(6.0 / fi)
            last = i == len(self.sizes) - 2
            if last:
                bound *= 0.0 if zero_last else 0.25
            self.params[f"{name}.w{i}"] = rng.uniform(-bound, bound, size=(fi, fo)) if bound else np.zeros((fi, fo))
            self.params[f"{name}.b{i}"] = np.zeros(fo)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise InvalidInputError(f"{self.name}: expected input dim {self.sizes[0]}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h = x.reshape(-1, self.sizes[0])
        cache = []
        for i in range(self.n_layers):
            z = h @ self.params[f"{self.name}.w{i}"] + self.params[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                a, s = _silu(z)
                cache.append((h, z, s))
                h = a
            else:
                cache.append((h, None, None))
                h = z
        return h.reshape(*lead, self.sizes[-1]), (lead, cache)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, gy):
        lead, layers = cache
        g = np.asarray(gy, dtype=np.float64).reshape(-1, self.sizes[-1])
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            h, z, s = layers[i]
            if z is not None:
                g = g * (s + z * s * (1.0 - s))
            grads[f"{self.name}.w{i}"] = h.T @ g
            grads[f"{self.name}.b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"{self.name}.w{i}"].T
        return g.reshape(*lead, self.sizes[0]), grads


def mlp_eval_grad(net: MLP, x, grad_out=None):
    """Output, parameter gradients and input gradient for ``L = sum(grad_out * y)``.

    ``grad_out`` defaults to ones, i.e. the gradient of ``sum(y)``.
    """
    y, cache = net.forward(x)
    gx, grads = net.backward(cache, np.ones_like(y) if grad_out is None else grad_out)
    return y, grads, gx


class Embedding:
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, name: str = "emb"):
        self.name = name
        self.params = {f"{name}.table": rng.normal(0.0, 0.5, size=(vocab, dim))}

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.params[f"{self.name}.table"][ids], ids

    def backward(self, ids, gy):
        g = np.zeros_like(self.params[f"{self.name}.table"])
        np.add.at(g, ids, gy)
        return {f"{self.name}.table": g}


class PointEncoder:
    """Shared per-point MLP followed by max-pooling.

    Returns per-point features ``(B, M, F)`` and a permutation-invariant
    global feature ``(B, F)``.
    """

    def __init__(self, in_dim: int, feat_dim: int, rng: np.random.Generator, hidden: int = 64, name: str = "enc"):
        self.mlp = MLP([in_dim, hidden, feat_dim], rng, name=name)
        self.params = self.mlp.params

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] == 0:
            raise InvalidInputError("point encoder got an empty cloud")
        per, cache = self.mlp.forward(x)
        arg = np.argmax(per, axis=1)  # first max on ties
        glob = np.take_along_axis(per, arg[:, None, :], axis=1)[:, 0]
        return per, glob, (cache, arg, per.shape)

    def backward(self, cache, g_point=None, g_global=None):
        mcache, arg, shape = cache
        g = np.zeros(shape) if g_point is None else np.array(g_point, dtype=np.float64)
        if g_global is not None:
            B, _, F = shape
            bi = np.repeat(np.arange(B), F)
            fi = np.tile(np.arange(F), B)
            np.add.at(g, (bi, arg.ravel(), fi), np.asarray(g_global).ravel())
        gx, grads = self.mlp.backward(mcache, g)
        return gx, grads


def neighbor_max(feats, nbr):
    """Max of ``feats (B, M, F)`` over each point's neighbours ``nbr (B, M, k)``.

    Returns ``(out, arg)`` with ``arg`` the winning neighbour slot per channel
    (first slot on ties).
    """
    B, M, k = nbr.shape
    bi = np.arange(B)[:, None]
    out = feats[bi, nbr[:, :, 0]]
    arg = np.zeros(out.shape, dtype=np.int64)
    for j in range(1, k):
        cand = feats[bi, nbr[:, :, j]]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = j
    return out, arg


def neighbor_max_backward(gout, nbr, arg, shape):
    B, M, F = gout.shape
    src = np.take_along_axis(nbr, arg, axis=2)  # (B, M, F) winning neighbour per channel
    g = np.zeros(shape)
    np.add.at(g, (np.arange(B)[:, None, None], src, np.arange(F)[None, None, :]), gout)
    return g


class LocalPointEncoder:
    """Two-stage point encoder: per-point MLP, max over k nearest neighbours, second MLP, global max.

    The neighbourhood stage lets each point see the local structure around
    it (thin handle vs. broad body) rather than only its own descriptor.
    """

    def __init__(self, in_dim: int, feat_dim: int, rng: np.random.Generator, hidden: int = 64, name: str = "enc"):
        self.first = MLP([in_dim, hidden, hidden], rng, name=f"{name}.a")
        self.second = MLP([in_dim + 2 * hidden, hidden, feat_dim], rng, name=f"{name}.b")
        self.hidden = hidden
        self.params = {**self.first.params, **self.second.params}

    def forward(self, x, nbr):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
            nbr = np.asarray(nbr)[None]
        if x.shape[1] == 0:
            raise InvalidInputError("point encoder got an empty cloud")
        h, c1 = self.first.forward(x)
        loc, arg_l = neighbor_max(h, nbr)
        per, c2 = self.second.forward(np.concatenate([x, h, loc], axis=2))
        arg = np.argmax(per, axis=1)
        glob = np.take_along_axis(per, arg[:, None, :], axis=1)[:, 0]
        return per, glob, (c1, c2, nbr, arg_l, arg, h.shape, per.shape)

    def backward(self, cache, g_point=None, g_global=None):
        c1, c2, nbr, arg_l, arg, hshape, shape = cache
        g = np.zeros(shape) if g_point is None else np.array(g_point, dtype=np.float64)
        if g_global is not None:
            B, _, F = shape
            np.add.at(g, (np.repeat(np.arange(B), F), arg.ravel(), np.tile(np.arange(F), B)), np.asarray(g_global).ravel())
        gin, grads = self.second.backward(c2, g)
        d = gin.shape[2] - 2 * self.hidden
        gx = gin[..., :d]
        gh = gin[..., d : d + self.hidden] + neighbor_max_backward(gin[..., d + self.hidden :], nbr, arg_l, hshape)
        gx1, g1 = self.first.backward(c1, gh)
        grads.update(g1)
        return gx + gx1, grads


class CrossAttention:
    """Single-head attention of one query vector per item over a set of tokens.

    ``forward(q (B, Dq), kv (B, M, Dk))`` returns ``(B, d)``.
    """

    def __init__(self, q_dim: int, kv_dim: int, d: int, rng: np.random.Generator, name: str = "attn"):
        self.name = name
        self.d = d
        s = 1.0 / math.sqrt(kv_dim)
        self.params = {
            f"{name}.wq": rng.normal(0.0, 1.0 / math.sqrt(q_dim), size=(q_dim, d)),
            f"{name}.wk": rng.normal(0.0, s, size=(kv_dim, d)),
            f"{name}.wv": rng.normal(0.0, s, size=(kv_dim, d)),
        }

    def forward(self, q, kv):
        p = self.params
        Q = q @ p[f"{self.name}.wq"]
        K = kv @ p[f"{self.name}.wk"]
        V = kv @ p[f"{self.name}.wv"]
        s = np.einsum("bd,bmd->bm", Q, K) / math.sqrt(self.d)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        out = np.einsum("bm,bmd->bd", a, V)
        return out, (q, kv, Q, K, V, a)

    def backward(self, cache, g_out):
        q, kv, Q, K, V, a = cache
        p, n = self.params, self.name
        ga = np.einsum("bd,bmd->bm", g_out, V)
        gs = a * (ga - np.sum(a * ga, axis=1, keepdims=True)) / math.sqrt(self.d)
        gQ = np.einsum("bm,bmd->bd", gs, K)
        gK = gs[..., None] * Q[:, None, :]
        gV = a[..., None] * g_out[:, None, :]
        kv2 = kv.reshape(-1, kv.shape[-1])
        grads = {
            f"{n}.wq": q.T @ gQ,
            f"{n}.wk": kv2.T @ gK.reshape(-1, self.d),
            f"{n}.wv": kv2.T @ gV.reshape(-1, self.d),
        }
        g_q = gQ @ p[f"{n}.wq"].T
        g_kv = gK @ p[f"{n}.wk"].T + gV @ p[f"{n}.wv"].T
        return g_q, g_kv, grads


def point_encode(enc: PointEncoder, cloud):
    """Global and per-point features of one cloud (``(M, C)`` with xyz + channels)."""
    per, glob, _ = enc.forward(np.asarray(cloud, dtype=np.float64)[None])
    return glob[0], per[0]


def time_features(t, n_freq: int = 4) -> np.ndarray:
    """``[t, sin(2^k pi t), cos(2^k pi t)]`` for k < n_freq; shape ``(B, 1 + 2 n_freq)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    f = np.pi * 2.0 ** np.arange(n_freq)
    return np.concatenate([t, np.sin(t * f), np.cos(t * f)], axis=1)


# ----------------------------------------------------------------------------- optimization


@dataclass
class TrainerConfig:
    lr_start: float = 2.0e-4
    lr_end: float = 2.0e-5
    weight_decay: float = 5.0e-6
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr_start > 0 and self.lr_end > 0 and self.lr_end <= self.lr_start):
            raise InvalidInputError("learning rates must be positive and non-increasing")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("batch_size and epochs must be >= 1")


def afm_trainer_config(**kw) -> TrainerConfig:
    return TrainerConfig(**{"batch_size": 16, "epochs": 50, **kw})


def gfm_trainer_config(**kw) -> TrainerConfig:
    return TrainerConfig(**{"batch_size": 64, "epochs": 200, **kw})


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at step ``total_steps - 1``."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with decoupled weight decay over a parameter dict (updated in place)."""

    def __init__(self, params: dict, cfg: TrainerConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = total_steps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.cfg.lr_start, self.cfg.lr_end)

    def step(self, grads: dict, step_index: int | None = None) -> float:
        c = self.cfg
        lr = self.lr(self.t if step_index is None else step_index)
        self.t += 1
        b1c = 1.0 - c.beta1**self.t
        b2c = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            upd = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.adam_eps)
            p -= lr * (upd + c.weight_decay * p)
        return lr


def optimizer_step(state: Adam, gradients: dict, step_index: int) -> dict:
    state.step(gradients, step_index)
    return state.params


# ----------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, header: dict) -> None:
    """``<path>.json`` holds names/shapes plus ``header``; ``<path>.bin`` the f32 values."""
    path = Path(path)
    names = sorted(params)
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        **header,
    }
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a checkpoint")
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    params, off = {}, 0
    for p in doc["params"]:
        n = int(np.prod(p["shape"], dtype=np.int64))
        if off + n > raw.size:
            raise InvalidInputError(f"checkpoint blob for {path} is truncated")
        params[p["name"]] = raw[off : off + n].astype(np.float64).reshape(p["shape"])
        off += n
    if off != raw.size:
        raise InvalidInputError(f"checkpoint blob for {path} has trailing data")
    return params, doc


def _json_default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
