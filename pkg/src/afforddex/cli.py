"""Command-line pipeline: data generation, training, sampling, refinement and evaluation.

Every stage reads its inputs from, and writes versioned artifacts to, one
output directory::

    config.json                  resolved configuration
    dataset/                     manifest.json, blobs/, .lock
    affordance/                  ground-truth maps per group + index.json
    checkpoints/                 afm, gfm (and gfm_lang for ablations)
    samples/<variant>.json       sampled affordance maps and grasps
    refined/<variant>.json       refined grasps (+ .trace.jsonl summaries)
    reports/report.{json,csv}    evaluation tables
    logs/<command>.jsonl         machine-readable log (timestamps vary)

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import io
import json
import logging
import os
import re
import sys
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flow as F
from .affordance import AffordanceMap, build_affordance_gt, load_affordance, save_affordance
from .blobs import decode_blob, encode_blob
from .data import DIRECTIONS, DataConfig, Dataset, DatasetError, GuidanceRecord, generate_dataset, load_dataset, save_dataset
from .geometry import InvalidInputError
from .hand import GraspPose, default_hand, forward_kinematics
from .metrics import (
    DIVERSITY_SAMPLES,
    EvalEncoder,
    EvalEncoderConfig,
    Q1Config,
    diversity,
    intention_cd,
    max_penetration,
    q1_ferrari_canny,
    r_precision,
    success_proxy,
    train_eval_encoder,
)
from .neural import TrainerConfig, afm_trainer_config, gfm_trainer_config, load_checkpoint, save_checkpoint
from .optimize import OptimConfig, refine_grasp

log = logging.getLogger("afforddex.cli")

ARTIFACT_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
STAGES = ("gen-data", "build-affordance", "train-afm", "train-gfm", "sample", "refine", "evaluate")
REPORT_COLUMNS = ("variant", "stage", "split", "n_grasps", "CD", "Top1", "Top2", "Top3", "Q1", "Pen", "delta_t", "delta_r", "delta_q", "Suc", "FID")


class ConfigError(ValueError):
    """Bad configuration; maps to exit code 2."""


class StageError(RuntimeError):
    """A stage could not run (missing inputs, lock held, ...); maps to exit code 1."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


# ----------------------------------------------------------------------------- configuration


def _toy_data() -> DataConfig:
    return DataConfig(scenes_per_category=3)


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/toy"
    provider: str = "structured"  # structured | http
    endpoint: str = ""
    model: str = "gpt-4o-mini"
    http_timeout: float = 30.0
    report: str = "both"  # json | csv | both
    samples_per_group: int = DIVERSITY_SAMPLES
    eval_splits: tuple = ("test_seen", "test_unseen")
    ablation: bool = False
    data: DataConfig = field(default_factory=_toy_data)
    afm: TrainerConfig = field(default_factory=afm_trainer_config)
    gfm: TrainerConfig = field(default_factory=gfm_trainer_config)
    sampler: F.SamplerConfig = field(default_factory=F.SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    q1: Q1Config = field(default_factory=Q1Config)
    eval_encoder: EvalEncoderConfig = field(default_factory=EvalEncoderConfig)

    def __post_init__(self):
        if self.provider not in ("structured", "http"):
            raise ConfigError(f"provider must be 'structured' or 'http', got {self.provider!r}")
        if self.report not in ("json", "csv", "both"):
            raise ConfigError(f"report must be json, csv or both, got {self.report!r}")
        if self.samples_per_group < 2:
            raise ConfigError("samples_per_group must be >= 2 (diversity needs two samples)")
        self.eval_splits = tuple(self.eval_splits)
        bad = [s for s in self.eval_splits if s not in ("train", "test_seen", "test_unseen")]
        if bad:
            raise ConfigError(f"unknown eval split(s) {bad}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


# Sub-configs whose ``seed`` follows the top-level seed unless set explicitly.
_SEEDED = ("data", "afm", "gfm", "sampler", "eval_encoder")


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    return o


def _nested_types(cls) -> dict:
    inst = cls()
    return {f.name: type(getattr(inst, f.name)) for f in dataclasses.fields(cls) if dataclasses.is_dataclass(getattr(inst, f.name))}


def _build(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config key {path or '<root>'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in doc:
        if k not in names:
            raise ConfigError(f"unknown config key {path + k!r}")
    nested = _nested_types(cls)
    kw = {}
    for k, v in doc.items():
        if k in nested:
            kw[k] = _build(nested[k], v, f"{path}{k}.")
        elif isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (InvalidInputError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid value under {path or '<root>'}: {e}") from e


def config_from_dict(doc: dict) -> PipelineConfig:
    """Validate and build a config; sub-config seeds default to the top-level seed."""
    cfg = _build(PipelineConfig, doc, "")
    for name in _SEEDED:
        if "seed" not in (doc.get(name) or {}):
            getattr(cfg, name).seed = cfg.seed
    return cfg


def set_seed(cfg: PipelineConfig, seed: int) -> None:
    cfg.seed = seed
    for name in _SEEDED:
        getattr(cfg, name).seed = seed


def config_schema() -> dict:
    """JSON schema of the configuration document (types and defaults)."""

    def describe(cls):
        inst = cls()
        props = {}
        for f in dataclasses.fields(cls):
            v = getattr(inst, f.name)
            if dataclasses.is_dataclass(v):
                props[f.name] = describe(type(v))
            else:
                t = {bool: "boolean", int: "integer", float: "number", str: "string", tuple: "array", type(None): "null"}[type(v)]
                props[f.name] = {"type": [t, "null"] if f.name in ("max_step", "delta") else t, "default": _plain(v)}
        return {"type": "object", "additionalProperties": False, "properties": props}

    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "afforddex pipeline config", **describe(PipelineConfig)}


def load_config(path: str | None, env=None) -> PipelineConfig:
    """Defaults, then the JSON document at ``path``, then environment overrides."""
    env = os.environ if env is None else env
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if env.get("AFFORDDEX_OUT"):
        doc["out"] = env["AFFORDDEX_OUT"]
    if env.get("GUIDANCE_ENDPOINT"):
        doc["endpoint"] = env["GUIDANCE_ENDPOINT"]
    return config_from_dict(doc)


# ----------------------------------------------------------------------------- artifact helpers


def _canonical(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n").encode()


def _write_json(path: Path, kind: str, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_canonical({"format": f"afforddex-{kind}", "version": ARTIFACT_VERSION, **doc}))


def _read_json(path: Path, kind: str, stage: str) -> dict:
    if not path.is_file():
        raise StageError(stage, f"missing input {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != f"afforddex-{kind}":
        raise StageError(stage, f"{path} is not a {kind} artifact")
    return doc


def _vec(x) -> list:
    return [float(v) for v in np.asarray(x, dtype=np.float64).ravel()]


class JsonLogFormatter(logging.Formatter):
    def format(self, record):
        rec = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True)


@contextlib.contextmanager
def command_log(out: Path, command: str):
    """Attach a JSON-lines handler writing ``logs/<command>.jsonl`` for one command."""
    (out / "logs").mkdir(parents=True, exist_ok=True)
    h = logging.FileHandler(out / "logs" / f"{command}.jsonl", mode="w")
    h.setFormatter(JsonLogFormatter())
    root = logging.getLogger("afforddex")
    prev = root.level
    root.addHandler(h)
    root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(h)
        root.setLevel(prev)
        h.close()


def _event(stage: str, msg: str, **fields):
    log.info(msg, extra={"fields": {"stage": stage, **fields}})


@contextlib.contextmanager
def dataset_lock(root: Path, stage: str, exclusive: bool):
    """Advisory ``flock`` on ``<dataset>/.lock``; writers take it exclusively."""
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "a+") as fh:
        try:
            fcntl.flock(fh, (fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH) | fcntl.LOCK_NB)
        except BlockingIOError as e:
            raise StageError(stage, f"dataset {root} is locked by another process") from e
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# ----------------------------------------------------------------------------- guidance providers


class StructuredProvider:
    """Uses the dataset's structured guidance records as they are."""

    name = "structured"

    def guidance(self, record: dict, parts: list[str]) -> tuple[dict, str]:
        return dict(record), "structured"


_GUIDANCE_LINE = re.compile(
    r"category\s*=\s*(?P<category>[^;\n]+?)\s*;\s*intention\s*=\s*(?P<intention>[^;\n]+?)\s*;\s*"
    r"part\s*=\s*(?P<part>[^;\n]+?)\s*;\s*direction\s*=\s*(?P<direction>[a-z]+)",
    re.IGNORECASE,
)


def parse_guidance_response(text: str, parts: list[str]) -> dict:
    """Pull the last ``category=..; intention=..; part=..; direction=..`` line out of a reply."""
    found = list(_GUIDANCE_LINE.finditer(text or ""))
    if not found:
        raise ValueError("no guidance line in the response")
    m = found[-1]
    rec = {k: m[k].strip().lower() for k in ("category", "intention", "part", "direction")}
    if rec["direction"] not in DIRECTIONS:
        raise ValueError(f"direction {rec['direction']!r} is not one of {DIRECTIONS}")
    if parts and rec["part"] not in parts:
        raise ValueError(f"part {rec['part']!r} is not one of {parts}")
    return GuidanceRecord(**rec).as_dict()


class HttpProvider:
    """OpenAI-compatible chat completion endpoint, falling back to structured guidance on failure."""

    name = "http"

    def __init__(self, endpoint: str, api_key: str | None, model: str, timeout: float = 30.0, opener=None):
        if not endpoint:
            raise ConfigError("provider 'http' needs an endpoint (--endpoint or GUIDANCE_ENDPOINT)")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.opener = opener or urllib.request.urlopen

    def messages(self, record: dict, parts: list[str]) -> list[dict]:
        system = (
            "You turn a grasp request into structured guidance. Work in four steps: name the object category, "
            "state the intention, choose the part to contact from the allowed parts, then choose the approach "
            f"direction from {', '.join(DIRECTIONS)}. Finish with exactly one line of the form "
            "category=<category>; intention=<intention>; part=<part>; direction=<direction>"
        )
        user = f"Request: {record['intention']} the {record['category']}, approaching from the {record['direction']}.\nAllowed parts: {', '.join(parts)}"
        return [{"role": "system", "content": system}, {"role": "user", "content": user}]

    def complete(self, messages: list[dict]) -> str:
        body = json.dumps({"model": self.model, "messages": messages, "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        with self.opener(req, timeout=self.timeout) as resp:
            doc = json.loads(resp.read().decode())
        return doc["choices"][0]["message"]["content"]

    def guidance(self, record: dict, parts: list[str]) -> tuple[dict, str]:
        try:
            return parse_guidance_response(self.complete(self.messages(record, parts)), parts), "http"
        except (urllib.error.URLError, OSError, ValueError, KeyError, IndexError, TypeError) as e:
            log.warning("guidance provider failed (%s); using structured guidance", e)
            return dict(record), "structured-fallback"


def make_provider(cfg: PipelineConfig, env=None):
    env = os.environ if env is None else env
    if cfg.provider == "http":
        return HttpProvider(cfg.endpoint, env.get("GUIDANCE_API_KEY"), cfg.model, cfg.http_timeout)
    return StructuredProvider()


# ----------------------------------------------------------------------------- shared model plumbing


def scene_inputs(ds: Dataset) -> dict:
    return {sid: F.SceneInput(r.cloud.points, r.cloud.normals) for sid, r in sorted(ds.scenes.items())}


def afm_examples(ds: Dataset, scenes: dict, affordance: dict | None = None) -> list:
    aff = affordance or {g.group_id: g.affordance for g in ds.groups}
    return [F.AfmExample(scenes[g.group.scene_id], g.group.guidance, aff[g.group_id]) for g in ds.split_groups("train")]


def gfm_examples(ds: Dataset, scenes: dict, affordance: dict | None = None) -> list:
    aff = affordance or {g.group_id: g.affordance for g in ds.groups}
    return [
        F.GfmExample(scenes[g.group.scene_id], g.group.guidance, aff[g.group_id], p.vector())
        for g in ds.split_groups("train")
        for p in g.group.grasps
    ]


def vocabulary(ds: Dataset) -> F.Vocabulary:
    return F.Vocabulary.from_guidance(g.group.guidance for g in ds.split_groups("train"))


def variants(cfg: PipelineConfig) -> list[str]:
    return ["affordance", "language"] if cfg.ablation else ["affordance"]


def _group_rng(seed: int, index: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, index])


def _eval_groups(ds: Dataset, splits) -> list:
    return [g for s in splits for g in ds.split_groups(s)]


# ----------------------------------------------------------------------------- stages


class Pipeline:
    """One output directory plus the stage implementations operating on it."""

    def __init__(self, cfg: PipelineConfig, env=None):
        self.cfg = cfg
        self.env = os.environ if env is None else env
        self.out = Path(cfg.out)
        self.hand = default_hand()
        self.dataset_dir = self.out / "dataset"

    # -- inputs

    def _dataset(self, stage: str) -> Dataset:
        if not (self.dataset_dir / "manifest.json").is_file():
            raise StageError(stage, f"missing dataset at {self.dataset_dir}; run gen-data first")
        with dataset_lock(self.dataset_dir, stage, exclusive=False):
            try:
                return load_dataset(self.dataset_dir)
            except DatasetError as e:
                raise StageError(stage, f"dataset is unusable: {e}") from e

    def _affordance(self, ds: Dataset, stage: str) -> dict:
        index = _read_json(self.out / "affordance" / "index.json", "affordance-index", stage)
        out = {}
        for gid in index["groups"]:
            try:
                out[gid] = load_affordance(self.out / "affordance" / gid).values
            except (OSError, ValueError) as e:
                raise StageError(stage, f"affordance map {gid} is unreadable: {e}") from e
        missing = [g.group_id for g in ds.split_groups("train") if g.group_id not in out]
        if missing:
            raise StageError(stage, f"no affordance map for {missing[0]}; rerun build-affordance")
        return out

    def _field(self, name: str, stage: str):
        path = self.out / "checkpoints" / name
        if not path.with_suffix(".json").is_file():
            raise StageError(stage, f"missing checkpoint {path}.json; run the training stage first")
        params, header = load_checkpoint(path)
        return F.field_from_checkpoint(params, header)

    # -- stages

    def gen_data(self):
        stage = "gen-data"
        with dataset_lock(self.dataset_dir, stage, exclusive=True):
            ds = generate_dataset(self.cfg.data, self.hand)
            save_dataset(ds, self.dataset_dir)
        counts = {s: len(ds.split_groups(s)) for s in ("train", "test_seen", "test_unseen")}
        _event(stage, "dataset written", scenes=len(ds.scenes), groups=counts)
        return ds

    def build_affordance(self):
        stage = "build-affordance"
        ds = self._dataset(stage)
        d = self.out / "affordance"
        d.mkdir(parents=True, exist_ok=True)
        worst = 0.0
        for g in ds.groups:
            amap = build_affordance_gt(ds.scenes[g.group.scene_id].cloud.points, g.group, self.hand)
            worst = max(worst, float(np.max(np.abs(np.float32(amap.values) - g.affordance))))
            save_affordance(AffordanceMap(np.float32(amap.values).astype(np.float64), amap.provenance, amap.meta), d / g.group_id)
        _write_json(d / "index.json", "affordance-index", {"groups": [g.group_id for g in ds.groups]})
        _event(stage, "affordance maps written", groups=len(ds.groups), max_abs_diff_vs_dataset=worst)

    def train_afm(self):
        stage = "train-afm"
        ds = self._dataset(stage)
        scenes = scene_inputs(ds)
        res = F.train_afm(afm_examples(ds, scenes, self._affordance(ds, stage)), self.cfg.afm, vocabulary(ds))
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.out / "checkpoints" / "afm", res.field.params, {**F.field_header(res.field, self.cfg.afm), "epoch_losses": res.epoch_losses})
        _event(stage, "afm trained", final_loss=res.epoch_losses[-1])

    def train_gfm(self):
        stage = "train-gfm"
        ds = self._dataset(stage)
        scenes = scene_inputs(ds)
        ex = gfm_examples(ds, scenes, self._affordance(ds, stage))
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        for v in variants(self.cfg):
            res = F.train_gfm(ex, self.hand, self.cfg.gfm, use_affordance=v == "affordance", vocab=vocabulary(ds))
            name = "gfm" if v == "affordance" else "gfm_lang"
            save_checkpoint(self.out / "checkpoints" / name, res.field.params, {**F.field_header(res.field, self.cfg.gfm), "epoch_losses": res.epoch_losses})
            _event(stage, "gfm trained", variant=v, final_loss=res.epoch_losses[-1])

    def sample(self):
        stage = "sample"
        ds = self._dataset(stage)
        scenes = scene_inputs(ds)
        afm = self._field("afm", stage)
        gfms = {v: self._field("gfm" if v == "affordance" else "gfm_lang", stage) for v in variants(self.cfg)}
        provider = make_provider(self.cfg, self.env)
        sc = self.cfg.sampler
        groups = _eval_groups(ds, self.cfg.eval_splits)
        if not groups:
            raise StageError(stage, f"no groups in splits {list(self.cfg.eval_splits)}")
        records, maps = [], []
        for i, g in enumerate(groups):
            spec = ds.scenes[g.group.scene_id].cloud.spec
            guid, source = provider.guidance(g.group.guidance, spec.parts)
            aff = F.sample_affordance(afm, scenes[g.group.scene_id], guid, sc.afm_steps, _group_rng(sc.seed, i, 1))[0]
            aff = np.float32(aff).astype(np.float64)
            maps.append(aff)
            records.append({"group": g.group_id, "guidance": guid, "guidance_source": source, "affordance_row": i})
        (self.out / "samples").mkdir(parents=True, exist_ok=True)
        (self.out / "samples" / "affordance.bin").write_bytes(encode_blob(np.stack(maps)))
        for v, fld in gfms.items():
            rows = []
            for i, (g, rec) in enumerate(zip(groups, records)):
                grasps = F.sample_grasps(
                    fld, self.hand, scenes[g.group.scene_id], rec["guidance"], maps[i] if v == "affordance" else None,
                    sc.gfm_steps, _group_rng(sc.seed, i, 2), self.cfg.samples_per_group,
                )
                rows.append({**rec, "grasps": [_vec(x) for x in grasps]})
            _write_json(self.out / "samples" / f"{v}.json", "samples", {"variant": v, "afm_steps": sc.afm_steps, "gfm_steps": sc.gfm_steps, "groups": rows})
            _event(stage, "grasps sampled", variant=v, groups=len(rows), per_group=self.cfg.samples_per_group)

    def _samples(self, v: str, stage: str):
        doc = _read_json(self.out / "samples" / f"{v}.json", "samples", stage)
        blob = self.out / "samples" / "affordance.bin"
        if not blob.is_file():
            raise StageError(stage, f"missing input {blob}")
        return doc, decode_blob(blob.read_bytes()).astype(np.float64)

    def refine(self):
        stage = "refine"
        ds = self._dataset(stage)
        clouds = {sid: r.cloud for sid, r in ds.scenes.items()}
        gid_scene = {g.group_id: g.group.scene_id for g in ds.groups}
        for v in variants(self.cfg):
            doc, maps = self._samples(v, stage)
            rows, trace = [], io.StringIO()
            for rec in doc["groups"]:
                pts = clouds[gid_scene[rec["group"]]].points
                refined = []
                for j, vec in enumerate(rec["grasps"]):
                    res = refine_grasp(vec, pts, maps[rec["affordance_row"]], self.hand, self.cfg.optim)
                    refined.append(_vec(res.pose.vector()))
                    first, best = res.trace[0], res.trace[res.best_iteration]
                    trace.write(json.dumps({"group": rec["group"], "sample": j, "best_iteration": res.best_iteration, "flags": res.flags,
                                            "initial": asdict(first), "best": asdict(best)}, sort_keys=True) + "\n")
                rows.append({**{k: rec[k] for k in ("group", "guidance", "guidance_source", "affordance_row")}, "grasps": refined})
            _write_json(self.out / "refined" / f"{v}.json", "refined", {"variant": v, "iterations": self.cfg.optim.iterations, "groups": rows})
            (self.out / "refined" / f"{v}.trace.jsonl").write_text(trace.getvalue())
            _event(stage, "grasps refined", variant=v, groups=len(rows))

    def evaluate(self):
        stage = "evaluate"
        ds = self._dataset(stage)
        encoder = self._eval_encoder(ds)
        rows = []
        for v in variants(self.cfg):
            for st, kind, sub in (("sampled", "samples", "samples"), ("refined", "refined", "refined")):
                doc = _read_json(self.out / sub / f"{v}.json", kind, stage)
                rows.extend(self._metric_rows(ds, encoder, v, st, doc))
        rows.sort(key=lambda r: (r["split"], r["stage"], r["variant"]))
        if self.cfg.ablation:
            for r in rows:
                r["pair"] = f"{r['split']}/{r['stage']}"
        evaluate_report(rows, self.out / "reports", self.cfg.report)
        _event(stage, "report written", rows=len(rows))
        return rows

    def _eval_encoder(self, ds: Dataset):
        ec = self.cfg.eval_encoder
        if ec.steps == 0:
            return None
        clouds, guid = [], []
        for g in ds.split_groups("train"):
            obj = ds.scenes[g.group.scene_id].cloud.points
            for p in g.group.grasps:
                clouds.append(EvalEncoder.grasp_cloud(obj, forward_kinematics(self.hand, p).surface))
                guid.append(g.group.guidance)
        enc, losses = train_eval_encoder(np.stack(clouds), guid, ec)
        _event("evaluate", "evaluation encoder trained", final_loss=float(losses[-1]))
        return enc

    def _metric_rows(self, ds: Dataset, encoder, variant: str, stage_name: str, doc: dict) -> list[dict]:
        by_id = {g.group_id: g for g in ds.groups}
        candidates = [g.group.guidance for g in ds.groups]
        split_of = {g.group_id: ds.scenes[g.group.scene_id].split for g in ds.groups}
        rows = []
        for split in self.cfg.eval_splits:
            recs = [r for r in doc["groups"] if split_of[r["group"]] == split]
            if not recs:
                continue
            cd, q1, pen, suc, div, clouds, gts = [], [], [], [], [], [], []
            for rec in recs:
                g = by_id[rec["group"]]
                cloud = ds.scenes[g.group.scene_id].cloud
                pool = [p.vector() for p in g.group.grasps]
                for vec in rec["grasps"]:
                    posed = forward_kinematics(self.hand, vec)
                    cd.append(intention_cd(vec, pool, self.hand))
                    q1.append(q1_ferrari_canny(cloud.points, cloud.normals, posed, self.hand, self.cfg.q1))
                    pen.append(max_penetration(cloud.points, posed, self.hand))
                    suc.append(success_proxy(cloud.points, cloud.normals, posed, self.hand, cfg=self.cfg.q1))
                    clouds.append(EvalEncoder.grasp_cloud(cloud.points, posed.surface))
                    gts.append(g.group.guidance)
                div.append(asdict(diversity([GraspPose.from_vector(x) for x in rec["grasps"]])))
            row = {"variant": variant, "stage": stage_name, "split": split, "n_grasps": len(cd), "CD": float(np.mean(cd)),
                   "Q1": float(np.mean(q1)), "Pen": float(np.mean(pen)), "Suc": float(np.mean(suc)), "FID": "n/a"}
            for k in ("delta_t", "delta_r", "delta_q"):
                row[k] = float(np.mean([d[k] for d in div]))
            if encoder is None:
                row.update(Top1="n/a", Top2="n/a", Top3="n/a")
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    rp = r_precision(encoder, np.stack(clouds), gts, candidates, _group_rng(self.cfg.seed, len(rows), 3))
                row.update(Top1=rp["top1"], Top2=rp["top2"], Top3=rp["top3"])
            rows.append(row)
        return rows


def evaluate_report(rows: list[dict], out_dir, fmt: str = "both") -> None:
    """Write ``report.json`` and/or ``report.csv``; unavailable metrics appear as ``n/a``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = list(REPORT_COLUMNS) + (["pair"] if any("pair" in r for r in rows) else [])
    norm = [{c: r.get(c, "n/a") for c in cols} for r in rows]
    if fmt in ("json", "both"):
        _write_json(out_dir / "report.json", "report", {"columns": cols, "rows": norm, "units": {"CD": "m^2", "Pen": "cm", "delta_t": "cm", "delta_r": "deg", "delta_q": "deg"}})
    if fmt in ("csv", "both"):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in norm:
            w.writerow({c: (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c]) for c in cols})
        (out_dir / "report.csv").write_text(buf.getvalue())


STAGE_METHODS = {
    "gen-data": Pipeline.gen_data,
    "build-affordance": Pipeline.build_affordance,
    "train-afm": Pipeline.train_afm,
    "train-gfm": Pipeline.train_gfm,
    "sample": Pipeline.sample,
    "refine": Pipeline.refine,
    "evaluate": Pipeline.evaluate,
}


def run_command(cfg: PipelineConfig, command: str, env=None) -> None:
    pipe = Pipeline(cfg, env)
    pipe.out.mkdir(parents=True, exist_ok=True)
    (pipe.out / "config.json").write_bytes(_canonical(cfg.to_dict()))
    stages = STAGES if command == "pipeline" else (command,)
    with command_log(pipe.out, command):
        for s in stages:
            t0 = time.perf_counter()
            _event(s, "stage started")
            STAGE_METHODS[s](pipe)
            _event(s, "stage finished", seconds=round(time.perf_counter() - t0, 3))


# ----------------------------------------------------------------------------- directional ablation


@dataclass
class AblationConfig:
    """Short-schedule ablation comparing affordance-conditioned and language-only grasp models."""

    data: DataConfig = field(default_factory=_toy_data)
    seeds: tuple = (0, 1, 2)
    afm: TrainerConfig = field(default_factory=lambda: TrainerConfig(lr_start=3e-3, lr_end=1e-4, batch_size=16, epochs=40))
    gfm: TrainerConfig = field(default_factory=lambda: TrainerConfig(lr_start=3e-3, lr_end=1e-4, batch_size=64, epochs=40))
    samples_per_group: int = DIVERSITY_SAMPLES
    sampler: F.SamplerConfig = field(default_factory=F.SamplerConfig)


def run_ablation(cfg: AblationConfig | None = None, dataset: Dataset | None = None, progress=None) -> list[dict]:
    """Mean intention CD on the unseen split per seed for both grasp models (raw samples, no refinement)."""
    cfg = cfg or AblationConfig()
    hand = default_hand()
    ds = dataset or generate_dataset(cfg.data, hand)
    scenes = scene_inputs(ds)
    vocab = vocabulary(ds)
    test = ds.split_groups("test_unseen")
    if not test:
        raise InvalidInputError("the ablation needs at least one unseen category")
    rows = []
    for seed in cfg.seeds:
        afm = F.train_afm(afm_examples(ds, scenes), dataclasses.replace(cfg.afm, seed=seed), vocab).field
        fields = {
            v: F.train_gfm(gfm_examples(ds, scenes), hand, dataclasses.replace(cfg.gfm, seed=seed), use_affordance=v == "affordance", vocab=vocab).field
            for v in ("affordance", "language")
        }
        cd = {v: [] for v in fields}
        for i, g in enumerate(test):
            s, gd = scenes[g.group.scene_id], g.group.guidance
            pool = [p.vector() for p in g.group.grasps]
            aff = F.sample_affordance(afm, s, gd, cfg.sampler.afm_steps, _group_rng(seed, i, 1))[0]
            for v, fld in fields.items():
                x = F.sample_grasps(fld, hand, s, gd, aff if v == "affordance" else None, cfg.sampler.gfm_steps, _group_rng(seed, i, 2), cfg.samples_per_group)
                cd[v].extend(intention_cd(p, pool, hand) for p in x)
        row = {"seed": seed, "cd_affordance": float(np.mean(cd["affordance"])), "cd_language": float(np.mean(cd["language"]))}
        row["ratio"] = row["cd_affordance"] / row["cd_language"]
        rows.append(row)
        if progress:
            progress(row)
    return rows


# ----------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afforddex", description="Affordance-guided grasp generation pipeline on synthetic data.")
    p.add_argument("command", choices=STAGES + ("pipeline", "schema"))
    p.add_argument("--config", metavar="PATH", help="JSON configuration document")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--steps-afm", type=int, help="affordance sampler steps")
    p.add_argument("--steps-gfm", type=int, help="grasp sampler steps")
    p.add_argument("--iters", type=int, help="refinement iterations")
    p.add_argument("--provider", choices=("structured", "http"))
    p.add_argument("--endpoint", metavar="URL")
    p.add_argument("--report", choices=("json", "csv", "both"))
    return p


def resolve_config(args, env=None) -> PipelineConfig:
    cfg = load_config(args.config, env)
    if args.seed is not None:
        set_seed(cfg, args.seed)
    if args.out is not None:
        cfg.out = args.out
    if args.steps_afm is not None:
        cfg.sampler.afm_steps = args.steps_afm
    if args.steps_gfm is not None:
        cfg.sampler.gfm_steps = args.steps_gfm
    if args.iters is not None:
        cfg.optim.iterations = args.iters
    for k in ("provider", "endpoint", "report"):
        if getattr(args, k) is not None:
            setattr(cfg, k, getattr(args, k))
    cfg = config_from_dict(cfg.to_dict())  # re-validate after overrides
    if cfg.provider == "http" and not cfg.endpoint:
        raise ConfigError("provider 'http' needs an endpoint (--endpoint or GUIDANCE_ENDPOINT)")
    return cfg


def main(argv=None, env=None) -> int:
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("afforddex").addHandler(console)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.command == "schema":
        sys.stdout.write(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    try:
        cfg = resolve_config(args, env)
    except ConfigError as e:
        print(f"error [config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run_command(cfg, args.command, env)
    except StageError as e:
        print(f"error {e}", file=sys.stderr)
        return EXIT_FAIL
    except (DatasetError, InvalidInputError, OSError, ValueError) as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        logging.getLogger("afforddex").removeHandler(console)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
