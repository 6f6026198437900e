"""Acceptance checks, one test per criterion; a pass/fail line per criterion is printed at the end of the run."""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE
from scipy.spatial.transform import Rotation

from afforddex import affordance as A
from afforddex import cli, flow
from afforddex import data as D
from afforddex import geometry as G
from afforddex import hand as H
from afforddex import metrics as M
from afforddex import neural
from afforddex import optimize as O


def record(cid, ok, detail):
    ACCEPTANCE[cid] = (bool(ok), detail)
    assert ok, detail


def rel(fd, an):
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12))


# 1 -------------------------------------------------------------------------------------------


def test_criterion_01_smoothing_weights():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_sum, worst_fix = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.01, 1.0)
        sigma = float(10 ** rng.uniform(-3, 0))
        if rng.random() < 0.5:
            hoods = G.gaussian_weights(pts, sigma, k=int(rng.integers(1, 20)))
            radius = None
        else:
            radius = float(rng.uniform(0.01, 1.0))
            hoods = G.gaussian_weights(pts, sigma, radius=radius)
        worst_sum = max(worst_sum, max(abs(w.sum() - 1.0) for _, w in hoods))
        c = float(rng.normal())
        out = G.gaussian_smooth(pts, np.full(n, c), sigma, k=8, radius=radius)
        worst_fix = max(worst_fix, float(np.max(np.abs(out - c))))
    dt = time.perf_counter() - t0
    record(1, worst_sum <= 1e-6 and worst_fix <= 1e-6 * 10 and dt < 30, f"max |sum-1|={worst_sum:.1e}, constant drift={worst_fix:.1e}, {dt:.1f}s")


# 2 -------------------------------------------------------------------------------------------


def loop_nearest(q, t):
    out = []
    for a in q:
        best = math.inf
        for b in t:
            dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
            best = min(best, dx * dx + dy * dy + dz * dz)
        out.append(math.sqrt(best))
    return np.array(out)


def test_criterion_02_geometry_oracles():
    rng = np.random.default_rng(2)
    ok = True
    for n, m in [(1, 1), (5, 9), (64, 33), (300, 200), (1000, 1000)]:
        q, t = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        q[: n // 4] = np.round(q[: n // 4], 1)  # duplicated coordinates and ties
        t[: m // 4] = np.round(t[: m // 4], 1)
        if n * m <= 60_000:
            ref_q, ref_t = loop_nearest(q, t), loop_nearest(t, q)
        else:  # exhaustive matrix with the same arithmetic
            d = ((q[:, None, :] - t[None, :, :]) ** 2).sum(-1)
            ref_q, ref_t = np.sqrt(d.min(1)), np.sqrt(d.min(0))
        ok &= np.array_equal(G.nearest_distances(q, t), ref_q)
        ok &= G.chamfer_distance(q, t) == float(np.sum(ref_q * ref_q) + np.sum(ref_t * ref_t))
        maps = rng.random((4, n))
        ref = [min(maps[j, i] for j in range(4)) for i in range(n)]
        ok &= np.array_equal(A.union_min(list(maps)), np.array(ref))
    record(2, ok, "nearest_distances / chamfer_distance / union_min identical to exhaustive oracles up to 1000 points")


# 3 -------------------------------------------------------------------------------------------


def test_criterion_03_kinematics(hand):
    rng = np.random.default_rng(3)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        vec = np.concatenate([rng.normal(size=6), rng.normal(size=3) * 0.1, rng.uniform(hand.q_min, hand.q_max)])
        J = H.fk_point_jacobian(hand, vec, "surface")
        fd = np.empty_like(J)
        for d in range(len(vec)):
            e = np.zeros(len(vec))
            e[d] = h
            fd[..., d] = (H.forward_kinematics(hand, vec + e).surface - H.forward_kinematics(hand, vec - e).surface) / (2 * h)
        worst = max(worst, rel(fd, J))
    eq = 0.0
    for _ in range(100):
        vec = np.concatenate([rng.normal(size=6), rng.normal(size=3) * 0.1, rng.uniform(hand.q_min, hand.q_max)])
        R, t = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix(), rng.normal(size=3)
        Rw = H.rot6d_to_matrix(vec[:6])
        moved = np.concatenate([H.matrix_to_rot6d(R @ Rw), R @ vec[6:9] + t, vec[9:]])
        a = H.forward_kinematics(hand, vec).surface @ R.T + t
        eq = max(eq, float(np.max(np.abs(H.forward_kinematics(hand, moved).surface - a))))
    record(3, worst <= 1e-4 and eq <= 1e-9, f"worst Jacobian rel err={worst:.1e}, equivariance err={eq:.1e}")


# 4 -------------------------------------------------------------------------------------------


def _sphere(rng, n=600, r=0.04):
    v = rng.normal(size=(n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def _top_pose(hand, rng, z):
    R = Rotation.from_euler("x", 180, degrees=True).as_matrix() @ Rotation.from_euler("z", rng.uniform(0, 360), degrees=True).as_matrix()
    return np.concatenate([H.matrix_to_rot6d(R[None])[0], np.array([0, 0, z]) + rng.normal(size=3) * 0.005, rng.uniform(hand.q_min, hand.q_max) * 0.5])


def _numeric(f, vec, h=1e-6, pattern=None):
    """Central differences; with ``pattern`` (the active hinge set at a pose) the step is
    shrunk until both stencil ends share the same active set, so no kink lies inside."""
    out, shrunk = [], 0
    for e in np.eye(len(vec)):
        step = h
        while pattern is not None and step > 1e-10 and not np.array_equal(pattern(vec + step * e), pattern(vec - step * e)):
            step /= 4
            shrunk += 1
        out.append((f(vec + step * e) - f(vec - step * e)) / (2 * step))
    return (np.array(out), shrunk) if pattern is not None else np.array(out)


def test_criterion_04_loss_gradients(hand):
    rng = np.random.default_rng(4)
    worst = dict.fromkeys(["aff_dist", "aff_finger", "pen", "spen", "joint", "composite"], 0.0)
    shrunk = 0
    for _ in range(50):
        S = _sphere(rng, r=rng.uniform(0.03, 0.05))
        region = O.AffordanceRegion(S, (S[:, 2] > rng.uniform(-0.02, 0.02)).astype(float), 0.5)
        coarse = _top_pose(hand, rng, rng.uniform(0.04, 0.06))
        ref = coarse + np.r_[rng.normal(size=6) * 0.02, rng.normal(size=3) * 0.004, rng.normal(size=hand.dof) * 0.05]
        over = ref.copy()
        over[9:] = np.where(rng.random(hand.dof) < 0.5, hand.q_max + rng.uniform(0.01, 0.1, hand.dof), hand.q_min - rng.uniform(0.01, 0.1, hand.dof))
        cases = {
            "aff_dist": (lambda v: O.aff_contact_loss(coarse, v, hand, region, 0.02), ref),
            "aff_finger": (lambda v: O.aff_fingertip_loss(coarse, v, hand, region, 0.03), ref),
            "pen": (lambda v: O.penetration_loss(S, v, hand), ref),
            "spen": (lambda v: O.self_pen_loss(v, hand, delta=0.04), ref),
            "joint": (lambda v: O.joint_limit_loss(v, hand), over),
        }
        for name, (fn, at) in cases.items():
            if name == "pen":
                fd, n = _numeric(lambda v: fn(v)[0], at, pattern=lambda v: H.hand_sdf(H.forward_kinematics(hand, v), hand, S) > 0)
                shrunk += n
            else:
                fd = _numeric(lambda v: fn(v)[0], at)
            worst[name] = max(worst[name], rel(fd, fn(at)[1]))
        tgt = coarse + rng.normal(size=18) * 0.05
        tgt_surf = H.forward_kinematics(hand, tgt).surface

        def assignment(v):
            surf = H.forward_kinematics(hand, v).surface
            return np.r_[G.nearest(surf, tgt_surf)[1], G.nearest(tgt_surf, surf)[1]]

        fd, n = _numeric(lambda v: flow.gfm_loss(v, tgt, hand)[0], ref, pattern=assignment)
        shrunk += n
        worst["composite"] = max(worst["composite"], rel(fd, flow.gfm_loss(ref, tgt, hand)[1]))
    detail = "worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(4, max(worst.values()) <= 1e-3, f"{detail} ({shrunk} stencils shrunk off a hinge or nearest-point switch)")


# 5 -------------------------------------------------------------------------------------------


def _gmm(n, rng, R=2.0, s=0.1):
    a = 2 * np.pi * rng.integers(0, 8, n) / 8
    return np.stack([R * np.cos(a), R * np.sin(a)], 1) + s * rng.standard_normal((n, 2))


def test_criterion_05_flow_engine():
    x0 = np.random.default_rng(5).normal(size=(16, 3))
    const = flow.euler_sample(lambda x, t, c: np.full_like(x, 0.7), x0, 10)
    const_err = float(np.max(np.abs(const - (x0 + 0.7))))
    decay = flow.euler_sample(lambda x, t, c: -x, np.ones((1, 1)), 20)[0, 0]
    rec = 1.0
    for _ in range(20):
        rec = rec + 0.05 * -rec
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    f = flow.MLPVelocityField(2, rng, hidden=128, depth=3)
    flow.fit_unconditional(f, _gmm, 4000, neural.TrainerConfig(lr_start=3e-3, lr_end=1e-4, weight_decay=0.0, batch_size=256), rng)
    x = flow.euler_sample(f, rng.standard_normal((2000, 2)), 100)
    ed = flow.energy_distance(x, _gmm(2000, rng))
    dt = time.perf_counter() - t0
    ok = const_err <= 1e-12 and decay == rec and math.isclose(decay, (1 - 0.05) ** 20, rel_tol=1e-14, abs_tol=0.0) and ed < 0.05 and dt < 120
    record(5, ok, f"constant-field err={const_err:.1e}, decay={decay!r} vs {(1 - 0.05) ** 20!r}, GMM energy distance={ed:.4f} in {dt:.0f}s")


# 6 -------------------------------------------------------------------------------------------


def test_criterion_06_default_configuration():
    afm, gfm = neural.afm_trainer_config(), neural.gfm_trainer_config()
    s, o, q = flow.SamplerConfig(), O.OptimConfig(), M.Q1Config()
    checks = [
        (afm.epochs, gfm.epochs) == (50, 200),
        (afm.batch_size, gfm.batch_size) == (16, 64),
        all((c.lr_start, c.lr_end, c.weight_decay) == (2.0e-4, 2.0e-5, 5.0e-6) for c in (afm, gfm)),
        neural.cosine_lr(0, 10, 2e-4, 2e-5) == 2e-4 and math.isclose(neural.cosine_lr(9, 10, 2e-4, 2e-5), 2e-5),
        (s.afm_steps, s.gfm_steps) == (10, 20),
        (flow.LAMBDA_POSE, flow.LAMBDA_CHAMFER, flow.LAMBDA_TIP) == (10.0, 1.0, 2.0),
        o.lambdas == (100.0, 10.0, 100.0, 10.0, 100.0),
        o.iterations == 200,
        (q.contact_threshold, q.penetration_threshold) == (0.01, 0.005),
        M.DIVERSITY_SAMPLES == 8 and M.POOL_SIZE == 32,
        cli.PipelineConfig().samples_per_group == 8,
    ]
    record(6, all(checks), f"{sum(checks)}/{len(checks)} default groups match")


# 7 -------------------------------------------------------------------------------------------


def test_criterion_07_refinement_efficacy(hand):
    t0 = time.perf_counter()
    cats = sorted(D.TEMPLATES)
    cfg = O.OptimConfig()
    ok, drifts = 0, []
    for i in range(50):
        cloud = D.build_scene_cloud(D.generate_scene(1000 + i, cats[i % len(cats)]), 512)
        vec, aff = D.penetrating_grasp(cloud, hand, np.random.default_rng(i))
        res = O.refine_grasp(vec, cloud.points, aff, hand, cfg)
        out = res.pose.vector()
        ok += O.max_penetration_depth(cloud.points, out, hand) < 0.005
        region = O.AffordanceRegion(cloud.points, aff, cfg.tau2)
        gates = O.CoarseGates.build(hand, vec, region, cfg.tau3)
        if gates.tip_gate.any():
            tips = H.forward_kinematics(hand, out).fingertips
            drifts.append(float(np.linalg.norm(tips - gates.tips, axis=1)[gates.tip_gate].mean()))
    dt = time.perf_counter() - t0
    drift = float(np.mean(drifts)) if drifts else 0.0
    record(7, ok >= 40 and drift < cfg.tau3 and dt < 180, f"{ok}/50 below 5 mm, mean gated fingertip drift {drift * 1e3:.1f} mm over {len(drifts)} grasps, {dt:.0f}s")


# 8 -------------------------------------------------------------------------------------------


def _patch(normal, rng, k=6):
    v = normal + 0.15 * rng.normal(size=(k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def test_criterion_08_metric_oracles(hand):
    rng = np.random.default_rng(8)
    u = M.wrench_directions()
    # antipodal pinch on a sphere: wrench level and with the hand model
    P = np.r_[_patch(np.array([1.0, 0, 0]), rng), _patch(np.array([-1.0, 0, 0]), rng)]
    q_pinch = M.q1_from_wrenches(M.contact_wrenches(P, P, np.zeros(3), 1.0, 0.5, 8), u)
    cloud = D.build_scene_cloud(D.generate_scene(0, "ball"), 512)
    grp = D.synthesize_grasp_group(cloud, "body", "up", hand, k=1, seed=0)
    posed = H.forward_kinematics(hand, grp.grasps[0])
    q_hand = M.q1_ferrari_canny(cloud.points, cloud.normals, posed, hand)
    suc = M.success_proxy(cloud.points, cloud.normals, posed, hand)
    single = M.q1_from_wrenches(M.contact_wrenches(P[:1], P[:1], np.zeros(3), 1.0, 0.5, 8), u)
    mono = True
    for _ in range(30):
        keep = np.sort(rng.permutation(len(P))[: int(rng.integers(1, len(P)))])
        mono &= M.q1_from_wrenches(M.contact_wrenches(P[keep], P[keep], np.zeros(3), 1.0, 0.5, 8), u) <= q_pinch + 1e-12
    g = grp.grasps[0].vector()
    d = M.diversity([g, g.copy(), g.copy()])
    dup_zero = (d.delta_t, d.delta_r, d.delta_q) == (0.0, 0.0, 0.0)
    # retrieval: oracle features are perfect, random features sit near 1/32
    cands = [{"category": c, "intention": f"i{i % 2}", "part": f"p{i}", "direction": "up"} for c in "abcdefghijkl" for i in range(4)]
    basis = {M.guidance_key(c): rng.normal(size=16) for c in cands}
    gts = [cands[i] for i in rng.integers(0, len(cands), 200)]
    pools = [M.build_pool(gt, cands, rng) for gt in gts]
    oracle = M.r_precision_from_features(np.stack([basis[M.guidance_key(x)] for x in gts]), [np.stack([basis[M.guidance_key(p)] for p in pl]) for pl in pools])["top1"]
    trials = 10_000
    rand = M.r_precision_from_features(rng.normal(size=(trials, 16)), list(rng.normal(size=(trials, 32, 16))))["top1"]
    lo, hi = M.random_top1_band(32, trials)
    ok = q_pinch > 0 and q_hand > 0 and suc and single == 0.0 and mono and dup_zero and oracle == 1.0 and lo <= rand <= hi
    record(8, ok, f"pinch Q1={q_pinch:.3f} (hand {q_hand:.3f}, success={suc}), single={single}, monotone={mono}, dup diversity zero={dup_zero}, oracle top1={oracle}, random top1={rand:.4f} in [{lo:.4f}, {hi:.4f}]")


# 9 -------------------------------------------------------------------------------------------


def test_criterion_09_directional_ablation():
    t0 = time.perf_counter()
    rows = cli.run_ablation(cli.AblationConfig())
    dt = time.perf_counter() - t0
    wins = sum(r["ratio"] <= 0.9 for r in rows)
    detail = ", ".join(f"seed {r['seed']}: CD {r['cd_affordance']:.4f} vs {r['cd_language']:.4f} (ratio {r['ratio']:.3f})" for r in rows)
    record(9, wins >= 2 and dt < 600, f"{wins}/3 seeds with >=10% lower CD; {detail}; {dt:.0f}s")


# 10 ------------------------------------------------------------------------------------------

TINY = {
    "data": {"categories": ["mug", "ball", "hammer"], "unseen": ["hammer"], "scenes_per_category": 2, "grasps_per_group": 2, "points_per_scene": 256},
    "afm": {"epochs": 2},
    "gfm": {"epochs": 2},
    "samples_per_group": 2,
    "optim": {"iterations": 5},
    "eval_encoder": {"steps": 5, "batch_size": 8},
    "ablation": True,
}


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.parts[len(root.parts)] != "logs"}


def test_criterion_10_determinism_and_persistence(tmp_path):
    import json

    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    out = tmp_path / "run"
    args = ["--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "3"]
    snapshots = []
    codes = []
    for _ in range(2):
        for stage in cli.STAGES:
            codes.append(cli.main([stage, *args], env={}))
        snapshots.append(_tree(out))
    same = codes == [0] * len(codes) and snapshots[0] == snapshots[1] and len(snapshots[0]) > 10
    ds = D.load_dataset(out / "dataset")
    D.save_dataset(ds, tmp_path / "copy")
    saved = {k: v for k, v in _tree(out / "dataset").items() if k != ".lock"}  # the lock file is not dataset content
    roundtrip = saved == _tree(tmp_path / "copy")
    blob = sorted((tmp_path / "copy" / "blobs").iterdir())[1]
    raw = bytearray(blob.read_bytes())
    raw[-3] ^= 0x10
    blob.write_bytes(bytes(raw))
    try:
        D.load_dataset(tmp_path / "copy")
        detected = False
    except D.DatasetCorruptionError:
        detected = True
    record(10, same and roundtrip and detected, f"exit codes ok={set(codes) == {0}}, reruns byte-identical={snapshots[0] == snapshots[1]} over {len(snapshots[0])} files, dataset round trip={roundtrip}, bit flip detected={detected}")
