"""Acceptance suite: the thirteen headline guarantees, one test each.

Every test is self-contained, asserts its stated tolerance, and checks its
own wall-clock budget where one applies. The two slow overfitting runs are
shared between tests through a module-level cache, so the whole file can run
in one pytest invocation; `pytest -v tests/test_acceptance.py` prints one
pass/fail line per guarantee.
"""

import json
import math
import time

import numpy as np
import pytest

from ffsplat import backbone as bb
from ffsplat import cli
from ffsplat import evaluation as ev
from ffsplat import gaussians as ga
from ffsplat import losses as ls
from ffsplat import renderer as rn
from ffsplat import scene_io
from ffsplat import training as tr
from ffsplat.geometry import (CameraPose, PatchLayout, PinholeIntrinsics,
                              PosedImage, kmeans_select, normalize_poses)
from ffsplat.losses import LossWeights
from ffsplat.numerics import ops
from ffsplat.numerics.check import max_rel_err
from ffsplat.numerics.tensor import Tape, Tensor, backward
from ffsplat.synth import SyntheticSceneSpec, generate_synthetic_scene

# ------------------------------------------------------------ shared helpers

# Overfitting configuration shared by the training-behaviour tests (07-10).
OVERFIT_MODEL = dict(layout="(3M1T)x1", dim=48, dim_merged=192, merge_at=3,
                     head_dim=48, state_dim=48)
OVERFIT_STEPS = 2000
OVERFIT_PEAK_LR = 8e-3
OVERFIT_TARGETS = 2
OVERFIT_WARMUP = 100
OVERFIT_SCENE = SyntheticSceneSpec(n_frames=8, width=64, height=64, seed=3)

_overfit_cache = {}


def _overfit_config(steps, lambda_opacity):
    return tr.TrainConfig(
        stages=[tr.StageConfig(64, steps, OVERFIT_PEAK_LR,
                               whole_sequence=True, view_range=(8, 8))],
        n_inputs=8, n_targets=OVERFIT_TARGETS, warmup=OVERFIT_WARMUP,
        seed=0, order_augment=False,
        weights=LossWeights(lambda_opacity=lambda_opacity))


def _train_view_psnrs(params, cfg, views):
    g, _, _, norm = tr.forward_scene(params, cfg, views)
    vals = []
    for v in views:
        img = rn.render_gaussians(g, norm.apply(v.pose), v.intrinsics)
        vals.append(ls.psnr(img.data[:, :, :3], v.rgb))
    return g, norm, [float(p) for p in vals]


def overfit_run(lambda_opacity):
    """Train the micro model to convergence on one scene (cached)."""
    key = float(lambda_opacity)
    if key in _overfit_cache:
        return _overfit_cache[key]
    views = generate_synthetic_scene(OVERFIT_SCENE)
    cfg = bb.ModelConfig(**OVERFIT_MODEL)
    params = bb.init_params(cfg, np.random.default_rng(0))
    config = _overfit_config(OVERFIT_STEPS, lambda_opacity)
    t0 = time.perf_counter()
    result = tr.train_loop(params, cfg, [views], config)
    wall = time.perf_counter() - t0
    g, norm, psnrs = _train_view_psnrs(params, cfg, views)
    run = {
        "params": params, "cfg": cfg, "views": views, "result": result,
        "wall": wall, "g": g, "norm": norm, "psnrs": psnrs,
        "psnr": float(np.mean(psnrs)), "usage": ga.gaussian_usage(g),
    }
    _overfit_cache[key] = run
    return run


def _unit_quats(rng, k):
    q = rng.normal(size=(k, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _random_gaussians(rng, k, center=(0.0, 0.0, 2.0), spread=0.5,
                      dtype=np.float64):
    pos = np.asarray(center) + rng.normal(size=(k, 3)) * spread
    return ga.GaussianSet(
        position=Tensor(pos.astype(dtype)),
        sh=Tensor((rng.normal(size=(k, 48)) * 0.2).astype(dtype)),
        scale=Tensor(np.exp(rng.uniform(-4.5, -2.0, size=(k, 3))).astype(dtype)),
        rotation=Tensor(_unit_quats(rng, k).astype(dtype)),
        opacity=Tensor(rng.uniform(0.05, 0.95, size=k).astype(dtype)),
    )


# ------------------------------------------------- 01: scan kernel oracle


def test_01_chunked_scan_matches_sequential_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    L, H, P, N = 256, 8, 8, 8  # 64 channels split over 8 heads
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        x = r.normal(size=(L, H, P)).astype(dtype)
        a = r.uniform(0.5, 4.0, H).astype(dtype)
        B = r.normal(size=(L, N)).astype(dtype)
        C = r.normal(size=(L, N)).astype(dtype)
        dt = r.uniform(0.01, 0.2, (L, H)).astype(dtype)
        ref = bb.ssm_scan_sequential(x, a, B, C, dt)
        for chunk in (1, 7, 32, 256):
            got = bb.ssm_scan_chunked(Tensor(x), Tensor(a), Tensor(B),
                                      Tensor(C), Tensor(dt), chunk).data
            assert np.abs(got - ref).max() < tol, (dtype, chunk)
    assert time.perf_counter() - t0 < 10.0


# ------------------------------------------------- 02: gradient suite


def _fd_case_core_ops():
    r = np.random.default_rng(20)
    x = Tensor(r.normal(size=(5, 4)))
    w = Tensor(r.normal(size=(4, 3)))
    gain = Tensor(r.uniform(0.5, 1.5, size=4))
    bias = Tensor(r.normal(size=4))
    m = r.normal(size=(5, 3))

    def f():
        h = ops.layer_norm(x, gain, bias)
        y = ops.softmax_lastdim(ops.matmul(h, w))
        y = ops.masked_fill(y, m > 0.5, 0.25)
        z = ops.add(ops.exp(ops.mul(y, -0.7)), ops.sigmoid(y))
        return ops.tsum(ops.mul(z, Tensor(m))) + ops.tmean(ops.sqrt(
            ops.clamp(ops.mul(x, x), lo=1e-3))) + ops.tsum(ops.absolute(x))

    return f, [x, w, gain, bias]


def _fd_case_mamba_block():
    cfg = bb.ModelConfig(layout="M", dim=8, merge_at=None, patch=2,
                         state_dim=3, head_dim=4, expand=2, conv_width=2,
                         scan_chunk=4)
    params = bb.init_params(cfg, np.random.default_rng(6))
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in params.items()}
    x = Tensor(np.random.default_rng(7).normal(size=(5, 8)))
    w = np.random.default_rng(8).normal(size=(5, 8))

    def f():
        return (bb.mamba2_block(x, params, 0, cfg, 8) * Tensor(w)).sum()

    return f, [x] + [v for k, v in params.items() if k.startswith("blocks.")]


def _fd_case_transformer_block():
    cfg = bb.ModelConfig(layout="T", dim=8, merge_at=None, patch=2,
                         state_dim=4, head_dim=4, mlp_ratio=2)
    params = bb.init_params(cfg, np.random.default_rng(14))
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in params.items()}
    x = Tensor(np.random.default_rng(15).normal(size=(6, 8)))
    w = np.random.default_rng(16).normal(size=(6, 8))

    def f():
        return (bb.transformer_block(x, params, 0, cfg, 8) * Tensor(w)).sum()

    return f, [x] + [v for k, v in params.items() if k.startswith("blocks.")]


def _fd_case_token_merge():
    r = np.random.default_rng(17)
    layout = PatchLayout(2, 2, 2, 4)
    x = Tensor(r.normal(size=(layout.tokens, 4)))
    w = Tensor(r.normal(size=(2, 2, 4, 6)))
    b = Tensor(r.normal(size=6))
    wt = r.normal(size=(layout.tokens // 4, 6))

    def f():
        y, _ = bb.token_merge(x, layout, w, b)
        return (y * Tensor(wt)).sum()

    return f, [x, w, b]


def _fd_case_decode():
    r = np.random.default_rng(18)
    pose = CameraPose(rotation=np.eye(3), position=np.zeros(3))
    intr = PinholeIntrinsics(fx=3.0, fy=3.0, cx=1.0, cy=1.0, width=2, height=2)
    from ffsplat.geometry import plucker_rays
    rm = plucker_rays(pose, intr)
    raw = Tensor(r.normal(size=(1, 2, 2, bb.RAW_CHANNELS)) * 0.5)
    wp = r.normal(size=(4, 3))
    wsh = r.normal(size=(4, 48))

    def f():
        g, t = ga.decode_gaussians(raw, [rm])
        return (ops.tsum(ops.mul(g.position, Tensor(wp)))
                + ops.tsum(ops.mul(g.sh, Tensor(wsh)))
                + ops.tsum(ops.mul(g.scale, 1.3))
                + ops.tsum(ops.mul(g.rotation, 0.7))
                + ops.tsum(g.opacity) + ops.tsum(t))

    return f, [raw]


def _fd_case_rasterizer():
    rng = np.random.default_rng(8)
    g = _random_gaussians(rng, 5, spread=0.15)
    g.scale.data[:] = np.exp(rng.uniform(-2.5, -1.8, size=(5, 3)))
    pose = CameraPose(rotation=np.eye(3), position=np.zeros(3))
    intr = PinholeIntrinsics(fx=8.0, fy=8.0, cx=3.0, cy=2.5, width=6, height=5)
    wimg = Tensor(rng.normal(size=(5, 6, 4)))

    def f():
        img = rn.render_gaussians(g, pose, intr, background=[0.2, 0.1, 0.4],
                                  terminate_eps=0.0)
        return ops.tsum(ops.mul(img, wimg))

    return f, [g.position, g.sh, g.scale, g.rotation, g.opacity]


def _fd_case_losses():
    r = np.random.default_rng(19)
    a = Tensor(r.uniform(0.1, 0.9, size=(12, 12, 3)))
    b = r.uniform(0.1, 0.9, size=(12, 12, 3))
    p = Tensor(r.uniform(0.5, 2.0, size=(2, 3, 3)))
    t = r.uniform(0.5, 2.0, size=(2, 3, 3))
    g = _random_gaussians(r, 4)

    def f():
        return (ls.mse_loss(a, b) + ls.perceptual_loss(a, b, scales=2)
                + ls.ssim(a, b) + ls.depth_loss(p, t) + ls.opacity_loss(g))

    return f, [a, p, g.opacity]


def test_02_gradients_match_finite_differences_everywhere():
    t0 = time.perf_counter()
    cases = {
        "core_ops": _fd_case_core_ops,
        "mamba_block": _fd_case_mamba_block,
        "transformer_block": _fd_case_transformer_block,
        "token_merge": _fd_case_token_merge,
        "decode": _fd_case_decode,
        "rasterizer": _fd_case_rasterizer,
        "losses": _fd_case_losses,
    }
    for name, make in cases.items():
        f, tensors = make()
        err = max_rel_err(f, tensors)
        assert err < 1e-6, f"{name}: rel err {err:.3e}"
    assert time.perf_counter() - t0 < 300.0


# ------------------------------------------------- 03: complexity scaling


def test_03_scan_scales_linearly_attention_quadratically():
    t0 = time.perf_counter()
    L = 8192
    mam1, _, _ = ev.time_block("mamba", L, runs=3)
    mam2, _, _ = ev.time_block("mamba", 2 * L, runs=3)
    att1, _, _ = ev.time_block("transformer", L, runs=3)
    att2, _, _ = ev.time_block("transformer", 2 * L, runs=3)
    assert mam2 / mam1 <= 2.5, f"scan doubling ratio {mam2 / mam1:.2f}"
    assert att2 / att1 >= 3.2, f"attention doubling ratio {att2 / att1:.2f}"

    merge = ev.run_merge_bench(1024, runs=3)
    by = {row.variant: row for row in merge.rows}
    assert by["hybrid_merge"].peak_kb < by["hybrid_nomerge"].peak_kb
    assert time.perf_counter() - t0 < 600.0


# ------------------------------------------------- 04: token-merge arithmetic


def test_04_token_merge_quarters_length_and_widens_channels():
    r = np.random.default_rng(4)
    layout = PatchLayout(2, 4, 6, 8)  # 48 tokens over two images
    x = r.normal(size=(layout.tokens, 256)).astype(np.float32)
    w = Tensor((r.normal(size=(2, 2, 256, 1024)) * 0.02).astype(np.float32))
    b = Tensor(np.zeros(1024, dtype=np.float32))
    y, merged = bb.token_merge(Tensor(x), layout, w, b)
    assert y.shape == (layout.tokens // 4, 1024)
    assert (merged.grid_h, merged.grid_w) == (2, 3)

    # locality: a 2x2 source window feeds exactly one merged token
    x2 = x.copy()
    x2[1] += 1.0  # token (row 0, col 1) of image 0 -> merged token (0, 0)
    y2, _ = bb.token_merge(Tensor(x2), layout, w, b)
    changed = np.flatnonzero(np.any(y.data != y2.data, axis=1))
    assert changed.tolist() == [0]

    # per-image isolation: image 0 outputs ignore image 1 tokens
    x3 = x.copy()
    x3[layout.tokens // 2:] += 1.0
    y3, _ = bb.token_merge(Tensor(x3), layout, w, b)
    per_img = y.shape[0] // 2
    assert np.array_equal(y.data[:per_img], y3.data[:per_img])
    assert not np.array_equal(y.data[per_img:], y3.data[per_img:])


# ------------------------------------------------- 05: pruning arithmetic


def test_05_training_and_eval_pruning_keep_exact_counts():
    keep_sizes = set()
    rng = np.random.default_rng(5)
    for draw in range(1000):
        opac = rng.uniform(0.0, 1.0, size=1000)
        g = ga.GaussianSet(
            position=Tensor(rng.normal(size=(1000, 3))),
            sh=Tensor(np.zeros((1000, 48), np.float32)),
            scale=Tensor(np.full((1000, 3), 0.1, np.float32)),
            rotation=Tensor(_unit_quats(rng, 1000)),
            opacity=Tensor(opac),
        )
        _, idx = ga.prune_train(g, rng)
        keep_sizes.add(idx.size)
        assert idx.size == 460
        assert np.unique(idx).size == 460
        top400 = np.argsort(opac, kind="stable")[::-1][:400]
        assert np.isin(top400, idx).all()  # the top 40% always survive

        _, idx_eval = ga.prune_eval(g)
        assert idx_eval.size == 500
        top500 = set(np.argsort(opac, kind="stable")[::-1][:500].tolist())
        assert set(idx_eval.tolist()) == top500  # exactly the top half
    assert keep_sizes == {460}


# ------------------------------------------------- 06: rasterizer oracle


def test_06_tiled_rasterizer_matches_brute_force_compositing():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    pose = CameraPose(rotation=np.eye(3), position=np.zeros(3))
    intr = PinholeIntrinsics(fx=20.0, fy=20.0, cx=12.0, cy=9.0,
                             width=24, height=18)
    for scene in range(100):
        k = 1000 if scene == 0 else int(rng.integers(1, 1001))
        g = _random_gaussians(rng, k, spread=0.6)
        fast = rn.render_gaussians(g, pose, intr, background=[0.2, 0.3, 0.1],
                                   terminate_eps=0.0).data
        slow = rn.render_brute_force(g, pose, intr,
                                     background=[0.2, 0.3, 0.1]).data
        assert np.abs(fast - slow).max() < 1e-5, f"scene {scene} (k={k})"

    # two-splat closed form, exact in binary floating point
    sp = rn.Splat2D(
        mean2d=Tensor(np.array([[0.5, 0.5], [0.5, 0.5]])),
        cov2d=Tensor(np.array([[4.0, 0.0, 4.0], [4.0, 0.0, 4.0]])),
        color=Tensor(np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.125]])),
        alpha_base=Tensor(np.array([0.5, 0.25])),
        view_depth=np.array([1.0, 2.0]),
        indices=np.arange(2),
    )
    img = rn.rasterize(sp, 1, 1, background=[0.0, 0.5, 1.0],
                       terminate_eps=0.0).data[0, 0]
    c1, c2, bgc = np.array([1.0, 0.5, 0.25]), np.array([0.5, 1.0, 0.125]), \
        np.array([0.0, 0.5, 1.0])
    expect_rgb = 0.5 * c1 + 0.5 * 0.25 * c2 + 0.5 * 0.75 * bgc
    assert np.array_equal(img[:3], expect_rgb)
    assert img[3] == 1.0 - 0.5 * 0.75
    assert time.perf_counter() - t0 < 300.0


# ------------------------------------------------- 07: overfit training


def test_07_overfitting_one_scene_reaches_28db_deterministically():
    run = overfit_run(0.1)
    assert run["psnr"] >= 28.0, f"train-view psnr {run['psnr']:.2f} dB"
    assert run["wall"] < 1800.0, f"took {run['wall'] / 60:.1f} min"

    # per-seed determinism: replaying a short prefix reproduces the loss
    # trace bit for bit, including every logged float
    def prefix(steps=25):
        views = generate_synthetic_scene(OVERFIT_SCENE)
        cfg = bb.ModelConfig(**OVERFIT_MODEL)
        params = bb.init_params(cfg, np.random.default_rng(0))
        res = tr.train_loop(params, cfg, [views], _overfit_config(steps, 0.1))
        blobs = {k: p.data.tobytes() for k, p in params.items()}
        return res.log, blobs

    log_a, params_a = prefix()
    log_b, params_b = prefix()
    for ra, rb in zip(log_a, log_b):
        assert ra["loss_total"] == rb["loss_total"]
        assert ra["psnr"] == rb["psnr"]
    assert params_a == params_b


# ------------------------------------------------- 08: opacity regularization


def test_08_opacity_penalty_cuts_gaussian_usage():
    reg = overfit_run(0.1)
    free = overfit_run(0.0)
    assert free["usage"] >= 0.95, f"unregularized usage {free['usage']:.3f}"
    assert reg["usage"] <= 0.8 * free["usage"], (
        f"usage {reg['usage']:.3f} vs {free['usage']:.3f}")


# ------------------------------------------------- 09: pruning safety


def test_09_pruning_leaves_rendering_quality_intact():
    run = overfit_run(0.1)
    views, norm = run["views"], run["norm"]

    def mean_psnr(g):
        vals = [ls.psnr(rn.render_gaussians(
            g, norm.apply(v.pose), v.intrinsics).data[:, :, :3], v.rgb)
            for v in views]
        return float(np.mean(vals))

    base = mean_psnr(run["g"])
    thresh, _ = ga.prune_threshold(run["g"], 1e-3)
    half, _ = ga.prune_eval(run["g"], keep_frac=0.5)
    assert abs(mean_psnr(thresh) - base) < 0.1
    assert abs(mean_psnr(half) - base) < 0.3


# ------------------------------------------------- 10: test-time refinement


def test_10_refinement_improves_psnr_and_freezes_shape_fields():
    run = overfit_run(0.1)
    norm_views = [PosedImage(v.rgb, run["norm"].apply(v.pose), v.intrinsics,
                             v.gt_disparity) for v in run["views"]]

    def mean_psnr(g):
        vals = [ls.psnr(rn.render_gaussians(
            g, v.pose, v.intrinsics).data[:, :, :3], v.rgb)
            for v in norm_views]
        return float(np.mean(vals))

    g0 = tr.post_predict_optimize(run["g"], norm_views, steps=0)
    g10 = tr.post_predict_optimize(run["g"], norm_views, steps=10)
    before, after = mean_psnr(g0), mean_psnr(g10)
    assert after - before >= 0.2, f"{before:.3f} -> {after:.3f} dB"
    for field in ("opacity", "scale", "rotation"):
        a = getattr(run["g"], field).data
        b = getattr(g10, field).data
        assert a.tobytes() == b.tobytes(), f"{field} changed"


# ------------------------------------------------- 11: depth-loss properties


def _micro_divergence_count(lambda_depth, seeds=range(10)):
    spec = SyntheticSceneSpec(n_frames=4, width=16, height=16, seed=11)
    views = generate_synthetic_scene(spec)
    cfg = bb.ModelConfig(layout="1M1T", dim=8, dim_merged=16, merge_at=2,
                         patch=2, state_dim=4, head_dim=4, conv_width=2,
                         scan_chunk=8)
    count = 0
    for seed in seeds:
        params = bb.init_params(cfg, np.random.default_rng(seed))
        config = tr.TrainConfig(
            stages=[tr.StageConfig(16, 60, 0.2, view_range=(2, 4))],
            n_inputs=4, n_targets=2, warmup=0, seed=seed, grad_clip=1e9,
            order_augment=False,
            weights=LossWeights(lambda_depth=lambda_depth))
        with np.errstate(all="ignore"):
            try:
                tr.train_loop(params, cfg, [views], config)
            except tr.TrainingDiverged:
                count += 1
    return count


def test_11_depth_loss_normalization_and_stabilization():
    # median/deviation normalization in closed form
    normed = ls.normalize_disparity(Tensor(np.array([1.0, 2.0, 3.0]))).data
    assert np.allclose(normed, [-1.5, 0.0, 1.5], atol=1e-12)

    # invariance under positive rescaling of either disparity map
    r = np.random.default_rng(11)
    p = Tensor(r.uniform(0.5, 2.0, size=(2, 5, 5)))
    t = r.uniform(0.5, 2.0, size=(2, 5, 5))
    base = ls.depth_loss(p, t).item()
    for s in (0.1, 7.3):
        assert abs(ls.depth_loss(Tensor(p.data * s), t).item() - base) < 1e-6
        assert abs(ls.depth_loss(p, t * s).item() - base) < 1e-6

    # removing the depth anchor destabilizes aggressive micro-training
    with_depth = _micro_divergence_count(0.01)
    without = _micro_divergence_count(0.0)
    assert without > with_depth, (
        f"diverged {without}/10 without vs {with_depth}/10 with depth loss")


# ------------------------------------------------- 12: geometry protocol


def test_12_camera_normalization_and_split_protocol():
    views = generate_synthetic_scene(
        SyntheticSceneSpec(n_frames=24, width=16, height=16, seed=12))
    poses = [v.pose for v in views]
    normed, xform = normalize_poses(poses)
    for orig, new in zip(poses, normed):
        back = xform.invert(new)
        assert np.abs(back.rotation - orig.rotation).max() < 1e-5
        assert np.abs(back.position - orig.position).max() < 1e-5
    pos = np.stack([p.position for p in normed])
    assert np.abs(pos).max() <= 1.0 + 1e-9

    proto = ev.EvalProtocol(stride=8, n_inputs=6)
    inputs, test = ev.split_scene(views, proto)
    assert test.tolist() == list(range(0, 24, 8))
    assert not set(inputs.tolist()) & set(test.tolist())
    assert inputs.size == 6

    sel_a = list(kmeans_select(poses, 5, seed=0))
    sel_b = list(kmeans_select(poses, 5, seed=0))
    assert sel_a == sel_b
    assert len(set(sel_a)) == 5


# ------------------------------------------------- 13: end-to-end smoke


def test_13_cli_pipeline_round_trips_all_files(tmp_path):
    t0 = time.perf_counter()
    cfg_text = "\n".join([
        "model.layout = (1M1T)x1",
        "model.dim = 8",
        "model.dim_merged = 16",
        "model.merge_at = 2",
        "model.patch = 2",
        "model.state_dim = 4",
        "model.head_dim = 4",
        "model.conv_width = 2",
        "train.stages = 16:10:1e-3:range=4-8",
        "train.n_inputs = 4",
        "train.n_targets = 2",
        "train.warmup = 2",
        "scene.n_frames = 8",
        "scene.width = 16",
        "scene.height = 16",
        "eval.stride = 4",
        "eval.n_inputs = 3",
    ])
    cfg_path = tmp_path / "micro.cfg"
    cfg_path.write_text(cfg_text)
    scene_dir = tmp_path / "scene"
    ckpt = tmp_path / "model.npz"
    splat = tmp_path / "recon.splat.ply"
    raster = tmp_path / "view.png"
    report = tmp_path / "metrics.json"
    log = tmp_path / "train.jsonl"

    def run(*argv):
        rc = cli.main([*argv, "--config", str(cfg_path)])
        assert rc == 0, f"command failed: {argv}"

    run("generate", "--out", str(scene_dir), "--seed", "5")
    run("train", "--scene", str(scene_dir / "scene.json"),
        "--out", str(ckpt), "--log", str(log))
    run("reconstruct", "--checkpoint", str(ckpt),
        "--scene", str(scene_dir / "scene.json"), "--inputs", "3",
        "--out", str(splat))
    run("render", "--splat", str(splat),
        "--scene", str(scene_dir / "scene.json"), "--frame", "1",
        "--out", str(raster))
    run("eval", "--checkpoint", str(ckpt),
        "--scene", str(scene_dir / "scene.json"), "--out", str(report))

    # every artifact loads back with the documented reader
    manifest = scene_io.load_manifest(scene_dir / "scene.json")
    assert len(manifest.frames) == 8
    params, model_cfg = tr.load_checkpoint(ckpt)
    assert params and model_cfg.dim == 8
    g = ga.import_splat(splat)
    norm, extra = scene_io.load_frame_transform(str(splat) + ".json")
    assert g.position.data.shape[0] == extra["kept_gaussians"]
    img = scene_io.load_png(raster)
    assert img.shape == (16, 16, 3) and np.isfinite(img).all()
    metrics = json.loads(report.read_text())
    assert math.isfinite(metrics["mean_psnr"])
    for rec in [json.loads(line) for line in log.read_text().splitlines()]:
        assert math.isfinite(rec["loss_total"])
    assert time.perf_counter() - t0 < 1800.0
