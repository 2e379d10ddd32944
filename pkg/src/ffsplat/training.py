"""Staged training loop: AdamW, warmup+cosine schedule, JSONL step logs.

The loop owns all randomness through a single seeded Generator, so a given
(seed, config, dataset) triple replays the same loss curve bit for bit.
Divergence (non-finite loss or gradient norm) raises TrainingDiverged with a
diagnostic snapshot instead of silently continuing.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import backbone as bb
from . import losses
from .gaussians import decode_gaussians, gaussian_usage, prune_train
from .geometry import (PinholeIntrinsics, PosedImage, normalize_poses,
                       plucker_rays, ray_features, resize_bilinear,
                       sample_training_views)
from .numerics import ops
from .numerics.tensor import Tape, Tensor, backward
from .renderer import render_gaussians

BETA1 = 0.9
BETA2 = 0.95
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.05


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient norm."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


# ------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    """First/second moment buffers plus the shared step counter."""

    step: int
    m: dict
    v: dict


def init_optimizer_state(params):
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adamw_step(params, grads, state, lr, beta1=BETA1, beta2=BETA2,
               eps=ADAM_EPS, weight_decay=WEIGHT_DECAY):
    """One decoupled-weight-decay Adam update, in place.

    Weight decay multiplies parameters by (1 - lr * weight_decay) before the
    moment update is applied, so zero gradients still shrink weights. lr == 0
    leaves every parameter bitwise unchanged (moments still advance).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        p = params[name]
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        p.data *= 1.0 - lr * weight_decay
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm (computed in float64). Non-finite norms are
    returned unscaled so the caller can abort loudly instead of training on
    silently zeroed updates.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        return norm
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -------------------------------------------------------------- schedule

def lr_schedule(step, total_steps, peak_lr, warmup=2000):
    """Linear warmup from 0 to peak_lr, then cosine decay to exactly 0.

    step 0 -> 0, step == warmup -> peak_lr, step >= total_steps -> 0.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step >= total_steps:
        return 0.0
    warmup = min(warmup, total_steps)
    if step < warmup:
        return peak_lr * step / warmup
    span = max(total_steps - warmup, 1)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * (step - warmup) / span))


# ---------------------------------------------------------------- config

@dataclass
class StageConfig:
    """One curriculum stage: square resolution, step budget, peak lr."""

    resolution: int
    steps: int
    peak_lr: float
    prune: bool = False
    whole_sequence: bool = False
    view_range: tuple = (64, 128)

    def __post_init__(self):
        if self.resolution <= 0 or self.steps <= 0:
            raise ValueError("stage resolution and steps must be positive")
        if self.peak_lr <= 0:
            raise ValueError("stage peak_lr must be positive")


def desk_stages():
    """Three-stage curriculum sized for a single CPU core."""
    return [
        StageConfig(64, 2000, 4e-3, view_range=(16, 32)),
        StageConfig(96, 500, 1e-3, view_range=(24, 32)),
        StageConfig(128, 500, 1e-3, prune=True, whole_sequence=True),
    ]


@dataclass
class TrainConfig:
    stages: list = field(default_factory=desk_stages)
    n_inputs: int = 8
    n_targets: int = 4
    warmup: int = 2000
    seed: int = 0
    grad_clip: float = 1.0  # 0 disables clipping
    order_augment: bool = True
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    log_every: int = 1

    def __post_init__(self):
        if not self.stages:
            raise ValueError("need at least one stage")
        if self.n_inputs < 1 or self.n_targets < 1:
            raise ValueError("n_inputs and n_targets must be >= 1")
        if self.warmup < 0 or self.grad_clip < 0:
            raise ValueError("warmup and grad_clip must be >= 0")

    @property
    def total_steps(self):
        return sum(s.steps for s in self.stages)


@dataclass
class TrainResult:
    log: list
    wall_time: float
    final_lr: float


def run_diverged(log, window_frac=0.1):
    """Classify a finished run as diverged from its logged PSNR curve.

    A run counts as diverged when it ends no better than it began — the mean
    PSNR over the closing window (a window_frac fraction of the logged
    entries, at least one) fails to exceed the mean over the opening window —
    or when any logged loss/PSNR value is non-finite. Runs aborted by
    TrainingDiverged are diverged by definition; this covers the
    completed-but-collapsed case, which is how instability presents once
    every activation is bounded.
    """
    if not log:
        return True
    vals = [r["psnr"] for r in log]
    totals = [r.get("loss_total", 0.0) for r in log]
    if not all(map(math.isfinite, vals + totals)):
        return True
    w = max(1, int(round(len(vals) * window_frac)))
    return float(np.mean(vals[-w:])) <= float(np.mean(vals[:w]))


# ------------------------------------------------------------ checkpoint

def save_checkpoint(path, params, cfg):
    """Write params + model config to one .npz; arrays round-trip bitwise."""
    payload = {"param/" + k: p.data for k, p in params.items()}
    payload["config"] = np.array(json.dumps(asdict(cfg)))
    with open(path, "wb") as f:
        np.savez(f, **payload)
    return path


def load_checkpoint(path):
    """Inverse of save_checkpoint: returns (params, ModelConfig)."""
    with np.load(path, allow_pickle=False) as z:
        names = [k for k in z.files if k.startswith("param/")]
        if "config" not in z.files or not names:
            raise ValueError(f"not a checkpoint file: {path}")
        cfg_dict = json.loads(str(z["config"]))
        if "merge_at" in cfg_dict and cfg_dict["merge_at"] is not None:
            cfg_dict["merge_at"] = int(cfg_dict["merge_at"])
        cfg = bb.ModelConfig(**cfg_dict)
        params = {k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True)
                  for k in names}
    return params, cfg


# ------------------------------------------------------------ train loop

def views_at_resolution(views, res, cache):
    """Scene views resampled to res x res (bilinear; intrinsics rescaled)."""
    key = res
    if key in cache:
        return cache[key]
    out = []
    for v in views:
        if v.rgb.shape[0] == res and v.rgb.shape[1] == res:
            out.append(v)
            continue
        sy = res / v.rgb.shape[0]
        sx = res / v.rgb.shape[1]
        rgb = resize_bilinear(v.rgb, res, res).astype(np.float32)
        disp = None
        if v.gt_disparity is not None:
            disp = resize_bilinear(v.gt_disparity, res, res).astype(np.float32)
        out.append(PosedImage(rgb, v.pose, v.intrinsics.scaled(sx, sy), disp))
    cache[key] = out
    return out


def _stage_of(step, stages):
    """(stage_index, stage) for a global step."""
    acc = 0
    for i, s in enumerate(stages):
        acc += s.steps
        if step < acc:
            return i, s
    return len(stages) - 1, stages[-1]


def forward_scene(params, model_cfg, input_views, rng=None, prune=False):
    """Shared forward path: normalize poses, run the backbone, decode.

    Returns (gaussians, t_map, normalization, raymaps); gaussians are
    expressed in the normalized camera frame.
    """
    _, norm = normalize_poses([v.pose for v in input_views])
    raymaps = [plucker_rays(norm.apply(v.pose), v.intrinsics)
               for v in input_views]
    feats = ray_features(input_views, raymaps)
    raw = bb.forward_features(params, model_cfg, feats)
    g, t_map = decode_gaussians(raw, raymaps, near=model_cfg.near,
                                far=model_cfg.far)
    if prune:
        g_render, _ = prune_train(g, rng)
    else:
        g_render = g
    return g, g_render, t_map, norm


def train_step(params, model_cfg, views, config, stage, rng):
    """One optimization-ready forward/backward pass; returns loss info.

    Does not touch the optimizer: caller applies clipping + adamw_step.
    """
    idx_in, idx_tg = sample_training_views(
        len(views), config.n_inputs, config.n_targets, rng,
        range_frames=stage.view_range, whole_sequence=stage.whole_sequence,
        order_augment=config.order_augment)
    input_views = [views[i] for i in idx_in]
    target_views = [views[i] for i in idx_tg]
    with Tape() as tape:
        g, g_render, t_map, norm = forward_scene(
            params, model_cfg, input_views, rng=rng, prune=stage.prune)
        preds = []
        for tv in target_views:
            img = render_gaussians(g_render, norm.apply(tv.pose),
                                   tv.intrinsics)
            preds.append(ops.getitem(img, (Ellipsis, slice(0, 3))))
        pred_disp = losses.disparity_from_gaussians(t_map)
        gt_disp = np.stack([v.gt_disparity for v in input_views])
        total, parts = losses.total_loss(
            preds, [tv.rgb for tv in target_views], pred_disp, gt_disp, g,
            weights=config.weights)
    snr = float(np.mean([losses.psnr(p.data, tv.rgb)
                         for p, tv in zip(preds, target_views)]))
    usage = gaussian_usage(g)
    return tape, total, parts, snr, usage


def train_loop(params, model_cfg, scenes, config, log_path=None):
    """Run the staged curriculum over a list of scenes (lists of PosedImage).

    Mutates params in place and returns a TrainResult whose log holds one
    dict per step (losses, psnr, gaussian usage, lr, grad norm, wall time).
    Raises TrainingDiverged on the first non-finite loss or gradient norm.
    """
    for s in config.stages:
        if s.resolution % model_cfg.pad_multiple:
            raise ValueError(
                f"stage resolution {s.resolution} not divisible by the "
                f"model's token multiple {model_cfg.pad_multiple}")
    rng = np.random.default_rng(config.seed)
    state = init_optimizer_state(params)
    caches = [dict() for _ in scenes]
    log = []
    total_steps = config.total_steps
    t0 = time.perf_counter()
    log_file = open(log_path, "w") if log_path else None
    lr = 0.0
    try:
        for step in range(total_steps):
            stage_idx, stage = _stage_of(step, config.stages)
            scene_idx = int(rng.integers(len(scenes)))
            views = views_at_resolution(scenes[scene_idx], stage.resolution,
                                         caches[scene_idx])
            tape, total, parts, snr, usage = train_step(
                params, model_cfg, views, config, stage, rng)
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}",
                    _divergence_snapshot(step, stage_idx, lr, parts, params,
                                         log, log_file))
            backward(tape, total, params=params.values())
            grads = {k: p.grad for k, p in params.items()}
            norm = clip_grad_norm(grads, config.grad_clip)
            if not math.isfinite(norm):
                raise TrainingDiverged(
                    f"non-finite gradient norm at step {step}",
                    _divergence_snapshot(step, stage_idx, lr, parts, params,
                                         log, log_file))
            lr = lr_schedule(step, total_steps, stage.peak_lr, config.warmup)
            adamw_step(params, grads, state, lr)
            for p in params.values():
                p.grad = None
            rec = {
                "step": step,
                "stage": stage_idx,
                "resolution": stage.resolution,
                "scene": scene_idx,
                "lr": lr,
                "grad_norm": norm,
                "psnr": snr,
                "gaussian_usage": usage,
                "wall_time": time.perf_counter() - t0,
            }
            rec.update({"loss_" + k: v for k, v in parts.items()})
            if step % config.log_every == 0 or step == total_steps - 1:
                log.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return TrainResult(log=log, wall_time=time.perf_counter() - t0,
                       final_lr=lr)


def _divergence_snapshot(step, stage_idx, lr, parts, params, log, log_file):
    snap = {
        "event": "diverged",
        "step": step,
        "stage": stage_idx,
        "last_lr": lr,
        "loss_parts": parts,
        "param_stats": {
            k: {
                "max_abs": float(np.max(np.abs(p.data))),
                "finite": bool(np.all(np.isfinite(p.data))),
            }
            for k, p in params.items()
        },
        "last_records": log[-3:],
    }
    if log_file:
        log_file.write(json.dumps(snap) + "\n")
        log_file.flush()
    return snap


# ------------------------------------------------- post-predict refinement

def post_predict_optimize(g, views, steps, lr_position=5e-4, lr_sh=1e-3,
                          beta1=BETA1, beta2=BETA2, eps=ADAM_EPS,
                          terminate_eps=1e-4):
    """Refine position and SH of a predicted set against its input views.

    Optimizes plain MSE on the given views with Adam (no weight decay);
    opacity, scale and rotation tensors are reused untouched, so they stay
    bitwise identical. steps == 0 returns g unchanged. Views must carry
    poses in the same frame as g's positions.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return g
    if not views:
        raise ValueError("need at least one view to refine against")
    pos = Tensor(g.position.data.copy(), requires_grad=True)
    sh = Tensor(g.sh.data.copy(), requires_grad=True)
    trainables = {"position": (pos, lr_position), "sh": (sh, lr_sh)}
    m = {k: np.zeros_like(t.data) for k, (t, _) in trainables.items()}
    v = {k: np.zeros_like(t.data) for k, (t, _) in trainables.items()}
    refined = type(g)(position=pos, sh=sh, scale=g.scale,
                      rotation=g.rotation, opacity=g.opacity)
    for t_step in range(1, steps + 1):
        with Tape() as tape:
            loss = None
            for view in views:
                img = render_gaussians(refined, view.pose, view.intrinsics,
                                       terminate_eps=terminate_eps)
                rgb = ops.getitem(img, (Ellipsis, slice(0, 3)))
                term = losses.mse_loss(rgb, view.rgb)
                loss = term if loss is None else ops.add(loss, term)
            loss = ops.div(loss, float(len(views)))
        backward(tape, loss, params=[pos, sh])
        bc1 = 1.0 - beta1 ** t_step
        bc2 = 1.0 - beta2 ** t_step
        for key, (tensor, lr) in trainables.items():
            grad = tensor.grad
            m[key] = beta1 * m[key] + (1.0 - beta1) * grad
            v[key] = beta2 * v[key] + (1.0 - beta2) * grad * grad
            tensor.data -= (lr / bc1) * m[key] / (np.sqrt(v[key] / bc2) + eps)
            tensor.grad = None
    return refined
