"""Held-out-view evaluation, architecture benchmarks, merge-placement study.

Evaluation splits a captured sequence into a strided test set and a
k-means-selected input set, runs the feed-forward model once, prunes to the
top-opacity half, and scores every test view. The benchmark harness times
single blocks and whole backbones across sequence lengths with tracemalloc
peak-memory readings; all timings are medians of several runs after a
discarded warm-up.
"""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backbone as bb
from . import losses
from .gaussians import gaussian_usage, prune_eval
from .geometry import kmeans_select
from .numerics.tensor import Tape, Tensor, backward
from .numerics import ops
from .renderer import render_gaussians
from .training import views_at_resolution, forward_scene


# ---------------------------------------------------------------- protocol

@dataclass
class EvalProtocol:
    """Held-out evaluation recipe: strided test split, clustered inputs."""

    stride: int = 8
    n_inputs: int = 16
    keep_frac: float = 0.5
    resolution: Optional[int] = None
    max_frames: Optional[int] = None  # short protocol: score a prefix only
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.n_inputs < 1:
            raise ValueError("n_inputs must be >= 1")
        if not 0.0 < self.keep_frac <= 1.0:
            raise ValueError("keep_frac must be in (0, 1]")


def split_scene(views, protocol):
    """(input_indices, test_indices): every stride-th frame is a test frame,
    inputs are k-means representatives of the remaining ones. Disjoint."""
    n = len(views)
    if protocol.max_frames is not None:
        n = min(n, protocol.max_frames)
    test = np.arange(0, n, protocol.stride, dtype=np.int64)
    rest = np.setdiff1d(np.arange(n, dtype=np.int64), test)
    if protocol.n_inputs > len(rest):
        raise ValueError(
            f"protocol wants {protocol.n_inputs} inputs but only "
            f"{len(rest)} non-test frames exist")
    picked = kmeans_select([views[i].pose for i in rest], protocol.n_inputs,
                           seed=protocol.seed)
    return rest[np.asarray(picked, dtype=np.int64)], test


def evaluate_scene(params, model_cfg, views, protocol=None):
    """Feed-forward once, prune to the top-opacity fraction, score test views.

    Returns the metric-report dict (per-view PSNR/SSIM, means, gaussian
    usage of the raw prediction) plus wall_time and the split indices.
    """
    protocol = protocol or EvalProtocol()
    if protocol.max_frames is not None:
        views = views[:protocol.max_frames]
    if protocol.resolution is not None:
        views = views_at_resolution(views, protocol.resolution, {})
    in_idx, test_idx = split_scene(views, protocol)
    input_views = [views[i] for i in in_idx]
    t0 = time.perf_counter()
    g, _, _, norm = forward_scene(params, model_cfg, input_views)
    usage = gaussian_usage(g)
    g_eval, _ = prune_eval(g, keep_frac=protocol.keep_frac)
    per_view = []
    for i in test_idx:
        tv = views[i]
        img = render_gaussians(g_eval, norm.apply(tv.pose), tv.intrinsics)
        rgb = img.data[..., :3]
        per_view.append({
            "frame": int(i),
            "psnr": losses.psnr(rgb, tv.rgb),
            "ssim": losses.ssim(rgb, tv.rgb).item(),
        })
    report = losses.metric_report(per_view, gaussian_usage=usage)
    report["wall_time"] = time.perf_counter() - t0
    report["input_frames"] = [int(i) for i in in_idx]
    report["test_frames"] = [int(i) for i in test_idx]
    report["kept_gaussians"] = len(g_eval)
    return report


# --------------------------------------------------------------- benchmark

@dataclass
class BenchRow:
    variant: str
    length: int
    forward_ms: float
    forward_backward_ms: float
    iqr_ms: float
    peak_kb: float


CSV_HEADER = ["variant", "length", "forward_ms", "forward_backward_ms",
              "iqr_ms", "peak_kb"]


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.variant, r.length, f"{r.forward_ms:.3f}",
                        f"{r.forward_backward_ms:.3f}", f"{r.iqr_ms:.3f}",
                        f"{r.peak_kb:.1f}"])
        return buf.getvalue()

    @staticmethod
    def from_csv(text):
        rows = []
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected benchmark CSV header: {header}")
        for rec in reader:
            rows.append(BenchRow(rec[0], int(rec[1]), float(rec[2]),
                                 float(rec[3]), float(rec[4]),
                                 float(rec[5])))
        return BenchReport(rows)


def _block_config(kind, dim, state_dim=None, head_dim=None):
    return bb.ModelConfig(layout=f"1{kind}", dim=dim, merge_at=None,
                          state_dim=state_dim or min(64, dim),
                          head_dim=head_dim or min(64, dim),
                          scan_chunk=64, attn_rows=1024)


def _median_iqr(samples):
    med = float(np.median(samples))
    q1, q3 = np.percentile(samples, [25, 75])
    return med, float(q3 - q1)


def time_block(kind, length, dim=64, runs=5, with_backward=False, seed=0):
    """Median wall time (ms) of one block forward (or forward+backward).

    First run is a discarded warm-up; returns (median_ms, iqr_ms, peak_kb)
    where peak_kb is tracemalloc's peak during a single forward pass.
    """
    cfg = _block_config(kind, dim)
    params = bb.init_params(cfg, np.random.default_rng(seed))
    x_np = np.random.default_rng(seed + 1).normal(
        size=(length, dim)).astype(np.float32) * 0.1

    def run_once():
        x = Tensor(x_np)
        if with_backward:
            with Tape() as tape:
                y = bb.run_block(x, params, 0, kind, cfg, dim)
                loss = ops.tmean(ops.mul(y, y))
            backward(tape, loss, params=params.values())
            for p in params.values():
                p.grad = None
        else:
            bb.run_block(x, params, 0, kind, cfg, dim)

    run_once()  # warm-up (jit, caches)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        run_once()
        times.append((time.perf_counter() - t0) * 1e3)
    tracemalloc.start()
    bb.run_block(Tensor(x_np), params, 0, kind, cfg, dim)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    med, iqr = _median_iqr(times)
    return med, iqr, peak / 1024.0


def time_backbone(cfg, length_tokens, runs=5, seed=0):
    """Median forward time (ms) and peak memory (kb) of a full backbone.

    length_tokens is the pre-merge token count; the input is shaped as one
    image of patch-grid length length_tokens.
    """
    params = bb.init_params(cfg, np.random.default_rng(seed))
    side = int(round(length_tokens ** 0.5))
    if side * side != length_tokens:
        raise ValueError("length_tokens must be a perfect square")
    h = w = side * cfg.patch
    feats = np.random.default_rng(seed + 1).normal(
        size=(1, h, w, bb.IN_CHANNELS)).astype(np.float32) * 0.1

    def run_once():
        bb.forward_features(params, cfg, feats)

    run_once()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        run_once()
        times.append((time.perf_counter() - t0) * 1e3)
    tracemalloc.start()
    run_once()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    med, iqr = _median_iqr(times)
    return med, iqr, peak / 1024.0


ARCH_VARIANTS = ("transformer", "mamba2")


def run_arch_bench(lengths, dim=64, runs=5, with_backward=False, seed=0):
    """Single-block timing table across sequence lengths.

    Variants: one transformer block vs one bidirectional-scan block. The
    asymptotic signature lives in the time ratio between successive
    doublings: quadratic attention roughly quadruples, the scan roughly
    doubles.
    """
    report = BenchReport()
    for variant, kind in (("transformer", "T"), ("mamba2", "M")):
        for L in lengths:
            fwd, iqr, peak = time_block(kind, L, dim=dim, runs=runs,
                                        seed=seed)
            fb = 0.0
            if with_backward:
                fb, _, _ = time_block(kind, L, dim=dim, runs=runs,
                                      with_backward=True, seed=seed)
            report.rows.append(BenchRow(variant, L, fwd, fb, iqr, peak))
    return report


def run_merge_bench(length_tokens, dim=32, dim_merged=128, runs=5, seed=0):
    """Merged vs unmerged hybrid backbones at one token count.

    Returns a BenchReport with two rows (hybrid_merge, hybrid_nomerge);
    the merged variant should both run faster and allocate less peak
    memory, since three quarters of the tokens disappear mid-network.
    """
    report = BenchReport()
    base = dict(layout="3M1T", dim=dim, state_dim=32, head_dim=32,
                patch=4, scan_chunk=64, attn_rows=1024)
    merged = bb.ModelConfig(dim_merged=dim_merged, merge_at=2, **base)
    plain = bb.ModelConfig(dim_merged=dim_merged, merge_at=None, **base)
    for name, cfg in (("hybrid_merge", merged), ("hybrid_nomerge", plain)):
        med, iqr, peak = time_backbone(cfg, length_tokens, runs=runs,
                                       seed=seed)
        report.rows.append(BenchRow(name, length_tokens, med, 0.0, iqr,
                                    peak))
    return report


# ------------------------------------------------- merge placement ablation

def merge_placement_report(positions, layout="(3M1T)x6", dim=32,
                           dim_merged=128, length_tokens=64, runs=3,
                           seed=0):
    """Instantiate the same layout with the merge at several depths.

    Each row reports the analytic parameter count, the instantiated count
    (they must agree exactly), and the median forward time at a fixed token
    count. Earlier merges shrink the expensive deep blocks, so position 1
    is fastest and has the fewest parameters of any position here (the
    narrow pre-merge width applies to fewer blocks).
    """
    rows = []
    width = min(dim, dim_merged)
    for pos in positions:
        cfg = bb.ModelConfig(layout=layout, dim=dim, dim_merged=dim_merged,
                             merge_at=pos, patch=4, state_dim=width,
                             head_dim=width, scan_chunk=64, attn_rows=1024)
        params = bb.init_params(cfg, np.random.default_rng(seed))
        analytic = bb.param_count(cfg)
        actual = sum(int(p.data.size) for p in params.values())
        med, iqr, peak = time_backbone(cfg, length_tokens, runs=runs,
                                       seed=seed)
        rows.append({
            "merge_at": pos,
            "blocks": len(cfg.blocks),
            "params_analytic": analytic,
            "params_actual": actual,
            "forward_ms": med,
            "iqr_ms": iqr,
            "peak_kb": peak,
        })
    return rows
