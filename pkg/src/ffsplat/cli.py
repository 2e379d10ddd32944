"""Command-line entry points: generate, train, reconstruct, render, eval, bench.

Every command is a small wrapper over the library with a shared config file
format (ffsplat.config) and `--set key=value` overrides. Failures print a
single machine-parsable `error: ...` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import config as cfgmod
from . import losses
from .evaluation import (evaluate_scene, merge_placement_report,
                         run_arch_bench, run_merge_bench, split_scene)
from .gaussians import export_splat, import_splat, prune_eval
from .geometry import kmeans_select, PosedImage
from .numerics.tensor import Tensor
from .renderer import render_gaussians
from .scene_io import (load_frame_transform, load_scene, save_frame_transform,
                       save_png, save_scene)
from .synth import generate_synthetic_scene
from .training import (forward_scene, load_checkpoint, post_predict_optimize,
                       save_checkpoint, train_loop)


def _load_merged_config(args):
    cfg = cfgmod.load_config(args.config) if args.config else {}
    cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        for key in ("train.seed", "scene.seed", "eval.seed"):
            cfg[key] = args.seed
    return cfg


def _apply_runtime_flags(args):
    threads = 1 if args.deterministic else max(1, args.threads)
    try:
        import numba

        numba.set_num_threads(threads)
    except (ImportError, ValueError):
        pass


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    cfg = _load_merged_config(args)
    spec = cfgmod.scene_spec(cfg)
    views = generate_synthetic_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = save_scene(out, views)
    print(f"generated scene: {len(views)} frames at "
          f"{spec.width}x{spec.height} -> {manifest}")
    return 0


def cmd_train(args):
    cfg = _load_merged_config(args)
    model_cfg = cfgmod.model_config(cfg)
    train_cfg = cfgmod.train_config(cfg)
    scenes = [load_scene(p) for p in args.scene]
    params = bb.init_params(model_cfg, np.random.default_rng(train_cfg.seed))
    result = train_loop(params, model_cfg, scenes, train_cfg,
                        log_path=args.log)
    save_checkpoint(args.out, params, model_cfg)
    last = result.log[-1] if result.log else {}
    print(f"trained {train_cfg.total_steps} steps in "
          f"{result.wall_time:.1f}s; final loss "
          f"{last.get('loss_total', float('nan')):.5f} "
          f"psnr {last.get('psnr', float('nan')):.2f} -> {args.out}")
    return 0


def _select_input_views(views, count, seed):
    count = min(count, len(views))
    idx = kmeans_select([v.pose for v in views], count, seed=seed)
    return [int(i) for i in idx]


def cmd_reconstruct(args):
    cfg = _load_merged_config(args)
    params, model_cfg = load_checkpoint(args.checkpoint)
    views = load_scene(args.scene)
    protocol = cfgmod.eval_protocol(cfg)
    input_idx = _select_input_views(views, args.inputs or protocol.n_inputs,
                                    protocol.seed)
    input_views = [views[i] for i in input_idx]
    g, _, _, norm = forward_scene(params, model_cfg, input_views)
    g_pruned, _ = prune_eval(g, keep_frac=protocol.keep_frac)
    if args.refine_steps:
        refine_views = [PosedImage(v.rgb, norm.apply(v.pose), v.intrinsics,
                                   v.gt_disparity) for v in input_views]
        g_pruned = post_predict_optimize(g_pruned, refine_views,
                                         steps=args.refine_steps)
    export_splat(args.out, g_pruned)
    save_frame_transform(str(args.out) + ".json", norm, extra={
        "input_frames": input_idx,
        "refine_steps": int(args.refine_steps),
        "kept_gaussians": len(g_pruned),
    })
    print(f"reconstructed {len(g_pruned)} gaussians from "
          f"{len(input_views)} views -> {args.out}")
    return 0


def cmd_render(args):
    g = import_splat(args.splat)
    sidecar = Path(str(args.splat) + ".json")
    views = load_scene(args.scene)
    if not 0 <= args.frame < len(views):
        raise ValueError(f"frame {args.frame} outside scene "
                         f"(0..{len(views) - 1})")
    view = views[args.frame]
    pose = view.pose
    if sidecar.exists():
        norm, _ = load_frame_transform(sidecar)
        pose = norm.apply(pose)
    img = render_gaussians(g, pose, view.intrinsics)
    rgb = np.clip(img.data[..., :3], 0.0, 1.0)
    save_png(args.out, rgb)
    line = f"rendered frame {args.frame} -> {args.out}"
    if args.compare:
        line += f" psnr {losses.psnr(img.data[..., :3], view.rgb):.2f}"
    print(line)
    return 0


def cmd_eval(args):
    cfg = _load_merged_config(args)
    if args.short_protocol:
        cfg.setdefault("eval.max_frames", 96)
    protocol = cfgmod.eval_protocol(cfg)
    params, model_cfg = load_checkpoint(args.checkpoint)
    views = load_scene(args.scene)
    report = evaluate_scene(params, model_cfg, views, protocol)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1)
    print(f"eval: {len(report['test_frames'])} test views "
          f"psnr {report['mean_psnr']:.2f} ssim {report['mean_ssim']:.4f} "
          f"usage {report['gaussian_usage']:.3f} "
          f"({report['wall_time']:.1f}s)")
    return 0


def cmd_bench(args):
    if args.mode == "arch":
        report = run_arch_bench(args.lengths, dim=args.dim, runs=args.runs,
                                with_backward=args.backward)
        text = report.to_csv()
    elif args.mode == "merge":
        report = run_merge_bench(args.lengths[0], runs=args.runs)
        text = report.to_csv()
    else:  # placement
        rows = merge_placement_report([1, 9, 17], length_tokens=args.lengths[0],
                                      runs=args.runs)
        lines = ["merge_at,blocks,params_analytic,params_actual,"
                 "forward_ms,iqr_ms,peak_kb"]
        for r in rows:
            lines.append(f"{r['merge_at']},{r['blocks']},"
                         f"{r['params_analytic']},{r['params_actual']},"
                         f"{r['forward_ms']:.3f},{r['iqr_ms']:.3f},"
                         f"{r['peak_kb']:.1f}")
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"bench ({args.mode}) -> {args.out}")
    else:
        print(text, end="")
    return 0


# ------------------------------------------------------------------ parser

def _add_common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="override train/scene/eval seeds at once")
    p.add_argument("--threads", type=int, default=1,
                   help="numba worker threads")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="pin to one thread and fixed reduction order "
                        "(default on)")
    p.add_argument("--no-deterministic", dest="deterministic",
                   action="store_false")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ffsplat",
        description="Feed-forward Gaussian-splatting reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="ray-trace a synthetic scene")
    _add_common(p)
    p.add_argument("--out", required=True, help="output scene directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on scene manifests")
    _add_common(p)
    p.add_argument("--scene", action="append", required=True,
                   help="scene manifest (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint output (.npz)")
    p.add_argument("--log", default=None, help="JSONL step log path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct",
                       help="feed-forward a scene into a splat file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="splat .ply output")
    p.add_argument("--inputs", type=int, default=None,
                   help="number of input views (default: eval.n_inputs)")
    p.add_argument("--refine-steps", type=int, default=0,
                   help="post-prediction optimization steps")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("render", help="rasterize one camera from a splat file")
    _add_common(p)
    p.add_argument("--splat", required=True)
    p.add_argument("--scene", required=True,
                   help="manifest supplying the camera")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True, help="PNG output")
    p.add_argument("--compare", action="store_true",
                   help="also report PSNR against the manifest image")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="held-out-view evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None, help="metric report JSON")
    p.add_argument("--short-protocol", action="store_true",
                   help="score only the first 96 frames")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="timing/memory benchmarks (CSV)")
    _add_common(p)
    p.add_argument("--mode", choices=("arch", "merge", "placement"),
                   default="arch")
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--backward", action="store_true",
                   help="also time forward+backward")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_runtime_flags(args)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
