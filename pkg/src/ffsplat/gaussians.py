"""Per-pixel Gaussians: decoding raw channels, pruning, splat-file IO.

Gaussians live on camera rays: each pixel's Gaussian sits at
origin + t * direction with t = near + (far - near) * sigmoid(raw).
SH layout is the splat-file convention: 3 DC values, then 45 higher-order
coefficients channel-major (15 per color channel, degree-ascending).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .numerics import Tensor, ops

SCALE_BIAS = -6.9
SCALE_MAX = -1.2  # pre-exp cap: scales never exceed exp(-1.2)
OPACITY_BIAS = -2.0
PRUNE_EPS = 1e-3


@dataclass
class GaussianSet:
    """Columnar Gaussians. Fields are Tensors so gradients can flow."""

    position: Tensor  # (K,3)
    sh: Tensor  # (K,48)
    scale: Tensor  # (K,3) in (0, exp(-1.2)]
    rotation: Tensor  # (K,4) unit quaternions
    opacity: Tensor  # (K,) in (0,1)

    def __len__(self):
        return self.position.shape[0]


def _flat_rays(raymaps):
    dirs = np.concatenate([r.directions.reshape(-1, 3) for r in raymaps], axis=0)
    origins = np.concatenate([
        np.broadcast_to(r.origin.astype(np.float32), (r.directions.shape[0] * r.directions.shape[1], 3))
        for r in raymaps], axis=0)
    return dirs, origins


def decode_gaussians(raw, raymaps, near=0.01, far=4.0):
    """Raw (N,H,W,57) channels + per-view rays -> (GaussianSet, t map).

    t map is the (N,H,W) ray distance of every pixel's Gaussian, kept for
    disparity supervision before any pruning.
    """
    n, h, w, ch = raw.shape
    if ch != bb.RAW_CHANNELS:
        raise ValueError(f"expected {bb.RAW_CHANNELS} raw channels, got {ch}")
    k = n * h * w
    flat = ops.reshape(raw, (k, ch))
    dirs, origins = _flat_rays(raymaps)
    if dirs.shape[0] != k:
        raise ValueError(f"rays cover {dirs.shape[0]} pixels, raw covers {k}")
    dirs_t = Tensor(dirs.astype(raw.dtype.type, copy=False))
    origins_t = Tensor(origins.astype(raw.dtype.type, copy=False))

    t = ops.sigmoid(ops.getitem(flat, (slice(None), bb.RAW_DIST)))
    t = ops.add(ops.mul(t, far - near), near)  # (K,1)
    position = ops.add(origins_t, ops.mul(t, dirs_t))

    sh = ops.getitem(flat, (slice(None), bb.RAW_SH))
    scale = ops.exp(ops.clamp(ops.add(ops.getitem(flat, (slice(None), bb.RAW_SCALE)), SCALE_BIAS),
                              hi=SCALE_MAX))

    rot_raw = ops.getitem(flat, (slice(None), bb.RAW_ROT))
    sq = ops.tsum(ops.mul(rot_raw, rot_raw), axis=1, keepdims=True)
    dead = (sq.data < 1e-20).astype(raw.dtype.type)  # all-zero rows become identity
    fix = dead * np.array([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype.type)
    rot_raw = ops.add(rot_raw, Tensor(fix))
    norm = ops.sqrt(ops.tsum(ops.mul(rot_raw, rot_raw), axis=1, keepdims=True))
    rotation = ops.div(rot_raw, norm)

    opacity = ops.sigmoid(ops.add(ops.getitem(flat, (slice(None), 56)), OPACITY_BIAS))

    g = GaussianSet(position, sh, scale, rotation, opacity)
    return g, ops.reshape(t, (n, h, w))


def select(g, idx):
    """Keep rows `idx` (stable gather; gradients flow only to kept rows)."""
    idx = np.asarray(idx, dtype=np.int64)
    return GaussianSet(*(ops.gather(f, idx) for f in
                         (g.position, g.sh, g.scale, g.rotation, g.opacity)))


def _top_by_opacity(opacity, k):
    # stable descending sort: ties keep lower index first
    return np.argsort(-opacity, kind="stable")[:k]


def prune_train(g, rng, top_frac=0.40, rand_frac=0.10):
    """Keep the top `top_frac` by opacity plus `rand_frac` of the rest,
    sampled uniformly. Kept rows stay in their original order."""
    k = len(g)
    op = g.opacity.data
    n_top = math.ceil(top_frac * k)
    order = np.argsort(-op, kind="stable")
    top = order[:n_top]
    rest = order[n_top:]
    n_rand = math.ceil(rand_frac * len(rest))
    extra = rng.choice(rest, size=n_rand, replace=False) if n_rand else np.empty(0, np.int64)
    keep = np.sort(np.concatenate([top, extra]).astype(np.int64))
    return select(g, keep), keep


def prune_eval(g, keep_frac=0.50):
    """Keep the top `keep_frac` fraction by opacity, original order."""
    keep = np.sort(_top_by_opacity(g.opacity.data, math.ceil(keep_frac * len(g))))
    return select(g, keep), keep


def prune_threshold(g, eps=PRUNE_EPS):
    """Drop Gaussians with opacity <= eps."""
    keep = np.flatnonzero(g.opacity.data > eps)
    return select(g, keep), keep


def gaussian_usage(g, eps=PRUNE_EPS):
    """Fraction of Gaussians with opacity above the render threshold."""
    return float(np.mean(g.opacity.data > eps))


# ------------------------------------------------------------------ splat IO

_PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz"]
               + [f"f_dc_{i}" for i in range(3)]
               + [f"f_rest_{i}" for i in range(45)]
               + ["opacity"]
               + [f"scale_{i}" for i in range(3)]
               + [f"rot_{i}" for i in range(4)])


def export_splat(path, g):
    """Write the de-facto splat PLY: positions, SH, logit opacity,
    log scales, quaternions; all float32 little-endian."""
    k = len(g)
    rows = np.zeros((k, len(_PLY_FIELDS)), dtype="<f4")
    rows[:, 0:3] = g.position.data
    rows[:, 6:9] = g.sh.data[:, 0:3]
    rows[:, 9:54] = g.sh.data[:, 3:48]
    op = g.opacity.data.astype(np.float64)
    if np.any(op <= 0) or np.any(op >= 1):
        raise ValueError("opacity must lie strictly inside (0,1) for logit storage")
    rows[:, 54] = np.log(op) - np.log1p(-op)
    sc = g.scale.data.astype(np.float64)
    if np.any(sc <= 0):
        raise ValueError("scales must be positive for log storage")
    rows[:, 55:58] = np.log(sc)
    rows[:, 58:62] = g.rotation.data
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {k}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def import_splat(path):
    """Read a splat PLY written by export_splat."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a splat PLY")
    lines = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError(f"{path}: unsupported PLY format {lines[1]!r}")
    k = None
    props = []
    for ln in lines[2:]:
        if ln.startswith("element vertex"):
            k = int(ln.split()[-1])
        elif ln.startswith("element"):
            raise ValueError(f"{path}: unexpected element {ln!r}")
        elif ln.startswith("property"):
            kind, name = ln.split()[1:]
            if kind != "float":
                raise ValueError(f"{path}: property {name} is {kind}, expected float")
            props.append(name)
    if k is None or props != _PLY_FIELDS:
        raise ValueError(f"{path}: unexpected splat layout")
    rows = np.frombuffer(blob, dtype="<f4", offset=end + len(b"end_header\n"))
    if rows.size != k * len(_PLY_FIELDS):
        raise ValueError(f"{path}: expected {k} vertices, payload has {rows.size} floats")
    rows = rows.reshape(k, len(_PLY_FIELDS)).astype(np.float32)
    sh = np.concatenate([rows[:, 6:9], rows[:, 9:54]], axis=1)
    logits = rows[:, 54].astype(np.float64)
    opacity = 1.0 / (1.0 + np.exp(-logits))
    scale = np.exp(rows[:, 55:58].astype(np.float64))
    return GaussianSet(
        position=Tensor(rows[:, 0:3].copy()),
        sh=Tensor(sh),
        scale=Tensor(scale.astype(np.float32)),
        rotation=Tensor(rows[:, 58:62].copy()),
        opacity=Tensor(opacity.astype(np.float32)),
    )
