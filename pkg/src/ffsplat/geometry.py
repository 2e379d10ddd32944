"""Cameras, rays and view bookkeeping.

Camera convention: world-from-camera rotation with +x right, +y down,
+z forward (columns of the rotation matrix); pixel (u, v) maps to the
camera-space ray ((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1).
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray  # (3,3), orthonormal, det +1
    position: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    @property
    def right(self):
        return self.rotation[:, 0]

    @property
    def down(self):
        return self.rotation[:, 1]

    @property
    def forward(self):
        return self.rotation[:, 2]

    def world_to_camera(self, pts):
        return (np.asarray(pts) - self.position) @ self.rotation


@dataclass
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, sx, sy):
        """Intrinsics after resampling the image by (sx, sy)."""
        return PinholeIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                                 int(round(self.width * sx)), int(round(self.height * sy)))


@dataclass
class PosedImage:
    rgb: np.ndarray  # (H,W,3) float32 in [0,1]
    pose: CameraPose
    intrinsics: PinholeIntrinsics
    gt_disparity: Optional[np.ndarray] = None  # (H,W) float32, positive where valid


@dataclass
class RayMap:
    """Per-pixel Plucker rays: unit direction d and moment m = origin x d."""

    directions: np.ndarray  # (H,W,3) float32, unit norm
    moments: np.ndarray  # (H,W,3) float32, d . m == 0
    origin: np.ndarray  # (3,) float64 camera center


def rotation_is_valid(R, tol=1e-6):
    R = np.asarray(R)
    return (np.abs(R @ R.T - np.eye(3)).max() < tol) and abs(np.linalg.det(R) - 1.0) < tol


def _normalize(v, name):
    n = np.linalg.norm(v)
    if n < 1e-8:
        raise ValueError(f"degenerate camera set: mean {name} direction is ~zero")
    return v / n


@dataclass
class PoseNormalization:
    """The average-camera transform and scale applied by normalize_poses."""

    rotation: np.ndarray  # (3,3) world-from-average-camera
    translation: np.ndarray  # (3,)
    scale: float

    def apply(self, pose):
        R = self.rotation.T @ pose.rotation
        t = self.scale * (self.rotation.T @ (pose.position - self.translation))
        return CameraPose(R, t)

    def invert(self, pose):
        R = self.rotation @ pose.rotation
        t = self.rotation @ (pose.position / self.scale) + self.translation
        return CameraPose(R, t)

    def invert_points(self, pts):
        return (np.asarray(pts) / self.scale) @ self.rotation.T + self.translation


def normalize_poses(poses):
    """Re-express poses in the average-camera frame, scaled into [-1, 1]^3.

    The average rotation comes from the mean right/down/forward directions,
    orthonormalized with cross products (forward kept, right from
    down x forward). Positions are recentered on the mean and uniformly
    rescaled so the bounding box fits [-1, 1]. Returns (new_poses, transform);
    transform.invert undoes the mapping exactly.
    """
    if not poses:
        raise ValueError("normalize_poses needs at least one pose")
    fwd = _normalize(np.mean([p.forward for p in poses], axis=0), "forward")
    down_mean = np.mean([p.down for p in poses], axis=0)
    right_mean = np.mean([p.right for p in poses], axis=0)
    right = np.cross(down_mean, fwd)
    if np.linalg.norm(right) < 1e-8:
        raise ValueError("degenerate camera set: mean down is parallel to mean forward")
    right = right / np.linalg.norm(right)
    if np.dot(right, right_mean) < 0:
        raise ValueError("degenerate camera set: inconsistent handedness of mean axes")
    down = np.cross(fwd, right)
    R_avg = np.stack([right, down, fwd], axis=1)
    t_avg = np.mean([p.position for p in poses], axis=0)

    centered = [R_avg.T @ (p.position - t_avg) for p in poses]
    extent = max(float(np.abs(c).max()) for c in centered)
    scale = 1.0 / extent if extent > 1e-12 else 1.0
    xform = PoseNormalization(R_avg, t_avg, scale)
    return [xform.apply(p) for p in poses], xform


def plucker_rays(pose, intr):
    """Per-pixel Plucker embedding for one camera."""
    u = (np.arange(intr.width, dtype=np.float64) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height, dtype=np.float64) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.position, d.shape), d)
    return RayMap(d.astype(np.float32), m.astype(np.float32), pose.position.copy())


@dataclass
class PatchLayout:
    """Token bookkeeping: n images on a gh x gw patch grid, patch size p."""

    n: int
    grid_h: int
    grid_w: int
    patch: int

    @property
    def tokens(self):
        return self.n * self.grid_h * self.grid_w

    def merged(self):
        if self.grid_h % 2 or self.grid_w % 2:
            raise ValueError(f"patch grid {self.grid_h}x{self.grid_w} cannot merge 2x2")
        return PatchLayout(self.n, self.grid_h // 2, self.grid_w // 2, self.patch * 2)


def pad_to_multiple(imgs, multiple):
    """Edge-replicate (N,H,W,C) up to the next spatial multiple."""
    n, h, w, c = imgs.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return imgs, (h, w)
    return np.pad(imgs, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge"), (h, w)


def patchify(feats, p):
    """(N,H,W,C) features -> (L, p*p*C) tokens.

    Token order is image-major, then patch raster order; pixels inside a
    patch stay row-major. H and W must be multiples of p (pad first).
    """
    n, h, w, c = feats.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    tok = feats.reshape(n, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tok).reshape(n * gh * gw, p * p * c), PatchLayout(n, gh, gw, p)


def ray_features(views, raymaps):
    """Stack RGB plus Plucker (d, m) into (N,H,W,9) float32."""
    feats = [np.concatenate([v.rgb, r.directions, r.moments], axis=-1)
             for v, r in zip(views, raymaps)]
    return np.stack(feats, axis=0).astype(np.float32)


def kmeans_select(poses, k, iters=20, tol=1e-6, seed=0):
    """Pick k representative view indices by k-means over (position, forward).

    Greedy farthest-point init from a seeded start, Lloyd iterations, then
    the nearest assigned view per cluster center. Deterministic for a given
    seed; returned indices are distinct and ascending.
    """
    n = len(poses)
    if not 0 < k <= n:
        raise ValueError(f"cannot select {k} views from {n}")
    feats = np.stack([np.concatenate([p.position, p.forward]) for p in poses]).astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = np.empty((k, 6))
    first = int(rng.integers(n))
    centers[0] = feats[first]
    d2 = ((feats - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        centers[i] = feats[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((feats - centers[i]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        moved = 0.0
        for j in range(k):
            members = feats[assign == j]
            if len(members) == 0:
                # steal the point farthest from its own center
                worst = int(np.argmax(dist[np.arange(n), assign]))
                centers[j] = feats[worst]
                assign[worst] = j
                moved = np.inf
                continue
            new = members.mean(axis=0)
            moved = max(moved, float(((new - centers[j]) ** 2).sum()))
            centers[j] = new
        if moved < tol:
            break

    picks = []
    dist = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dist, axis=1)
    for j in range(k):
        members = np.flatnonzero(assign == j)
        if len(members) == 0:
            members = np.flatnonzero(~np.isin(np.arange(n), picks))
        picks.append(int(members[np.argmin(dist[members, j])]))
    if len(set(picks)) != k:
        # extremely defensive: fall back to farthest-point picks
        raise RuntimeError("k-means produced duplicate representatives")
    return sorted(picks)


def sample_training_views(n_frames, n_inputs, n_targets, rng,
                          range_frames=(64, 128), whole_sequence=False,
                          order_augment=True):
    """Sample a consecutive window, evenly strided inputs, random targets.

    Returns (input_indices, target_indices); targets live inside the window
    and may overlap inputs. With probability 0.5 the input order is either
    reversed or shuffled (when order_augment).
    """
    if whole_sequence:
        lo = hi = n_frames
    else:
        lo = min(range_frames[0], n_frames)
        hi = min(range_frames[1], n_frames)
    length = int(rng.integers(lo, hi + 1))
    length = max(length, n_inputs)
    if length > n_frames:
        length = n_frames
    start = int(rng.integers(0, n_frames - length + 1))
    stride = max(1, length // n_inputs)
    inputs = start + stride * np.arange(n_inputs)
    inputs = inputs[inputs < start + length]
    if len(inputs) < n_inputs:  # degenerate tiny windows: pad with last frame
        inputs = np.concatenate([inputs, np.full(n_inputs - len(inputs), start + length - 1)])
    targets = start + rng.integers(0, length, size=n_targets)
    if order_augment and rng.random() < 0.5:
        if rng.random() < 0.5:
            inputs = inputs[::-1]
        else:
            inputs = rng.permutation(inputs)
    return inputs.astype(np.int64), targets.astype(np.int64)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample (H,W,...) at pixel centers with edge clamping."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    while wy.ndim < img.ndim:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def fov_augment(view, rng, lo=0.77, hi=1.0):
    """Center-crop by a random factor, resize back, rescale intrinsics.

    Equivalent to narrowing the field of view: effective focals divide by
    the crop factor. The principal point follows the crop window.
    """
    f = float(rng.uniform(lo, hi))
    h, w = view.rgb.shape[:2]
    ch = max(2, int(round(h * f)))
    cw = max(2, int(round(w * f)))
    y0 = (h - ch) // 2
    x0 = (w - cw) // 2
    crop = view.rgb[y0:y0 + ch, x0:x0 + cw]
    rgb = resize_bilinear(crop, h, w)
    sx, sy = w / cw, h / ch
    intr = view.intrinsics
    new_intr = PinholeIntrinsics(intr.fx * sx, intr.fy * sy,
                                 (intr.cx - x0) * sx, (intr.cy - y0) * sy, w, h)
    disp = view.gt_disparity
    if disp is not None:
        disp = resize_bilinear(disp[y0:y0 + ch, x0:x0 + cw], h, w)
    return replace(view, rgb=rgb, intrinsics=new_intr, gt_disparity=disp)
