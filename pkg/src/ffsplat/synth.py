"""Procedural ray-traced scenes with exact ground-truth disparity.

A scene is a closed box room (six textured walls) plus a few textured
spheres, rendered by analytic ray tracing. Disparity is 1/camera-z of the
first hit, so a fronto-parallel wall at depth z gives exactly 1/z
everywhere. Everything is a pure function of the spec's seed.
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, PinholeIntrinsics, PosedImage

_PATHS = ("orbit", "arc", "zigzag")


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_objects: int = 6
    extent: float = 2.0  # room half-width in world units
    texture_freq: float = 3.0
    path: str = "orbit"
    n_frames: int = 32
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.path not in _PATHS:
            raise ValueError(f"camera path must be one of {_PATHS}, got {self.path!r}")
        if self.n_frames < 1 or self.n_objects < 0:
            raise ValueError("need n_frames >= 1 and n_objects >= 0")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")


@dataclass
class Scene:
    extent: float
    centers: np.ndarray  # (S,3) sphere centers
    radii: np.ndarray  # (S,)
    tex_k: np.ndarray  # (S+6,3,3) per-object, per-channel direction
    tex_phase: np.ndarray  # (S+6,3)
    freq: float
    light: np.ndarray  # (3,) unit


def build_scene(spec):
    rng = np.random.default_rng(spec.seed)
    e = spec.extent
    s = spec.n_objects
    centers = rng.uniform(-0.45 * e, 0.45 * e, size=(s, 3))
    radii = rng.uniform(0.10 * e, 0.18 * e, size=s)
    tex_k = rng.normal(size=(s + 6, 3, 3))
    tex_k /= np.linalg.norm(tex_k, axis=2, keepdims=True)
    tex_phase = rng.uniform(0, 2 * np.pi, size=(s + 6, 3))
    light = rng.normal(size=3)
    light /= np.linalg.norm(light)
    return Scene(e, centers, radii, tex_k, tex_phase, spec.texture_freq, light)


def _look_at(eye, target):
    """World-from-camera rotation for +x right, +y down, +z forward."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down: pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def camera_path(spec):
    """Deterministic camera trajectory inside the room, aimed at its middle."""
    e = spec.extent
    r = 0.72 * e
    n = spec.n_frames
    poses = []
    for i in range(n):
        u = i / max(n - 1, 1)
        if spec.path == "orbit":
            ang = 2 * np.pi * i / n
            eye = np.array([r * np.sin(ang), -0.12 * e, -r * np.cos(ang)])
        elif spec.path == "arc":
            ang = (u - 0.5) * (2 * np.pi / 3)
            eye = np.array([r * np.sin(ang), -0.12 * e, -r * np.cos(ang)])
        else:  # zigzag: sweep sideways while closing in
            sweep = 0.55 * e * (2 * abs((3 * u) % 2 - 1) - 1)
            eye = np.array([sweep, -0.12 * e, -e * (0.72 - 0.35 * u)])
        target = np.array([0.0, 0.05 * e * np.sin(3 * u), 0.0])
        poses.append(CameraPose(rotation=_look_at(eye, target), position=eye))
    return poses


def _texture(scene, obj_ids, points):
    """Smooth per-object sinusoid albedo in (0.05, 0.95)."""
    k = scene.tex_k[obj_ids]  # (P,3,3)
    phase = scene.tex_phase[obj_ids]  # (P,3)
    proj = np.einsum("pcd,pd->pc", k, points)
    return 0.5 + 0.45 * np.sin(scene.freq * proj + phase)


def trace_view(scene, pose, intr):
    """Ray-trace one camera; returns (rgb float32 (H,W,3), disparity float32)."""
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy,
                      np.ones_like(us)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = pose.position
    p = d.shape[0]
    eps = 1e-9

    n_s = scene.centers.shape[0]
    t_all = np.full((p, n_s + 6), np.inf)
    # spheres: |o + t d - c|^2 = r^2 with unit d
    if n_s:
        oc = o - scene.centers  # (S,3)
        b = np.einsum("pd,sd->sp", d, oc)  # (S,P)
        c = (np.sum(oc * oc, axis=1) - scene.radii ** 2)[:, None]
        disc = b * b - c
        ok = disc > 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - root
        t_far = -b + root
        t_sphere = np.where(t_near > eps, t_near, t_far)
        t_sphere = np.where(ok & (t_sphere > eps), t_sphere, np.inf)
        t_all[:, :n_s] = t_sphere.T
    # walls of the closed box: x,y,z = +-extent
    for i, (axis, side) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
        da = d[:, axis]
        tw = np.where(np.abs(da) > eps, (side * scene.extent - o[axis]) / da, np.inf)
        t_all[:, n_s + i] = np.where(tw > eps, tw, np.inf)

    hit = np.argmin(t_all, axis=1)
    t = t_all[np.arange(p), hit]
    points = o + t[:, None] * d

    normals = np.empty((p, 3))
    sphere_mask = hit < n_s
    if sphere_mask.any():
        idx = hit[sphere_mask]
        normals[sphere_mask] = (points[sphere_mask] - scene.centers[idx]) / scene.radii[idx][:, None]
    wall_mask = ~sphere_mask
    if wall_mask.any():
        wi = hit[wall_mask] - n_s
        n_table = np.array([[-1.0, 0, 0], [1, 0, 0], [0, -1, 0],
                            [0, 1, 0], [0, 0, -1], [0, 0, 1]])
        normals[wall_mask] = n_table[wi]

    albedo = _texture(scene, hit, points)
    shade = 0.6 + 0.4 * np.maximum(np.einsum("pd,d->p", normals, scene.light), 0.0)
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)

    z_cam = np.einsum("pd,d->p", d, pose.rotation[:, 2]) * t
    disparity = 1.0 / z_cam
    return (rgb.reshape(h, w, 3).astype(np.float32),
            disparity.reshape(h, w).astype(np.float32))


def generate_synthetic_scene(spec):
    """Spec -> list of PosedImage with exact gt_disparity, deterministic."""
    scene = build_scene(spec)
    intr = PinholeIntrinsics(
        fx=0.8 * spec.width, fy=0.8 * spec.width,
        cx=spec.width / 2, cy=spec.height / 2,
        width=spec.width, height=spec.height,
    )
    views = []
    for pose in camera_path(spec):
        rgb, disp = trace_view(scene, pose, intr)
        views.append(PosedImage(rgb=rgb, pose=pose, intrinsics=intr,
                                gt_disparity=disp))
    return views
