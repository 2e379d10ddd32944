"""Scene manifests, float32 rasters and PNG previews.

Raster files (disparity maps and metric-grade renders) are a 16-byte header
(magic "FR32", then uint32 width, height, channels, little-endian) followed
by float32 little-endian samples, row-major, channel-minor.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from .geometry import CameraPose, PinholeIntrinsics, PosedImage

_RASTER_MAGIC = b"FR32"


def save_raster(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    header = _RASTER_MAGIC + np.array([w, h, c], dtype="<u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.astype("<f4").tobytes())


def load_raster(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file")
    w, h, c = np.frombuffer(blob, dtype="<u4", count=3, offset=4)
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != w * h * c:
        raise ValueError(f"{path}: payload is {data.size} floats, header says {w}x{h}x{c}")
    out = data.reshape(int(h), int(w), int(c)).astype(np.float32)
    return out[..., 0] if c == 1 else out


def save_png(path, rgb):
    """Clip [0,1] float RGB to an 8-bit preview."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class FrameRecord:
    image: str
    rotation: np.ndarray  # (3,3)
    position: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    disparity: Optional[str] = None


@dataclass
class SceneManifest:
    frames: List[FrameRecord]
    order: List[int]


def save_manifest(path, manifest):
    doc = {
        "frames": [
            {
                "image": f.image,
                "rotation": [float(x) for x in np.asarray(f.rotation).reshape(9)],
                "position": [float(x) for x in np.asarray(f.position).reshape(3)],
                "fx": f.fx, "fy": f.fy, "cx": f.cx, "cy": f.cy,
                "width": f.width, "height": f.height,
                **({"disparity": f.disparity} if f.disparity else {}),
            }
            for f in manifest.frames
        ],
        "order": list(map(int, manifest.order)),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not a scene manifest ({e})") from e
    frames = []
    for f in doc["frames"]:
        frames.append(FrameRecord(
            image=f["image"],
            rotation=np.array(f["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.array(f["position"], dtype=np.float64),
            fx=float(f["fx"]), fy=float(f["fy"]), cx=float(f["cx"]), cy=float(f["cy"]),
            width=int(f["width"]), height=int(f["height"]),
            disparity=f.get("disparity"),
        ))
    order = [int(i) for i in doc.get("order", range(len(frames)))]
    return SceneManifest(frames, order)


def save_scene(directory, views, name="scene.json"):
    """Write PosedImages as PNGs + disparity rasters + manifest; returns
    the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, v in enumerate(views):
        img_name = f"frame_{i:04d}.png"
        save_png(directory / img_name, v.rgb)
        disp_name = None
        if v.gt_disparity is not None:
            disp_name = f"frame_{i:04d}.disp"
            save_raster(directory / disp_name, v.gt_disparity)
        it = v.intrinsics
        frames.append(FrameRecord(
            image=img_name, rotation=v.pose.rotation, position=v.pose.position,
            fx=it.fx, fy=it.fy, cx=it.cx, cy=it.cy,
            width=it.width, height=it.height, disparity=disp_name,
        ))
    path = directory / name
    save_manifest(path, SceneManifest(frames, list(range(len(frames)))))
    return path


def load_scene(manifest_path):
    """Manifest -> PosedImages in capture order."""
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    root = manifest_path.parent
    views = []
    for idx in m.order:
        f = m.frames[idx]
        rgb = load_png(root / f.image)
        if rgb.shape[:2] != (f.height, f.width):
            raise ValueError(f"{f.image}: is {rgb.shape[1]}x{rgb.shape[0]}, manifest says {f.width}x{f.height}")
        disp = load_raster(root / f.disparity) if f.disparity else None
        views.append(PosedImage(
            rgb=rgb,
            pose=CameraPose(f.rotation, f.position),
            intrinsics=PinholeIntrinsics(f.fx, f.fy, f.cx, f.cy, f.width, f.height),
            gt_disparity=disp,
        ))
    return views


def save_frame_transform(path, norm, extra=None):
    """Persist a PoseNormalization (splat-frame <- world) as JSON.

    `extra` entries (input frames, refinement steps, ...) are stored
    alongside; load_frame_transform returns them untouched.
    """
    doc = {
        "rotation": np.asarray(norm.rotation, dtype=np.float64).tolist(),
        "translation": np.asarray(norm.translation, dtype=np.float64).tolist(),
        "scale": float(norm.scale),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return Path(path)


def load_frame_transform(path):
    """JSON sidecar -> (PoseNormalization, extra dict)."""
    from .geometry import PoseNormalization

    with open(path, "r") as f:
        doc = json.load(f)
    try:
        rotation = np.asarray(doc["rotation"], dtype=np.float64).reshape(3, 3)
        translation = np.asarray(doc["translation"], dtype=np.float64).reshape(3)
        scale = float(doc["scale"])
    except (KeyError, ValueError) as err:
        raise ValueError(f"{path}: not a frame-transform sidecar ({err})")
    extra = {k: v for k, v in doc.items()
             if k not in ("rotation", "translation", "scale")}
    return PoseNormalization(rotation, translation, scale), extra
