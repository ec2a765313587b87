"""Image and depth-map i/o.

RGB and normal visualizations as 8-bit PNG, depth maps as raw float32
with a JSON sidecar, and back-projected depth point clouds as ASCII PLY
for eyeballing the depth products in 3D.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from dgns.gaussians import Camera


def save_png(path: str, img: np.ndarray):
    """[H,W,3] or [H,W,4] floats in [0,1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path: str) -> np.ndarray:
    """8-bit PNG -> float image in [0,1] (alpha kept when present)."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def normal_to_rgb(normals: np.ndarray) -> np.ndarray:
    """Unit-vector map [-1,1]^3 -> color [0,1]^3."""
    return 0.5 * (np.asarray(normals) + 1.0)


def rgb_to_normal(img: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(img) - 1.0


def save_depth(path: str, depth: np.ndarray, units: str = "scene"):
    """Raw little-endian float32 plus a JSON sidecar with the geometry."""
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(depth.tobytes())
    sidecar = {"width": int(depth.shape[1]), "height": int(depth.shape[0]),
               "dtype": "f32", "units": units}
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh)


def load_depth(path: str) -> np.ndarray:
    with open(path + ".json") as fh:
        meta = json.load(fh)
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(meta["height"], meta["width"]).astype(np.float64)


def backproject_depth(depth: np.ndarray, cam: Camera,
                      valid: np.ndarray | None = None) -> np.ndarray:
    """Depth image -> world-space points at pixel centers (valid mask or
    depth > 0 selects the pixels)."""
    h, w = depth.shape
    if valid is None:
        valid = depth > 0
    jj, ii = np.nonzero(valid)
    z = depth[jj, ii]
    x = (ii + 0.5 - cam.cx) / cam.fx * z
    y = (jj + 0.5 - cam.cy) / cam.fy * z
    pts_cam = np.stack([x, y, z], axis=-1)
    return (pts_cam - cam.translation) @ cam.rotation


def save_point_cloud_ply(path: str, points: np.ndarray,
                         colors: np.ndarray | None = None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    has_color = colors is not None
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if has_color:
            fh.write("property uchar red\nproperty uchar green\n"
                     "property uchar blue\n")
        fh.write("end_header\n")
        if has_color:
            cols = (np.clip(colors, 0, 1) * 255 + 0.5).astype(int).reshape(-1, 3)
            for p, c in zip(points, cols):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                         f"{c[0]} {c[1]} {c[2]}\n")
        else:
            for p in points:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def export_depth_diagnostics(out_dir: str, tag: str, depth_bundle, cam: Camera):
    """Fig-style diagnostics: the three depth maps as f32 files and their
    back-projected point clouds as PLY."""
    os.makedirs(out_dir, exist_ok=True)
    for name, img, valid in [
        ("alpha_depth", depth_bundle.d_alpha, depth_bundle.d_alpha > 0),
        ("median_depth", depth_bundle.d_median, depth_bundle.d_median > 0),
        ("filtered_depth", depth_bundle.d_filtered, depth_bundle.valid),
    ]:
        base = os.path.join(out_dir, f"{tag}_{name}")
        save_depth(base + ".f32", img)
        pts = backproject_depth(img, cam, valid)
        save_point_cloud_ply(base + ".ply", pts)
