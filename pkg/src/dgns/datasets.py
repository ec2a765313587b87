"""Dataset loading and validation.

Layout: transforms.json with camera_angle_x and frames[{file_path, time,
transform_matrix}], PNG images, optional camera-space normal maps (RGBA,
alpha = validity) under normals/, optional per-frame ground-truth meshes
under gt_meshes/. Timestamps must be strictly increasing in [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from dgns.gaussians import Camera
from dgns.imgio import load_png, rgb_to_normal
from dgns.synthetic import camera_from_c2w

DEFAULT_AABB = (np.array([-1.1, -1.1, -1.1]), np.array([1.1, 1.1, 1.1]))


class DatasetError(ValueError):
    """Malformed dataset: message names the offending file/field."""


@dataclass
class FrameRecord:
    index: int
    time: float
    camera: Camera
    image: np.ndarray                      # [H,W,3] in [0,1]
    normal: np.ndarray | None = None       # [H,W,3] camera-space unit vectors
    normal_valid: np.ndarray | None = None  # [H,W] bool
    gt_mesh_path: str | None = None


@dataclass
class Dataset:
    path: str
    frames: list = field(default_factory=list)
    box_min: np.ndarray = None
    box_max: np.ndarray = None
    width: int = 0
    height: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))


def load_dataset(path: str, normals_dir: str | None = None) -> Dataset:
    """Parse and validate a dataset directory.

    normals_dir overrides the on-disk normals/ folder (e.g. externally
    estimated normal maps for real captures).
    """
    manifest_path = os.path.join(path, "transforms.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"{manifest_path}: manifest not found")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e

    if "camera_angle_x" not in manifest:
        raise DatasetError(f"{manifest_path}: missing field 'camera_angle_x'")
    if "frames" not in manifest or not manifest["frames"]:
        raise DatasetError(f"{manifest_path}: missing or empty 'frames'")

    aabb = manifest.get("aabb")
    box_min, box_max = (np.asarray(aabb[0], dtype=np.float64),
                        np.asarray(aabb[1], dtype=np.float64)) if aabb \
        else DEFAULT_AABB

    ds = Dataset(path=path, box_min=box_min, box_max=box_max,
                 meta={k: v for k, v in manifest.items() if k != "frames"})
    ndir = normals_dir if normals_dir is not None \
        else os.path.join(path, "normals")

    prev_t = -np.inf
    for k, fr in enumerate(manifest["frames"]):
        for key in ("file_path", "time", "transform_matrix"):
            if key not in fr:
                raise DatasetError(
                    f"{manifest_path}: frame {k} missing field '{key}'")
        t = float(fr["time"])
        if not 0.0 <= t <= 1.0:
            raise DatasetError(
                f"{manifest_path}: frame {k} time {t} outside [0, 1]")
        if t <= prev_t:
            raise DatasetError(
                f"{manifest_path}: frame {k} timestamp {t} not strictly "
                f"increasing (previous {prev_t})")
        prev_t = t

        rel = fr["file_path"]
        img_path = os.path.join(path, rel.lstrip("./") + ".png") \
            if not rel.endswith(".png") else os.path.join(path, rel.lstrip("./"))
        if not os.path.exists(img_path):
            raise DatasetError(f"frame {k}: image file {img_path} not found")
        img = load_png(img_path)[:, :, :3]
        h, w = img.shape[:2]
        if ds.width == 0:
            ds.width, ds.height = w, h
        elif (w, h) != (ds.width, ds.height):
            raise DatasetError(
                f"frame {k}: resolution {w}x{h} differs from first frame "
                f"{ds.width}x{ds.height}")

        c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise DatasetError(
                f"{manifest_path}: frame {k} transform_matrix must be 4x4")
        fx = 0.5 * w / np.tan(0.5 * float(manifest["camera_angle_x"]))
        cam = camera_from_c2w(c2w, fx, w, h)

        base = os.path.splitext(os.path.basename(img_path))[0]
        normal = normal_valid = None
        npath = os.path.join(ndir, base + ".png")
        if os.path.exists(npath):
            raw = load_png(npath)
            if raw.ndim != 3 or raw.shape[2] < 3:
                raise DatasetError(f"frame {k}: normal map {npath} must be "
                                   "RGB(A)")
            normal = rgb_to_normal(raw[:, :, :3])
            normal_valid = raw[:, :, 3] > 0.5 if raw.shape[2] == 4 \
                else np.ones((h, w), dtype=bool)

        mesh_path = os.path.join(path, "gt_meshes", base + ".obj")
        ds.frames.append(FrameRecord(
            index=k, time=t, camera=cam, image=img, normal=normal,
            normal_valid=normal_valid,
            gt_mesh_path=mesh_path if os.path.exists(mesh_path) else None))
    return ds
