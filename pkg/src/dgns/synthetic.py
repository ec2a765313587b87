"""Synthetic monocular datasets with analytic ground truth.

Each scene is a time-varying analytic SDF rendered by sphere tracing with
Lambertian shading: RGB images, camera-space normal maps (alpha channel =
hit mask), per-frame ground-truth meshes from the same field, and a
transforms.json in the one-camera-pose-per-timestep convention.
"""

from __future__ import annotations

import json
import os

import numpy as np

from dgns.gaussians import Camera
from dgns.imgio import normal_to_rgb, save_png
from dgns.meshing import extract_mesh, save_obj

SCENE_NAMES = ("translating-sphere", "bouncing-ellipsoid",
               "torus-to-sphere-morph", "two-sphere-orbit")

AABB = (np.array([-1.1, -1.1, -1.1]), np.array([1.1, 1.1, 1.1]))
LIGHT_DIR = np.array([0.45, 0.8, -0.4]) / np.linalg.norm([0.45, 0.8, -0.4])
AMBIENT = 0.35


def _sphere(p, c, r):
    return np.linalg.norm(p - c, axis=-1) - r


def _ellipsoid(p, c, radii):
    q = (p - c) / radii
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(q / radii, axis=-1)
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _torus(p, c, big_r, small_r):
    q = p - c
    ring = np.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2) - big_r
    return np.sqrt(ring * ring + q[:, 2] ** 2) - small_r


class SyntheticScene:
    """Analytic scene: sdf(points [M,3], t) and an object-anchored albedo."""

    def __init__(self, name: str, motion_scale: float = 1.0):
        if name not in SCENE_NAMES:
            raise ValueError(
                f"unknown scene {name!r}; valid scenes: {', '.join(SCENE_NAMES)}")
        self.name = name
        self.motion_scale = motion_scale

    def center(self, t: float) -> np.ndarray:
        m = self.motion_scale
        if self.name == "translating-sphere":
            return np.array([0.35 * m * (2.0 * t - 1.0), 0.0, 0.0])
        if self.name == "bouncing-ellipsoid":
            return np.array([0.0, 0.45 * m * abs(np.sin(np.pi * t)), 0.0])
        return np.zeros(3)

    def sdf(self, p: np.ndarray, t: float) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        m = self.motion_scale
        if self.name == "translating-sphere":
            return _sphere(p, self.center(t), 0.5)
        if self.name == "bouncing-ellipsoid":
            return _ellipsoid(p, self.center(t), np.array([0.42, 0.3, 0.42]))
        if self.name == "torus-to-sphere-morph":
            tau = np.clip(m * t, 0.0, 1.0)
            return ((1.0 - tau) * _torus(p, np.zeros(3), 0.4, 0.16)
                    + tau * _sphere(p, np.zeros(3), 0.4))
        # two-sphere-orbit
        ang = 2.0 * np.pi * m * t
        offset = 0.4 * np.array([np.cos(ang), 0.0, np.sin(ang)])
        return np.minimum(_sphere(p, offset, 0.28), _sphere(p, -offset, 0.28))

    def albedo(self, p: np.ndarray, t: float) -> np.ndarray:
        """Object-anchored color pattern so texture moves with the body."""
        q = p - self.center(t)
        base = {"translating-sphere": (0.9, 0.45, 0.3),
                "bouncing-ellipsoid": (0.35, 0.7, 0.9),
                "torus-to-sphere-morph": (0.55, 0.85, 0.4),
                "two-sphere-orbit": (0.85, 0.8, 0.35)}[self.name]
        mod = 0.5 + 0.5 * np.sin(7.0 * q[:, 0]) * np.sin(7.0 * q[:, 1]) \
            * np.sin(7.0 * q[:, 2])
        return np.asarray(base)[None, :] * (0.55 + 0.45 * mod)[:, None]

    def normals(self, p: np.ndarray, t: float, h: float = 1e-4) -> np.ndarray:
        g = np.zeros_like(p)
        for j in range(3):
            d = np.zeros(3)
            d[j] = h
            g[:, j] = (self.sdf(p + d, t) - self.sdf(p - d, t)) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def circle_camera_pose(frame: int, n_frames: int, radius: float = 3.0,
                       elevation_deg: float = 20.0) -> np.ndarray:
    """Camera-to-world matrix (OpenGL convention, -z forward) on a circle
    looking at the origin."""
    az = 2.0 * np.pi * frame / max(n_frames, 1)
    el = np.deg2rad(elevation_deg)
    eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(el),
                             np.sin(az) * np.cos(el)])
    fwd = -eye / np.linalg.norm(eye)  # toward origin
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = up
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


def camera_from_c2w(c2w: np.ndarray, fx: float, width: int, height: int) -> Camera:
    """OpenGL-style c2w -> pinhole camera with +z forward (flip y, z)."""
    rot_gl = np.asarray(c2w)[:3, :3]
    eye = np.asarray(c2w)[:3, 3]
    rot_cv = rot_gl @ np.diag([1.0, -1.0, -1.0])
    w2c = rot_cv.T
    return Camera(fx, fx, width / 2.0, height / 2.0, width, height,
                  w2c, -w2c @ eye)


def render_analytic(scene: SyntheticScene, cam: Camera, t: float,
                    max_steps: int = 192, hit_eps: float = 2e-4,
                    step_scale: float = 0.8):
    """Sphere-traced RGB, camera-space normal map and hit mask."""
    h, w = cam.height, cam.width
    ii, jj = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(ii.ravel() + 0.5 - cam.cx) / cam.fx,
                         (jj.ravel() + 0.5 - cam.cy) / cam.fy,
                         np.ones(h * w)], axis=-1)
    dirs = dirs_cam @ cam.rotation  # rows: R^T @ dir
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = cam.center

    dist = np.full(h * w, 1.0)
    alive = np.ones(h * w, dtype=bool)
    hit = np.zeros(h * w, dtype=bool)
    far = 8.0
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origin[None, :] + dist[alive, None] * dirs[alive]
        s = scene.sdf(p, t)
        now_hit = np.abs(s) < hit_eps
        idx = np.nonzero(alive)[0]
        hit[idx[now_hit]] = True
        dist[alive] += step_scale * s
        escaped = dist > far
        alive = alive & ~hit & ~escaped

    rgb = np.zeros((h * w, 3))
    normals_cam = np.zeros((h * w, 3))
    if hit.any():
        p_hit = origin[None, :] + dist[hit, None] * dirs[hit]
        n_world = scene.normals(p_hit, t)
        lam = np.maximum(np.sum(n_world * LIGHT_DIR[None, :], axis=-1), 0.0)
        rgb[hit] = scene.albedo(p_hit, t) * (AMBIENT + (1 - AMBIENT) * lam)[:, None]
        normals_cam[hit] = n_world @ cam.rotation.T
    return (np.clip(rgb.reshape(h, w, 3), 0, 1),
            normals_cam.reshape(h, w, 3), hit.reshape(h, w))


def generate_synthetic(scene_name: str, n_frames: int, width: int, height: int,
                       out_dir: str, seed: int = 0, motion_scale: float = 1.0,
                       fov_x_deg: float = 45.0, camera_radius: float = 3.0,
                       gt_mesh_resolution: int = 256) -> str:
    """Write a full dataset (images, normal maps, GT meshes, transforms);
    returns out_dir. One camera pose per timestep (monocular protocol)."""
    scene = SyntheticScene(scene_name, motion_scale)
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    nrm_dir = os.path.join(out_dir, "normals")
    mesh_dir = os.path.join(out_dir, "gt_meshes")
    for d in (img_dir, nrm_dir, mesh_dir):
        os.makedirs(d, exist_ok=True)

    fov = np.deg2rad(fov_x_deg)
    fx = 0.5 * width / np.tan(0.5 * fov)
    frames = []
    for k in range(n_frames):
        t = k / (n_frames - 1) if n_frames > 1 else 0.0
        c2w = circle_camera_pose(k, n_frames, radius=camera_radius)
        cam = camera_from_c2w(c2w, fx, width, height)
        rgb, normals, hit = render_analytic(scene, cam, t)
        name = f"frame_{k:03d}"
        save_png(os.path.join(img_dir, name + ".png"), rgb)
        nrm_rgba = np.concatenate([normal_to_rgb(normals),
                                   hit[:, :, None].astype(np.float64)], axis=2)
        save_png(os.path.join(nrm_dir, name + ".png"), nrm_rgba)
        mesh = extract_mesh(lambda p: scene.sdf(p, t), *AABB,
                            resolution=gt_mesh_resolution,
                            compute_normals=False)
        save_obj(mesh, os.path.join(mesh_dir, name + ".obj"))
        frames.append({"file_path": f"./images/{name}",
                       "time": t,
                       "transform_matrix": c2w.tolist()})

    manifest = {
        "camera_angle_x": fov,
        "scene": scene_name,
        "motion_scale": motion_scale,
        "aabb": [AABB[0].tolist(), AABB[1].tolist()],
        "frames": frames,
    }
    with open(os.path.join(out_dir, "transforms.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out_dir
