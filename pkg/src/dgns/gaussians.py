"""Canonical-space Gaussian primitive set and its camera projection.

Positions, rotations (unit quaternions), log-scales, opacity logits and SH
coefficients are stored struct-of-arrays as Params so the whole set rides
the tape. Projection follows the EWA convention: camera-space covariance
conjugated by the perspective Jacobian at the center, plus a small
isotropic pixel floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import DiffArray, Param

SH_C0 = 0.28209479177387814  # Y_00
SH_C1 = 0.4886025119029199   # |Y_1m| basis constant
COV2D_FLOOR = 0.3            # px^2 isotropic low-pass floor


@dataclass
class Camera:
    """Pinhole camera; world-to-camera maps x_cam = R @ x_world + t, with
    the camera looking along +z (depth = z_cam)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray    # [3,3] world-to-camera
    translation: np.ndarray  # [3]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-8):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation must have det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def downscaled(self, factor: int) -> "Camera":
        if factor == 1:
            return self
        return Camera(self.fx / factor, self.fy / factor,
                      self.cx / factor, self.cy / factor,
                      self.width // factor, self.height // factor,
                      self.rotation, self.translation)


def quat_to_rotmat(q) -> DiffArray:
    """Unit quaternion [..., 4] (w, x, y, z) -> rotation matrix [..., 3, 3].
    Normalizes internally, so near-unit inputs are safe."""
    q = ad.asdiff(q)
    norm = ad.sqrt(ad.summation(q * q, axis=-1, keepdims=True))
    q = q / norm
    w, x, y, z = (q[..., 0], q[..., 1], q[..., 2], q[..., 3])
    rows = [
        ad.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        ad.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        ad.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def build_covariance(quats, log_scales) -> DiffArray:
    """Sigma = R diag(s)^2 R^T for a batch: [..., 4], [..., 3] -> [..., 3, 3]."""
    rot = quat_to_rotmat(quats)
    s = ad.exp(ad.asdiff(log_scales))
    m = rot * ad.reshape(s, s.shape[:-1] + (1, 3))  # columns scaled
    return ad.matmul(m, ad.transpose(m, axes=_swap_last_two(ad.value(m).ndim)))


def _swap_last_two(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def gaussian_normal(quats, log_scales, flip_to_dirs: np.ndarray | None = None) -> DiffArray:
    """Per-Gaussian normal: rotation-matrix row of the minimum-scale axis.

    flip_to_dirs: optional [N, 3] viewing directions (camera -> gaussian);
    normals with positive dot against them are sign-flipped so they face
    the viewer.
    """
    rot = quat_to_rotmat(quats)  # [N, 3, 3]
    sv = ad.value(log_scales)
    k = np.argmin(sv, axis=-1)  # lowest index wins ties
    n = rot[np.arange(sv.shape[0]), k, :]  # [N, 3]
    if flip_to_dirs is not None:
        sign = np.where(np.sum(ad.value(n) * flip_to_dirs, axis=-1) > 0.0,
                        -1.0, 1.0)
        n = n * sign[:, None]
    return n


def eval_sh(sh, view_dirs, degree: int) -> DiffArray:
    """SH color: [N, C, 3] coeffs, [N, 3] unit view dirs -> [N, 3] in [0,1].
    Standard real basis up to degree 1 with the 0.5 offset convention."""
    if degree not in (0, 1):
        raise ValueError("SH degree must be 0 or 1")
    sh = ad.asdiff(sh)
    c = sh[:, 0, :] * SH_C0
    if degree >= 1:
        d = ad.asdiff(view_dirs)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        c = c - sh[:, 1, :] * (SH_C1 * y) + sh[:, 2, :] * (SH_C1 * z) \
            - sh[:, 3, :] * (SH_C1 * x)
    return ad.clamp(c + 0.5, 0.0, 1.0)


def project_gaussians(positions, cov3d, cam: Camera, near: float = 0.01):
    """Project a batch of Gaussians to the image plane.

    positions [N,3], cov3d [N,3,3] (both on tape) -> dict with
      mean2d   [N,2]  pixel coordinates
      cov2d    [N,3]  packed symmetric (a, b, c) with the pixel floor added
      depth    [N]    camera-space z (plain array; not differentiated)
      valid    [N]    bool, False for Gaussians behind the near plane
    Behind-camera entries hold clamped placeholder values and must be
    skipped via `valid`.
    """
    positions = ad.asdiff(positions)
    w = cam.rotation  # [3,3] constant
    t_cam = ad.matmul(positions, DiffArray(w.T)) + cam.translation  # [N,3]
    tz_raw = t_cam[:, 2]
    valid = ad.value(tz_raw) > near
    tz = ad.maximum(tz_raw, near)  # clamp keeps culled entries finite
    tx, ty = t_cam[:, 0], t_cam[:, 1]

    inv_z = 1.0 / tz
    mean2d = ad.stack([tx * inv_z * cam.fx + cam.cx,
                       ty * inv_z * cam.fy + cam.cy], axis=-1)

    # perspective Jacobian rows at the center
    zero = DiffArray(np.zeros(ad.value(tz).shape))
    j0 = ad.stack([inv_z * cam.fx, zero, -tx * inv_z * inv_z * cam.fx], axis=-1)
    j1 = ad.stack([zero, inv_z * cam.fy, -ty * inv_z * inv_z * cam.fy], axis=-1)
    jac = ad.stack([j0, j1], axis=-2)  # [N, 2, 3]

    vcs = ad.matmul(ad.matmul(DiffArray(w), cov3d), DiffArray(w.T))  # [N,3,3]
    cov2d_full = ad.matmul(ad.matmul(jac, vcs),
                           ad.transpose(jac, axes=(0, 2, 1)))  # [N,2,2]
    a = cov2d_full[:, 0, 0] + COV2D_FLOOR
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + COV2D_FLOOR
    return {
        "mean2d": mean2d,
        "cov2d": ad.stack([a, b, c], axis=-1),
        "depth": ad.value(tz_raw).copy(),
        "valid": valid,
    }


class GaussianScene:
    """Struct-of-arrays Gaussian set with density-control statistics."""

    def __init__(self, positions, log_scales, quats, opacity_logits, sh,
                 sh_degree: int = 1):
        n = np.asarray(positions).shape[0]
        ncoef = (sh_degree + 1) ** 2
        sh = np.asarray(sh, dtype=np.float64)
        if sh.shape != (n, ncoef, 3):
            raise ValueError(f"sh must have shape {(n, ncoef, 3)}, got {sh.shape}")
        self.sh_degree = sh_degree
        self.positions = Param(positions, "gauss.positions")
        self.log_scales = Param(log_scales, "gauss.log_scales")
        self.quats = Param(quats, "gauss.quats")
        self.opacity_logits = Param(opacity_logits, "gauss.opacity_logits")
        self.sh = Param(sh, "gauss.sh")
        self.reset_accumulators()

    @classmethod
    def random_init(cls, n: int, box_min, box_max, rng: np.random.Generator,
                    opacity: float = 0.1, sh_degree: int = 1,
                    scale_frac: float = 0.02) -> "GaussianScene":
        """Uniform positions in the box, isotropic scales at a fraction of
        the box diagonal, mid-gray colors."""
        box_min = np.asarray(box_min, dtype=np.float64)
        box_max = np.asarray(box_max, dtype=np.float64)
        pos = rng.uniform(box_min, box_max, size=(n, 3))
        diag = float(np.linalg.norm(box_max - box_min))
        log_s = np.full((n, 3), np.log(scale_frac * diag))
        log_s += rng.uniform(-0.2, 0.2, size=(n, 3))
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        logits = np.full(n, _logit(opacity))
        sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
        sh[:, 0, :] = rng.uniform(-0.5, 0.5, size=(n, 3)) / SH_C0 * 0.1
        return cls(pos, log_s, quats, logits, sh, sh_degree)

    def __len__(self):
        return self.positions.value.shape[0]

    @property
    def params(self) -> list[Param]:
        return [self.positions, self.log_scales, self.quats,
                self.opacity_logits, self.sh]

    def reset_accumulators(self):
        n = len(self)
        self.grad2d_accum = np.zeros(n)    # sum of ||dL/d mean2d||
        self.grad3d_accum = np.zeros((n, 3))  # sum of dL/d position
        self.grad_count = np.zeros(n)
        self.opacity_accum = np.zeros(n)   # sigma_p: opacity summed per iter

    def accumulate_stats(self, grad_mean2d: np.ndarray, grad_pos: np.ndarray):
        mag = np.linalg.norm(grad_mean2d, axis=-1)
        seen = mag > 0
        self.grad2d_accum += mag
        self.grad3d_accum += grad_pos
        self.grad_count += seen
        self.opacity_accum += _sigmoid(self.opacity_logits.value)

    def mean_grad2d(self) -> np.ndarray:
        return self.grad2d_accum / np.maximum(self.grad_count, 1.0)

    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits.value)

    def renormalize_quats(self):
        q = self.quats.value
        q /= np.linalg.norm(q, axis=-1, keepdims=True)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def export_centers_ply(self, path: str):
        """ASCII PLY point cloud of the canonical centers."""
        pos = self.positions.value
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(pos)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("end_header\n")
            for p in pos:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def look_at_camera(eye, target, up, fx, fy, width, height,
                   cx: float | None = None, cy: float | None = None) -> Camera:
    """Camera at `eye` looking at `target` (OpenCV axes: +z forward,
    +y down in camera space)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    upn = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upn)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    return Camera(fx, fy, width / 2 if cx is None else cx,
                  height / 2 if cy is None else cy, width, height,
                  rot, -rot @ eye)
