"""Evaluation metrics and the metric report.

PSNR and SSIM for images, Chamfer distance and entropic-regularized Earth
Mover distance for point sets. Conventions are recorded in the report
metadata so numbers are self-describing: CD is the sum of both directed
mean nearest-neighbor Euclidean distances; EMD is log-domain Sinkhorn on
equal-size subsamples.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from dgns import autodiff as ad
from dgns.losses import ssim as _ssim_tape

PSNR_CAP = 99.0
EMD_MAX_POINTS = 1024
EMD_EPS_FRAC = 1e-3  # of the joint cloud diagonal

CD_CONVENTION = ("mean nearest-neighbor Euclidean distance, A->B plus B->A")
EMD_CONVENTION = (f"entropic OT (log-domain Sinkhorn), equal-size subsamples "
                  f"<= {EMD_MAX_POINTS}, eps = {EMD_EPS_FRAC} x cloud diagonal")


def psnr(pred, target) -> float:
    """10 log10(1/MSE) for [0,1] images, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim_value(pred, target) -> float:
    """Scalar SSIM (same windowed formulation as the training loss)."""
    return float(ad.value(_ssim_tape(np.asarray(pred, dtype=np.float64),
                                     np.asarray(target, dtype=np.float64))).item())


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(d_ab.mean() + d_ba.mean())


def _log_sinkhorn(cost: np.ndarray, eps: float, iters: int, tol: float):
    n, m = cost.shape
    log_a = -np.log(n)
    log_b = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    for _ in range(iters):
        # f-update: softmin over columns, then symmetric g-update
        z = (g[None, :] - cost) / eps
        f = eps * (log_a - _lse(z, axis=1))
        z = (f[:, None] - cost) / eps
        g = eps * (log_b - _lse(z, axis=0))
        # marginal violation of the row sums
        p_row = np.exp((f[:, None] + g[None, :] - cost) / eps)
        err = np.abs(p_row.sum(axis=1) - 1.0 / n).max()
        if err < tol:
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return plan


def _lse(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    out = zmax.squeeze(axis) + np.log(np.exp(z - zmax).sum(axis=axis))
    return out


def earth_mover_distance(a, b, eps: float | None = None, iters: int = 500,
                         tol: float = 1e-8, max_points: int = EMD_MAX_POINTS,
                         seed: int = 0) -> tuple[float, dict]:
    """Entropic-regularized transport cost between equal-mass point sets.

    Subsamples both clouds to the same size (<= max_points, deterministic
    for a fixed seed). Returns (value, metadata with the regularization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("earth mover distance needs non-empty point sets")
    rng = np.random.default_rng(seed)
    n = min(len(a), len(b), max_points)
    ia = rng.choice(len(a), size=n, replace=False) if len(a) > n else np.arange(len(a))
    ib = rng.choice(len(b), size=n, replace=False) if len(b) > n else np.arange(len(b))
    pa, pb = a[ia], b[ib]

    joint = np.concatenate([pa, pb])
    diag = float(np.linalg.norm(joint.max(axis=0) - joint.min(axis=0)))
    if eps is None:
        eps = max(EMD_EPS_FRAC * diag, 1e-12)
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    plan = _log_sinkhorn(cost, eps, iters, tol)
    value = float((plan * cost).sum())
    return value, {"eps": eps, "n_points": n, "diag": diag}


@dataclass
class MetricReport:
    per_frame: list = field(default_factory=list)     # {frame, time, psnr, ssim}
    per_timestep: list = field(default_factory=list)  # {time, cd, emd, ...}
    metadata: dict = field(default_factory=lambda: {
        "cd_convention": CD_CONVENTION, "emd_convention": EMD_CONVENTION})

    def add_frame(self, frame: int, time: float, psnr_db: float, ssim_v: float):
        if not (psnr_db >= 0.0):
            raise ValueError("PSNR must be non-negative")
        if not (-1.0 <= ssim_v <= 1.0):
            raise ValueError("SSIM out of [-1, 1]")
        self.per_frame.append({"frame": frame, "time": time,
                               "psnr": psnr_db, "ssim": ssim_v})

    def add_timestep(self, time: float, cd: float | None, emd: float | None,
                     **extra):
        rec = {"time": time, "cd": cd, "emd": emd}
        rec.update(extra)
        self.per_timestep.append(rec)

    def aggregates(self) -> dict:
        out = {}
        if self.per_frame:
            out["mean_psnr"] = float(np.mean([r["psnr"] for r in self.per_frame]))
            out["mean_ssim"] = float(np.mean([r["ssim"] for r in self.per_frame]))
        cds = [r["cd"] for r in self.per_timestep if r.get("cd") is not None]
        emds = [r["emd"] for r in self.per_timestep if r.get("emd") is not None]
        if cds:
            out["mean_cd"] = float(np.mean(cds))
        if emds:
            out["mean_emd"] = float(np.mean(emds))
        return out

    def to_json(self, path: str):
        with open(path, "w") as fh:
            json.dump({"metadata": self.metadata, "per_frame": self.per_frame,
                       "per_timestep": self.per_timestep,
                       "aggregates": self.aggregates()}, fh, indent=2)

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.per_frame:
                writer.writerow(["frame", "time", "psnr", "ssim"])
                for r in self.per_frame:
                    writer.writerow([r["frame"], r["time"], r["psnr"], r["ssim"]])
            if self.per_timestep:
                keys = sorted({k for r in self.per_timestep for k in r})
                writer.writerow(keys)
                for r in self.per_timestep:
                    writer.writerow([r.get(k, "") for k in keys])
