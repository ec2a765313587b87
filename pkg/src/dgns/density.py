"""Surface-aware density control of the Gaussian set.

Growth and prune scores blend the usual screen-space gradient / opacity
statistics with a Gaussian bump of the SDF value at each primitive's
deformed center, biasing densification toward the zero-level set and
pruning away from it. The structural edit (clone / split / prune) is a
single-threaded exclusive phase; score computation is vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgns.gaussians import GaussianScene


@dataclass
class DensityControlConfig:
    w_g: float = 2e-4                 # growth geometry weight
    w_p: float = 0.3                  # prune geometry weight
    sigma_phi: float = 0.03           # bandwidth of the surface bump (scene units)
    tau_g: float = 2e-4               # growth threshold
    tau_p: float = 5.0                # prune threshold (on the opacity sum)
    opacity_window: int = 100         # K iterations of opacity accumulation
    split_scale_threshold: float = 0.05  # clone below, split above (scene units)
    split_scale_divisor: float = 1.6
    interval: int = 100               # control step every this many iterations
    start_iteration: int = 500
    until_frac: float = 0.5           # stop densifying after this fraction of training
    clone_nudge: float = 0.1          # nudge distance in units of max scale

    def __post_init__(self):
        if self.sigma_phi <= 0:
            raise ValueError("sigma_phi must be positive")
        if self.opacity_window < 1:
            raise ValueError("opacity_window must be >= 1")


def surface_bump(d: np.ndarray, sigma: float) -> np.ndarray:
    """phi(d) = exp(-d^2 / (2 sigma^2)): 1 on the surface, ->0 far away."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def growth_score(grad_avg, d_g, cfg: DensityControlConfig) -> np.ndarray:
    """eps_g = grad_avg + w_g * phi(d_g). d_g None means no geometry
    guidance (pure gradient criterion)."""
    grad_avg = np.asarray(grad_avg, dtype=np.float64)
    if d_g is None:
        return grad_avg.copy()
    return grad_avg + cfg.w_g * surface_bump(d_g, cfg.sigma_phi)


def prune_score(opacity_sum, d_g, cfg: DensityControlConfig) -> np.ndarray:
    """eps_p = sigma_p - w_p * (1 - phi(d_g)); far-from-surface Gaussians
    pay up to the full w_p penalty."""
    opacity_sum = np.asarray(opacity_sum, dtype=np.float64)
    if d_g is None:
        return opacity_sum.copy()
    return opacity_sum - cfg.w_p * (1.0 - surface_bump(d_g, cfg.sigma_phi))


@dataclass
class ControlResult:
    keep_idx: np.ndarray      # original indices that survive, in order
    n_children: int           # appended after the kept originals
    child_parent: np.ndarray  # original index each child came from
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    score_stats: dict = field(default_factory=dict)

    def log_record(self, iteration: int, n_after: int) -> dict:
        rec = {"iteration": iteration, "cloned": self.cloned,
               "split": self.split, "pruned": self.pruned,
               "n_gaussians": n_after}
        rec.update(self.score_stats)
        return rec


def apply_density_control(scene: GaussianScene, eps_g: np.ndarray,
                          eps_p: np.ndarray, cfg: DensityControlConfig,
                          rng: np.random.Generator) -> ControlResult:
    """One structural control step, in place.

    Growth candidates (eps_g > tau_g) are cloned when their largest scale is
    below the split threshold (the duplicate is nudged along the accumulated
    position-gradient direction), otherwise split into two children sampled
    from the parent with scales divided by the split divisor. Prune
    candidates (eps_p < tau_p) are removed and never grow. Accumulators
    reset afterwards.
    """
    n = len(scene)
    if eps_g.shape != (n,) or eps_p.shape != (n,):
        raise ValueError("scores must be per-gaussian")

    prune = eps_p < cfg.tau_p
    grow = (eps_g > cfg.tau_g) & ~prune
    max_scale = np.exp(scene.log_scales.value).max(axis=-1)
    split = grow & (max_scale >= cfg.split_scale_threshold)
    clone = grow & ~split

    keep = ~(prune | split)
    keep_idx = np.nonzero(keep)[0]

    pos = scene.positions.value
    log_s = scene.log_scales.value
    quats = scene.quats.value
    logits = scene.opacity_logits.value
    sh = scene.sh.value

    child_pos, child_ls, child_q, child_lg, child_sh, child_parent = \
        [], [], [], [], [], []

    clone_ids = np.nonzero(clone)[0]
    if clone_ids.size:
        g3 = scene.grad3d_accum[clone_ids]
        norm = np.linalg.norm(g3, axis=-1, keepdims=True)
        step = np.where(norm > 0, -g3 / np.maximum(norm, 1e-30), 0.0)
        nudge = step * (cfg.clone_nudge * max_scale[clone_ids])[:, None]
        child_pos.append(pos[clone_ids] + nudge)
        child_ls.append(log_s[clone_ids].copy())
        child_q.append(quats[clone_ids].copy())
        child_lg.append(logits[clone_ids].copy())
        child_sh.append(sh[clone_ids].copy())
        child_parent.append(clone_ids)

    split_ids = np.nonzero(split)[0]
    if split_ids.size:
        from dgns import autodiff as ad
        from dgns.gaussians import build_covariance
        cov = ad.value(build_covariance(quats[split_ids], log_s[split_ids]))
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
        for _ in range(2):
            z = rng.normal(size=(split_ids.size, 3))
            samples = pos[split_ids] + np.einsum("nij,nj->ni", chol, z)
            child_pos.append(samples)
            child_ls.append(log_s[split_ids] - np.log(cfg.split_scale_divisor))
            child_q.append(quats[split_ids].copy())
            child_lg.append(logits[split_ids].copy())
            child_sh.append(sh[split_ids].copy())
            child_parent.append(split_ids)

    if child_pos:
        new_pos = np.concatenate([pos[keep_idx]] + child_pos)
        new_ls = np.concatenate([log_s[keep_idx]] + child_ls)
        new_q = np.concatenate([quats[keep_idx]] + child_q)
        new_lg = np.concatenate([logits[keep_idx]] + child_lg)
        new_sh = np.concatenate([sh[keep_idx]] + child_sh)
        parents = np.concatenate(child_parent)
    else:
        new_pos, new_ls = pos[keep_idx], log_s[keep_idx]
        new_q, new_lg, new_sh = quats[keep_idx], logits[keep_idx], sh[keep_idx]
        parents = np.zeros(0, dtype=np.int64)

    if new_pos.shape[0] == 0:
        raise RuntimeError(
            "density control removed every gaussian "
            f"(pruned {int(prune.sum())}/{n}); runaway pruning, check tau_p/w_p")

    scene.positions.value = np.ascontiguousarray(new_pos)
    scene.log_scales.value = np.ascontiguousarray(new_ls)
    scene.quats.value = np.ascontiguousarray(new_q)
    scene.opacity_logits.value = np.ascontiguousarray(new_lg)
    scene.sh.value = np.ascontiguousarray(new_sh)
    scene.renormalize_quats()
    scene.reset_accumulators()

    return ControlResult(
        keep_idx=keep_idx, n_children=int(parents.size),
        child_parent=parents, cloned=int(clone_ids.size),
        split=int(split_ids.size), pruned=int(prune.sum()),
        score_stats={"eps_g_min": float(eps_g.min()), "eps_g_max": float(eps_g.max()),
                     "eps_p_min": float(eps_p.min()), "eps_p_max": float(eps_p.max())})


def remap_adam_moments(result: ControlResult, states, params):
    """Keep optimizer moments for surviving Gaussians, zeros for children.
    states iterates AdamState objects whose moment dicts cover params."""
    def fn(m):
        kept = m[result.keep_idx]
        child = np.zeros((result.n_children,) + m.shape[1:])
        return np.concatenate([kept, child])

    for st in states:
        for p in params:
            st.remap(p, fn)
