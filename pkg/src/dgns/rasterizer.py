"""Differentiable rasterization of projected Gaussians.

Front-to-back alpha compositing of depth-sorted splats into color, normal,
alpha, alpha-blended depth, median depth and filtered depth images. Two
forward paths share every culling rule and every per-contributor formula:

* the optimized path walks Gaussians in depth order and updates their
  bounding-box pixel rectangles with vectorized numpy;
* the brute-force path walks pixels and their contributor lists one by one
  and is the permanent oracle for the optimized path.

The backward pass is the analytic adjoint of the blending recurrence,
computed from the retained per-pixel contributor lists and scattered back
per Gaussian with deterministic ordered reductions. Depth images are
supervision products and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import DiffArray
from dgns.gaussians import (Camera, GaussianScene, build_covariance, eval_sh,
                            gaussian_normal, project_gaussians)

_DET_EPS = 1e-12


@dataclass
class RenderConfig:
    background: tuple = (0.0, 0.0, 0.0)
    tau_d: float = 0.6           # median-depth transmittance threshold
    tau_f: float = 0.2           # depth agreement gate (scene units)
    depth_filter_combine: str = "midpoint"  # or "paper_literal"
    near: float = 0.01
    sigma_cutoff: float = 3.0    # contribution radius in sigmas
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_stop: float = 1e-4         # stop compositing below this transmittance
    sh_degree: int = 1

    def bg(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)


@dataclass
class DepthBundle:
    d_alpha: np.ndarray    # [H,W], 0 where no accumulation
    d_median: np.ndarray   # [H,W], 0 where threshold never crossed
    d_filtered: np.ndarray  # [H,W], 0 outside the agreement gate
    valid: np.ndarray      # [H,W] bool mask for d_filtered


@dataclass
class Contributors:
    """Flattened per-pixel contributor lists, pixel-major in depth order."""

    pix: np.ndarray     # flat pixel index
    gid: np.ndarray     # gaussian index (into the input arrays)
    alpha: np.ndarray
    t_before: np.ndarray
    gauss: np.ndarray   # exp(power), needed for d(alpha)/d(opacity)
    dx: np.ndarray
    dy: np.ndarray


@dataclass
class RenderOutput:
    color: DiffArray           # [H,W,3]
    normal: DiffArray          # [H,W,3]
    alpha: DiffArray           # [H,W]
    depth: DepthBundle
    contributors: Contributors | None
    stats: dict = field(default_factory=dict)


def _prepare(mean2d, cov2d, opacity, depth, valid, width, height, cfg):
    """Shared culling/sorting stage: conics, bounding boxes and the global
    depth order used by both forward paths."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    ok = valid & (det > _DET_EPS)
    n_degenerate = int(np.sum(valid & ~(det > _DET_EPS)))

    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=-1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 1e-12))
    radius = cfg.sigma_cutoff * np.sqrt(np.maximum(lam_max, 0.0))

    i0 = np.maximum(np.floor(mean2d[:, 0] - radius), 0).astype(np.int64)
    i1 = np.minimum(np.ceil(mean2d[:, 0] + radius), width - 1).astype(np.int64)
    j0 = np.maximum(np.floor(mean2d[:, 1] - radius), 0).astype(np.int64)
    j1 = np.minimum(np.ceil(mean2d[:, 1] + radius), height - 1).astype(np.int64)
    on_screen = (i0 <= i1) & (j0 <= j1) & (mean2d[:, 0] + radius >= 0) \
        & (mean2d[:, 0] - radius <= width - 1) \
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= height - 1)
    ok = ok & on_screen

    ids = np.nonzero(ok)[0]
    order = ids[np.argsort(depth[ids], kind="stable")]
    stats = {"culled_behind": int(np.sum(~valid)),
             "degenerate": n_degenerate,
             "drawn": len(order)}
    return order, conic, (i0, i1, j0, j1), stats


try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None


if _numba is not None:
    @_numba.njit(cache=True, fastmath=False)
    def _composite_kernel(order, mean2d, conic, opacity, color, normal,
                          depth, i0, i1, j0, j1, width, height, alpha_min,
                          alpha_max, t_stop, tau_d, max_pairs):
        color_acc = np.zeros((height, width, 3))
        normal_acc = np.zeros((height, width, 3))
        alpha_acc = np.zeros((height, width))
        dnum = np.zeros((height, width))
        dmed = np.zeros((height, width))
        trans = np.ones((height, width))
        pix = np.empty(max_pairs, dtype=np.int64)
        gid = np.empty(max_pairs, dtype=np.int64)
        p_alpha = np.empty(max_pairs)
        p_t = np.empty(max_pairs)
        p_g = np.empty(max_pairs)
        p_dx = np.empty(max_pairs)
        p_dy = np.empty(max_pairs)
        k = 0
        for oi in range(order.shape[0]):
            g = order[oi]
            mx, my = mean2d[g, 0], mean2d[g, 1]
            ia, ib, ic = conic[g, 0], conic[g, 1], conic[g, 2]
            op = opacity[g]
            for j in range(j0[g], j1[g] + 1):
                dy = (j + 0.5) - my
                for i in range(i0[g], i1[g] + 1):
                    t_cur = trans[j, i]
                    if t_cur < t_stop:
                        continue
                    dx = (i + 0.5) - mx
                    power = -0.5 * (ia * dx * dx) - 0.5 * (ic * dy * dy) \
                        - ib * dy * dx
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    alpha = op * gauss
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    aw = alpha * t_cur
                    for c in range(3):
                        color_acc[j, i, c] += aw * color[g, c]
                        normal_acc[j, i, c] += aw * normal[g, c]
                    alpha_acc[j, i] += aw
                    dnum[j, i] += aw * depth[g]
                    t_next = t_cur * (1.0 - alpha)
                    if dmed[j, i] == 0.0 and t_next < tau_d:
                        dmed[j, i] = depth[g]
                    trans[j, i] = t_next
                    pix[k] = j * width + i
                    gid[k] = g
                    p_alpha[k] = alpha
                    p_t[k] = t_cur
                    p_g[k] = gauss
                    p_dx[k] = dx
                    p_dy[k] = dy
                    k += 1
        return (color_acc, normal_acc, alpha_acc, dnum, dmed,
                pix[:k], gid[:k], p_alpha[:k], p_t[:k], p_g[:k],
                p_dx[:k], p_dy[:k])


def _forward_jit(mean2d, cov2d, opacity, color, normal, depth, valid,
                 width, height, cfg):
    order, conic, (i0, i1, j0, j1), stats = _prepare(
        mean2d, cov2d, opacity, depth, valid, width, height, cfg)
    max_pairs = int(np.sum((i1[order] - i0[order] + 1)
                           * (j1[order] - j0[order] + 1))) if order.size else 0
    (color_acc, normal_acc, alpha_acc, dnum, dmed, pix, gid, p_alpha, p_t,
     p_g, p_dx, p_dy) = _composite_kernel(
        order, mean2d, conic, opacity, color, normal, depth, i0, i1, j0, j1,
        width, height, cfg.alpha_min, cfg.alpha_max, cfg.t_stop, cfg.tau_d,
        max(max_pairs, 1))
    srt = np.argsort(pix, kind="stable")
    contribs = Contributors(pix=pix[srt], gid=gid[srt], alpha=p_alpha[srt],
                            t_before=p_t[srt], gauss=p_g[srt],
                            dx=p_dx[srt], dy=p_dy[srt])
    images = {"color": color_acc, "normal": normal_acc, "alpha": alpha_acc,
              "dnum": dnum, "dmed": dmed}
    return images, contribs, stats


def _forward_optimized(mean2d, cov2d, opacity, color, normal, depth, valid,
                       width, height, cfg):
    if _numba is not None:
        return _forward_jit(mean2d, cov2d, opacity, color, normal, depth,
                            valid, width, height, cfg)
    return _forward_vectorized(mean2d, cov2d, opacity, color, normal, depth,
                               valid, width, height, cfg)


def _forward_vectorized(mean2d, cov2d, opacity, color, normal, depth, valid,
                        width, height, cfg):
    order, conic, (i0, i1, j0, j1), stats = _prepare(
        mean2d, cov2d, opacity, depth, valid, width, height, cfg)

    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5

    color_acc = np.zeros((height, width, 3))
    normal_acc = np.zeros((height, width, 3))
    alpha_acc = np.zeros((height, width))
    dnum = np.zeros((height, width))
    dmed = np.zeros((height, width))
    med_done = np.zeros((height, width), dtype=bool)
    trans = np.ones((height, width))

    pix_l, gid_l, alpha_l, t_l, g_l, dx_l, dy_l = [], [], [], [], [], [], []

    for g in order:
        gi0, gi1, gj0, gj1 = i0[g], i1[g], j0[g], j1[g]
        mx, my = mean2d[g, 0], mean2d[g, 1]
        ia, ib, ic = conic[g]
        op = opacity[g]
        dx = xs[gi0:gi1 + 1] - mx
        dy = ys[gj0:gj1 + 1] - my
        power = (-0.5 * (ia * dx * dx)[None, :]
                 - 0.5 * (ic * dy * dy)[:, None]
                 - ib * dy[:, None] * dx[None, :])
        gauss = np.exp(power)
        alpha = np.minimum(cfg.alpha_max, op * gauss)
        tl = trans[gj0:gj1 + 1, gi0:gi1 + 1]
        contrib = (power <= 0.0) & (alpha >= cfg.alpha_min) & (tl >= cfg.t_stop)
        if not contrib.any():
            continue
        aw = np.where(contrib, alpha * tl, 0.0)
        color_acc[gj0:gj1 + 1, gi0:gi1 + 1] += aw[:, :, None] * color[g]
        normal_acc[gj0:gj1 + 1, gi0:gi1 + 1] += aw[:, :, None] * normal[g]
        alpha_acc[gj0:gj1 + 1, gi0:gi1 + 1] += aw
        dnum[gj0:gj1 + 1, gi0:gi1 + 1] += aw * depth[g]

        md = med_done[gj0:gj1 + 1, gi0:gi1 + 1]
        newly = contrib & ~md & (tl * (1.0 - alpha) < cfg.tau_d)
        if newly.any():
            block = dmed[gj0:gj1 + 1, gi0:gi1 + 1]
            block[newly] = depth[g]
            md |= newly

        # record pairs before touching trans: tl aliases it
        jj, ii = np.nonzero(contrib)
        pix_l.append((jj + gj0) * width + (ii + gi0))
        gid_l.append(np.full(jj.size, g, dtype=np.int64))
        alpha_l.append(alpha[jj, ii])
        t_l.append(tl[jj, ii])
        g_l.append(gauss[jj, ii])
        dx_l.append(dx[ii])
        dy_l.append(dy[jj])

        trans[gj0:gj1 + 1, gi0:gi1 + 1] = np.where(contrib, tl * (1.0 - alpha), tl)

    if pix_l:
        pix = np.concatenate(pix_l)
        srt = np.argsort(pix, kind="stable")  # depth order kept within pixel
        contribs = Contributors(
            pix=pix[srt],
            gid=np.concatenate(gid_l)[srt],
            alpha=np.concatenate(alpha_l)[srt],
            t_before=np.concatenate(t_l)[srt],
            gauss=np.concatenate(g_l)[srt],
            dx=np.concatenate(dx_l)[srt],
            dy=np.concatenate(dy_l)[srt],
        )
    else:
        z = np.zeros(0)
        contribs = Contributors(np.zeros(0, np.int64), np.zeros(0, np.int64),
                                z, z.copy(), z.copy(), z.copy(), z.copy())
    images = {"color": color_acc, "normal": normal_acc, "alpha": alpha_acc,
              "dnum": dnum, "dmed": dmed}
    return images, contribs, stats


def _forward_bruteforce(mean2d, cov2d, opacity, color, normal, depth, valid,
                        width, height, cfg):
    """Per-pixel contributor walk. Same rules and formulas as the optimized
    path, organized pixel-major. Oracle only: O(pixels x gaussians)."""
    order, conic, (i0, i1, j0, j1), stats = _prepare(
        mean2d, cov2d, opacity, depth, valid, width, height, cfg)

    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5

    color_acc = np.zeros((height, width, 3))
    normal_acc = np.zeros((height, width, 3))
    alpha_acc = np.zeros((height, width))
    dnum = np.zeros((height, width))
    dmed = np.zeros((height, width))

    for j in range(height):
        for i in range(width):
            t_cur = 1.0
            med = 0.0
            for g in order:
                if not (i0[g] <= i <= i1[g] and j0[g] <= j <= j1[g]):
                    continue
                if t_cur < cfg.t_stop:
                    break
                dx = xs[i] - mean2d[g, 0]
                dy = ys[j] - mean2d[g, 1]
                ia, ib, ic = conic[g]
                power = -0.5 * (ia * dx * dx) - 0.5 * (ic * dy * dy) - ib * dy * dx
                if power > 0.0:
                    continue
                alpha = min(cfg.alpha_max, opacity[g] * np.exp(power))
                if alpha < cfg.alpha_min:
                    continue
                aw = alpha * t_cur
                color_acc[j, i] += aw * color[g]
                normal_acc[j, i] += aw * normal[g]
                alpha_acc[j, i] += aw
                dnum[j, i] += aw * depth[g]
                t_next = t_cur * (1.0 - alpha)
                if med == 0.0 and t_next < cfg.tau_d:
                    med = depth[g]
                t_cur = t_next
            dmed[j, i] = med
    images = {"color": color_acc, "normal": normal_acc, "alpha": alpha_acc,
              "dnum": dnum, "dmed": dmed}
    return images, None, stats


def median_depth_rule(depths, alphas, tau_d: float) -> float:
    """Depth of the first contributor whose post-composite transmittance
    drops below tau_d, else 0. Contributors must be depth-sorted."""
    t = 1.0
    for d, a in zip(depths, alphas):
        t *= (1.0 - a)
        if t < tau_d:
            return float(d)
    return 0.0


def filter_depth(d_alpha: np.ndarray, d_median: np.ndarray, tau_f: float,
                 combine: str = "midpoint") -> tuple[np.ndarray, np.ndarray]:
    """Keep depth only where the two estimates agree within tau_f (strict).

    combine="midpoint" averages the two depths; "paper_literal" keeps the
    half-difference form. Pixels with no accumulation or no median crossing
    are excluded first.
    """
    usable = (d_alpha > 0.0) & (d_median > 0.0)
    gate = usable & (np.abs(d_alpha - d_median) < tau_f)
    if combine == "midpoint":
        df = np.where(gate, 0.5 * (d_alpha + d_median), 0.0)
    elif combine == "paper_literal":
        df = np.where(gate, 0.5 * (d_alpha - d_median), 0.0)
    else:
        raise ValueError(f"unknown depth_filter_combine {combine!r}")
    return df, gate


def rasterize_backward(contribs: Contributors, conic: np.ndarray,
                       opacity: np.ndarray, color: np.ndarray,
                       normal: np.ndarray, n_gauss: int, bg: np.ndarray,
                       alpha_max: float, grad_color: np.ndarray,
                       grad_normal: np.ndarray, grad_alpha: np.ndarray):
    """Analytic adjoint of the blending recurrence.

    Returns gradients w.r.t. mean2d, packed cov2d, opacity, color, normal.
    """
    if contribs is None:
        raise ValueError("contributor lists were not retained in the forward pass")
    m = contribs.pix.size
    out = {
        "mean2d": np.zeros((n_gauss, 2)),
        "cov2d": np.zeros((n_gauss, 3)),
        "opacity": np.zeros(n_gauss),
        "color": np.zeros((n_gauss, 3)),
        "normal": np.zeros((n_gauss, 3)),
    }
    if m == 0:
        return out

    pix, gid = contribs.pix, contribs.gid
    alpha, t_before = contribs.alpha, contribs.t_before
    gc = grad_color.reshape(-1, 3)[pix]    # [M,3]
    gn = grad_normal.reshape(-1, 3)[pix]
    ga = grad_alpha.reshape(-1)[pix]

    # sensitivity of the pixel outputs to this contributor's blend weight
    u = (np.sum((color[gid] - bg) * gc, axis=1)
         + np.sum(normal[gid] * gn, axis=1) + ga)
    w = alpha * t_before
    wu = w * u

    # suffix sums of w*u within each pixel (contributors behind this one)
    csum = np.cumsum(wu)
    newseg = np.empty(m, dtype=bool)
    newseg[0] = True
    newseg[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(newseg) - 1
    starts = np.nonzero(newseg)[0]
    last = np.append(starts[1:] - 1, m - 1)
    behind = csum[last][seg_id] - csum

    d_alpha_blend = t_before * u - behind / (1.0 - alpha)

    # color / normal gradients: w * upstream
    for k in range(3):
        out["color"][:, k] = np.bincount(gid, weights=w * gc[:, k],
                                         minlength=n_gauss)
        out["normal"][:, k] = np.bincount(gid, weights=w * gn[:, k],
                                          minlength=n_gauss)

    # alpha = min(alpha_max, opacity * G); clamped contributors get zero
    unclamped = opacity[gid] * contribs.gauss < alpha_max
    da = np.where(unclamped, d_alpha_blend, 0.0)
    out["opacity"] = np.bincount(gid, weights=da * contribs.gauss,
                                 minlength=n_gauss)
    d_power = da * contribs.gauss * opacity[gid]

    ia, ib, ic = conic[gid, 0], conic[gid, 1], conic[gid, 2]
    dx, dy = contribs.dx, contribs.dy
    mx_ = ia * dx + ib * dy  # conic @ delta
    my_ = ib * dx + ic * dy
    out["mean2d"][:, 0] = np.bincount(gid, weights=d_power * mx_, minlength=n_gauss)
    out["mean2d"][:, 1] = np.bincount(gid, weights=d_power * my_, minlength=n_gauss)
    # d(power)/d(cov2d packed): (mx^2/2, mx*my, my^2/2)
    out["cov2d"][:, 0] = np.bincount(gid, weights=d_power * 0.5 * mx_ * mx_,
                                     minlength=n_gauss)
    out["cov2d"][:, 1] = np.bincount(gid, weights=d_power * mx_ * my_,
                                     minlength=n_gauss)
    out["cov2d"][:, 2] = np.bincount(gid, weights=d_power * 0.5 * my_ * my_,
                                     minlength=n_gauss)
    return out


def rasterize(mean2d, cov2d, opacity, color, normal, depth: np.ndarray,
              valid: np.ndarray, width: int, height: int, cfg: RenderConfig,
              oracle: bool = False) -> RenderOutput:
    """Rasterize projected Gaussians into a RenderOutput.

    mean2d/cov2d/opacity/color/normal ride the tape; depth and valid are
    plain arrays. With oracle=True the brute-force per-pixel path is used
    (forward only, still differentiable is not needed there).
    """
    mean2d, cov2d = ad.asdiff(mean2d), ad.asdiff(cov2d)
    opacity, color, normal = ad.asdiff(opacity), ad.asdiff(color), ad.asdiff(normal)
    mv, cv = mean2d.value, cov2d.value
    ov, colv, nv = opacity.value, color.value, normal.value
    n_gauss = mv.shape[0]
    bg = cfg.bg()

    fwd = _forward_bruteforce if oracle else _forward_optimized
    images, contribs, stats = fwd(mv, cv, ov, colv, nv, depth, valid,
                                  width, height, cfg)

    final_color = images["color"] + bg * (1.0 - images["alpha"])[:, :, None]
    packed = np.concatenate([final_color, images["normal"],
                             images["alpha"][:, :, None]], axis=2)

    if oracle:
        packed_d = DiffArray(packed)
    else:
        # conic is needed again in the backward; recompute once here
        a, b, c = cv[:, 0], cv[:, 1], cv[:, 2]
        det = a * c - b * b
        safe = det > _DET_EPS
        inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=-1)

        def vjp(grad):
            g = rasterize_backward(
                contribs, conic, ov, colv, nv, n_gauss, bg, cfg.alpha_max,
                grad[:, :, 0:3], grad[:, :, 3:6], grad[:, :, 6])
            return (g["mean2d"], g["cov2d"], g["opacity"], g["color"],
                    g["normal"])

        packed_d = ad.custom("rasterize", [mean2d, cov2d, opacity, color, normal],
                             packed, vjp)

    color_img = packed_d[:, :, 0:3]
    normal_img = packed_d[:, :, 3:6]
    alpha_img = packed_d[:, :, 6]

    acc = images["alpha"]
    covered = acc > 0.0
    d_alpha = np.where(covered, images["dnum"] / np.where(covered, acc, 1.0), 0.0)
    d_filtered, valid_f = filter_depth(d_alpha, images["dmed"], cfg.tau_f,
                                       cfg.depth_filter_combine)
    bundle = DepthBundle(d_alpha=d_alpha, d_median=images["dmed"],
                         d_filtered=d_filtered, valid=valid_f)
    return RenderOutput(color=color_img, normal=normal_img, alpha=alpha_img,
                        depth=bundle, contributors=contribs, stats=stats)


def render(scene: GaussianScene, camera: Camera, cfg: RenderConfig,
           deform_fn=None, t: float | None = None,
           oracle: bool = False) -> RenderOutput:
    """Full splatting pipeline: optional deformation at time t, covariance
    build, projection, SH color, viewer-facing normals, rasterization.

    deform_fn(positions, t) must return tape-valued (dx, dquat, dlog_scale)
    offsets; None renders the canonical set.
    """
    positions = ad.asdiff(scene.positions)
    quats = ad.asdiff(scene.quats)
    log_scales = ad.asdiff(scene.log_scales)
    if deform_fn is not None:
        if t is None:
            raise ValueError("deformation requires a timestamp")
        dx, dq, ds = deform_fn(positions, t)
        positions = positions + dx
        quats = quats + dq
        log_scales = log_scales + ds

    cov3d = build_covariance(quats, log_scales)
    proj = project_gaussians(positions, cov3d, camera, near=cfg.near)

    cam_center = camera.center
    offsets = positions - cam_center
    dist = ad.sqrt(ad.summation(offsets * offsets, axis=-1, keepdims=True))
    view_dirs = offsets / ad.maximum(dist, 1e-9)

    colors = eval_sh(scene.sh, view_dirs, scene.sh_degree)
    normals_w = gaussian_normal(quats, log_scales,
                                flip_to_dirs=ad.value(view_dirs))
    normals_c = ad.matmul(normals_w, DiffArray(camera.rotation.T))

    opacity = ad.sigmoid(scene.opacity_logits)
    out = rasterize(proj["mean2d"], proj["cov2d"], opacity, colors, normals_c,
                    proj["depth"], proj["valid"], camera.width, camera.height,
                    cfg, oracle=oracle)
    out.stats["mean2d_node"] = proj["mean2d"].node
    out.stats["n_gauss"] = len(scene)
    return out
