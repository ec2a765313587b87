"""Training losses for both branches.

Splatting branch: weighted L1 + (1 - SSIM) on the rendered image plus a
normal-map consistency term. Surface branch: L1 ray colors, the filtered-
depth on-surface SDF term, ray-normal consistency, and the Eikonal
regularizer on the canonical gradient. Everything returns tape scalars;
the two branch losses add into one total on a shared tape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import DiffArray

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_i: float = 0.8      # L1 vs SSIM mix in the image loss
    lambda_gn: float = 0.1     # splat-branch normal term
    lambda_sdf: float = 1.0    # filtered-depth on-surface term
    lambda_nn: float = 0.05    # surface-branch normal term
    lambda_eik: float = 0.1    # Eikonal regularizer

    def __post_init__(self):
        vals = (self.lambda_i, self.lambda_gn, self.lambda_sdf,
                self.lambda_nn, self.lambda_eik)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.lambda_i <= 1.0:
            raise ValueError("lambda_i must lie in [0, 1]")


def l1_loss(a, b) -> DiffArray:
    return ad.mean(ad.absolute(ad.asdiff(a) - b))


def _gauss_window(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _blur_matrix(size: int, win: int, sigma: float) -> np.ndarray:
    """Valid-mode 1-D Gaussian blur as a dense matrix [(size-win+1), size]."""
    k = _gauss_window(win, sigma)
    out = np.zeros((size - win + 1, size))
    for i in range(size - win + 1):
        out[i, i:i + win] = k
    return out


def ssim(img_a, img_b, win: int = 11, sigma: float = 1.5) -> DiffArray:
    """Mean SSIM over the valid interior, per channel, Gaussian-windowed.

    img_a rides the tape; img_b is the reference. Matches the standard
    formulation with C1 = 0.01^2, C2 = 0.03^2 on [0,1] images.
    """
    a = ad.asdiff(img_a)
    bv = ad.value(img_b)
    h, w = a.shape[0], a.shape[1]
    if bv.shape[:2] != (h, w):
        raise ValueError(f"image sizes differ: {a.shape} vs {bv.shape}")
    if min(h, w) < win:
        raise ValueError(f"images smaller than the {win}x{win} SSIM window")
    kh = DiffArray(_blur_matrix(h, win, sigma))
    kw_t = DiffArray(_blur_matrix(w, win, sigma).T)

    def blur(x):
        return ad.matmul(ad.matmul(kh, x), kw_t)

    chans = []
    n_ch = 1 if a.ndim == 2 else a.shape[2]
    for c in range(n_ch):
        ac = a if a.ndim == 2 else a[:, :, c]
        bc = DiffArray(bv if a.ndim == 2 else bv[:, :, c])
        mu_a, mu_b = blur(ac), blur(bc)
        var_a = blur(ac * ac) - mu_a * mu_a
        var_b = blur(bc * bc) - mu_b * mu_b
        cov = blur(ac * bc) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        chans.append(ad.mean(num / den))
    total = chans[0]
    for c in chans[1:]:
        total = total + c
    return total * (1.0 / n_ch)


def normal_consistency(rendered, target, mask: np.ndarray) -> DiffArray:
    """Per-pixel L1 plus angular terms between the normalized rendered
    normal and the unit target normal, averaged over masked entries.

    rendered: [M,3] unnormalized blend on tape; target: [M,3] unit vectors;
    mask: [M] bool. Returns 0 when nothing is masked in.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return DiffArray(np.array(0.0))
    idx = np.nonzero(mask)[0]
    r = ad.asdiff(rendered)[idx]
    tv = ad.value(target)[idx]
    norm = ad.sqrt(ad.summation(r * r, axis=-1, keepdims=True))
    rn = r / ad.maximum(norm, 1e-9)
    l1 = ad.summation(ad.absolute(rn - tv), axis=-1)
    dot = ad.summation(rn * tv, axis=-1)
    ang = ad.absolute(1.0 - dot)
    return ad.mean(l1 + ang)


def image_loss_dg(render_out, target, weights: LossWeights,
                  target_normals=None, normal_valid=None,
                  lambda_gn_active: bool = True):
    """Splatting-branch loss: lambda_i L1 + (1-lambda_i)(1-SSIM) + normal
    term over pixels with alpha accumulation > 0.5 and a valid target
    normal. Returns (total, parts)."""
    target = ad.value(target)
    color = render_out.color
    if color.shape != target.shape:
        raise ValueError(
            f"rendered/target size mismatch: {color.shape} vs {target.shape}")
    part_l1 = l1_loss(color, target)
    part_ssim = 1.0 - ssim(color, target)
    total = part_l1 * weights.lambda_i + part_ssim * (1.0 - weights.lambda_i)
    parts = {"dg_l1": float(ad.value(part_l1).item()),
             "dg_ssim": float(ad.value(part_ssim).item()), "dg_normal": 0.0}

    if (target_normals is not None and lambda_gn_active
            and weights.lambda_gn > 0.0):
        alpha = ad.value(render_out.alpha)
        mask = alpha > 0.5
        if normal_valid is not None:
            mask = mask & np.asarray(normal_valid, dtype=bool)
        h, w = alpha.shape
        nterm = normal_consistency(
            ad.reshape(render_out.normal, (h * w, 3)),
            np.asarray(target_normals, dtype=np.float64).reshape(h * w, 3),
            mask.reshape(-1))
        total = total + nterm * weights.lambda_gn
        parts["dg_normal"] = float(ad.value(nterm).item())
    return total, parts


def eikonal_term(field, points: np.ndarray) -> DiffArray:
    """mean (|grad F| - 1)^2 at canonical points."""
    _, _, grad = field.sdf_with_grad(points)
    norm = ad.sqrt(ad.summation(grad * grad, axis=-1) + 1e-12)
    return ad.mean(ad.square(norm - 1.0))


def surface_losses_dn(ray_out, target_colors, field, deformation, t: float,
                      weights: LossWeights, filtered_points=None,
                      eikonal_points=None, target_normals=None,
                      normal_valid=None):
    """Surface-branch loss (ray L1 color + on-surface SDF + normals +
    Eikonal). filtered_points are observation-space points from valid
    filtered-depth pixels; empty/None skips the term with a warning.
    Returns (total, parts)."""
    total = l1_loss(ray_out["color"], ad.value(target_colors))
    parts = {"dn_l1": float(ad.value(total).item()), "dn_sdf": 0.0,
             "dn_normal": 0.0, "dn_eik": 0.0}

    if weights.lambda_sdf > 0.0:
        if filtered_points is None or len(filtered_points) == 0:
            log.warning("surface loss: empty filtered-point set, "
                        "SDF term skipped this step")
        else:
            from dgns.surface import sdf_eval
            s = sdf_eval(field, deformation, np.asarray(filtered_points), t)
            term = ad.mean(ad.absolute(s))
            total = total + term * weights.lambda_sdf
            parts["dn_sdf"] = float(ad.value(term).item())

    if (target_normals is not None and ray_out.get("normal") is not None
            and weights.lambda_nn > 0.0):
        ws = ad.value(ray_out["weight_sum"])
        mask = ws > 0.5
        if normal_valid is not None:
            mask = mask & np.asarray(normal_valid, dtype=bool)
        term = normal_consistency(ray_out["normal"], target_normals, mask)
        total = total + term * weights.lambda_nn
        parts["dn_normal"] = float(ad.value(term).item())

    if eikonal_points is not None and len(eikonal_points) > 0 \
            and weights.lambda_eik > 0.0:
        term = eikonal_term(field, np.asarray(eikonal_points))
        total = total + term * weights.lambda_eik
        parts["dn_eik"] = float(ad.value(term).item())

    return total, parts


def total_loss(l_dg, l_dn) -> DiffArray:
    """Joint objective: plain sum so gradients reach both branches."""
    return ad.asdiff(l_dg) + l_dn
