"""Canonical SDF field and ray-based surface rendering.

The field is a hash-grid encoder plus a small softplus MLP with a signed
distance head and a geometry feature head, a companion color net, and a
learnable logistic sharpness. Rays are sampled inside depth-guided windows
when the splatting branch provides a trustworthy proposal, else uniformly
across the scene box. Spatial gradients are forward-mode tangents recorded
on the tape, so every loss built on them stays exactly differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import Adam, DiffArray, Param, Tape, tape_backward
from dgns.deform import BijectiveDeformation
from dgns.encoders import HashGridEncoding, Mlp

PHI_EPS = 1e-7     # denominator guard in the opacity conversion
WSUM_EPS = 1e-9    # expected-depth normalization guard


class SdfField:
    """Hash-grid + MLP signed-distance field with color head."""

    def __init__(self, box_min, box_max, hidden: int = 64, feat_dim: int = 15,
                 trunk_layers: int = 4, color_hidden: int = 64,
                 grid_levels: int = 8, grid_table_size: int = 2 ** 15,
                 grid_base_res: int = 16, grid_max_res: int = 256,
                 inv_s_init: float = 20.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.grid = HashGridEncoding(box_min, box_max, levels=grid_levels,
                                     table_size=grid_table_size,
                                     base_resolution=grid_base_res,
                                     max_resolution=grid_max_res,
                                     rng=rng, name="sdf.hash")
        in_dim = 3 + self.grid.output_dim
        widths = [in_dim] + [hidden] * (trunk_layers - 1) + [1 + feat_dim]
        self.trunk = Mlp(widths, activation="softplus100", rng=rng,
                         name="sdf.trunk")
        self.color_net = Mlp([3 + feat_dim + 3, color_hidden, color_hidden, 3],
                             activation="relu", out_activation="sigmoid",
                             rng=rng, name="sdf.color")
        self.log_inv_s = Param(np.array([np.log(inv_s_init)]), "sdf.log_inv_s")

    @property
    def params(self) -> list[Param]:
        return (self.grid.params + self.trunk.params + self.color_net.params
                + [self.log_inv_s])

    @property
    def geometry_params(self) -> list[Param]:
        return self.grid.params + self.trunk.params

    def inv_s(self) -> DiffArray:
        return ad.exp(ad.asdiff(self.log_inv_s))

    def sdf(self, x_c) -> tuple[DiffArray, DiffArray]:
        """Canonical points [M,3] -> (signed distance [M], feature [M,F])."""
        x_c = ad.asdiff(x_c)
        enc = self.grid(x_c)
        h = self.trunk(ad.concat([x_c, enc], axis=-1))
        return h[:, 0], h[:, 1:]

    def sdf_with_grad(self, x_c):
        """(sdf [M], feature [M,F], canonical spatial gradient [M,3]);
        the gradient is a forward-mode tangent expression, differentiable
        w.r.t. all field parameters and x_c."""
        x_c = ad.asdiff(x_c)
        m = x_c.shape[0]
        enc, enc_tans = self.grid.encode_with_spatial_jvp(x_c)
        eye = np.eye(3)
        tin = [ad.concat([DiffArray(np.tile(eye[j], (m, 1))), enc_tans[j]],
                         axis=-1) for j in range(3)]
        h, th = self.trunk.forward_jvp(ad.concat([x_c, enc], axis=-1), tin)
        grad = ad.stack([th[j][:, 0] for j in range(3)], axis=-1)
        return h[:, 0], h[:, 1:], grad

    def color(self, x_c, feat, grad_dir) -> DiffArray:
        """RGB from canonical point, geometry feature, gradient direction."""
        return self.color_net(ad.concat([ad.asdiff(x_c), feat, grad_dir],
                                        axis=-1))

    def initialize_sphere(self, radius: float, center=None, iters: int = 500,
                          batch: int = 512, lr: float = 5e-3,
                          rng: np.random.Generator | None = None) -> float:
        """Fit the raw field to an analytic sphere SDF by regression; returns
        the final fit loss. Standard geometric warm start."""
        rng = rng if rng is not None else np.random.default_rng(0)
        center = np.zeros(3) if center is None else np.asarray(center)
        opt = Adam([(self.geometry_params, lr)])
        last = np.inf
        for _ in range(iters):
            x = rng.uniform(self.box_min, self.box_max, size=(batch, 3))
            target = np.linalg.norm(x - center, axis=-1) - radius
            with Tape():
                pred, _ = self.sdf(x)
                loss = ad.mean(ad.square(pred - target))
                opt.step(tape_backward(loss))
                last = float(ad.value(loss).item())
        return last


def sdf_eval(field: SdfField, deformation: BijectiveDeformation | None,
             x_o, t: float) -> DiffArray:
    """Composite signed distance at observation points: F(H(x_o, t));
    F(x_o) when no deformation is given."""
    x = ad.asdiff(x_o)
    if deformation is not None:
        x = deformation.forward(x, t)
    s, _ = field.sdf(x)
    return s


def sdf_eval_with_obs_grad(field: SdfField,
                           deformation: BijectiveDeformation | None,
                           x_o, t: float):
    """(sdf, feature, canonical gradient, observation-space gradient,
    canonical points) of the composite field at observation points. The
    observation gradient chains the deformation Jacobian: grad_o = J_H^T
    grad_c."""
    x = ad.asdiff(x_o)
    m = x.shape[0]
    if deformation is None:
        s, feat, grad_c = field.sdf_with_grad(x)
        return s, feat, grad_c, grad_c, x
    seeds = [DiffArray(np.tile(e, (m, 1))) for e in np.eye(3)]
    x_c, jac_cols = deformation.forward_jvp(x, t, seeds)
    s, feat, grad_c = field.sdf_with_grad(x_c)
    comps = [ad.summation(grad_c * jac_cols[j], axis=-1) for j in range(3)]
    return s, feat, grad_c, ad.stack(comps, axis=-1), x_c


# ---------------------------------------------------------------------------
# ray sampling
# ---------------------------------------------------------------------------

@dataclass
class RaySampleBatch:
    origins: np.ndarray      # [R,3]
    dirs: np.ndarray         # [R,3] unit
    depths: np.ndarray       # [R,S] strictly increasing per ray
    guided: np.ndarray       # [R] bool, True where the depth window was used
    lo: np.ndarray           # [R] interval starts
    hi: np.ndarray           # [R] interval ends
    hits_box: np.ndarray     # [R] bool, False for rays that miss the scene

    def points(self) -> np.ndarray:
        """Observation-space sample points [R,S,3]."""
        return self.origins[:, None, :] + self.depths[..., None] * self.dirs[:, None, :]


def ray_box_intersect(origins, dirs, box_min, box_max, near: float = 0.05):
    """Slab test: (t_near [R], t_far [R], hit [R])."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (box_min[None, :] - origins) * inv
    t1 = (box_max[None, :] - origins) * inv
    tn = np.minimum(t0, t1).max(axis=-1)
    tf = np.maximum(t0, t1).min(axis=-1)
    tn = np.maximum(tn, near)
    hit = tf > tn
    return tn, tf, hit


def _stratified(lo, hi, n, rng):
    r = lo.shape[0]
    u = (np.arange(n)[None, :] + rng.uniform(size=(r, n))) / n
    return lo[:, None] + (hi - lo)[:, None] * u


def guided_interval(d_alpha, d, s: float, eps_floor: float,
                    near: float = 0.05):
    """Sampling window around the depth proposal: half-width s*|d| with a
    floor so the window never collapses at d = 0."""
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    half = np.maximum(s * np.abs(np.asarray(d, dtype=np.float64)), eps_floor)
    lo = np.maximum(d_alpha - half, near)
    hi = np.maximum(d_alpha + half, lo + 1e-4)
    return lo, hi


def guided_sample_ray(origins, dirs, d_alpha, valid, s: float, n: int,
                      t: float, field: SdfField,
                      deformation: BijectiveDeformation | None,
                      rng: np.random.Generator, eps_floor: float = 0.05,
                      n_fallback: int | None = None,
                      near: float = 0.05) -> RaySampleBatch:
    """Stratified samples in the depth-guided window around the splatting
    proposal d_alpha, shrunk by the local |SDF| times the scale factor s.

    Rays with an untrusted proposal (valid False) fall back to uniform
    samples across the ray/scene-box intersection. The window never
    collapses below the eps_floor half-width.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    r = origins.shape[0]
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)

    tn, tf, hit = ray_box_intersect(origins, dirs, field.box_min,
                                    field.box_max, near=near)
    lo = tn.copy()
    hi = np.maximum(tf, tn + 1e-3)

    if valid.any():
        p = origins[valid] + d_alpha[valid, None] * dirs[valid]
        d = ad.value(sdf_eval(field, deformation, p, t))
        lo[valid], hi[valid] = guided_interval(d_alpha[valid], d, s,
                                               eps_floor, near=near)

    depths = _stratified(lo, hi, n, rng)
    return RaySampleBatch(origins=origins, dirs=dirs, depths=depths,
                          guided=valid.copy(), lo=lo, hi=hi, hits_box=hit)


def uniform_sample_ray(origins, dirs, n: int, field: SdfField,
                       rng: np.random.Generator, near: float = 0.05) -> RaySampleBatch:
    """Stratified samples over the full ray/scene-box intersection."""
    r = np.asarray(origins).shape[0]
    return guided_sample_ray(origins, dirs, np.zeros(r),
                             np.zeros(r, dtype=bool), 1.0, n, 0.0, field,
                             None, rng, near=near)


# ---------------------------------------------------------------------------
# opacity conversion and compositing
# ---------------------------------------------------------------------------

def sdf_to_alpha(sdf, inv_s) -> DiffArray:
    """Discrete opacity from consecutive SDF samples along each ray:
    alpha_i = clamp((phi(d_i) - phi(d_{i+1})) / max(phi(d_i), eps), 0, 1)
    with phi(d) = sigmoid(d * inv_s). The final sample pairs with a linear
    one-step extrapolation, so constant SDF gives exactly zero opacity."""
    sdf = ad.asdiff(sdf)
    last = sdf[:, -1]
    prev = sdf[:, -2]
    extrap = ad.reshape(last + (last - prev), (sdf.shape[0], 1))
    nxt = ad.concat([sdf[:, 1:], extrap], axis=-1)
    phi = ad.sigmoid(sdf * inv_s)
    phi_next = ad.sigmoid(nxt * inv_s)
    alpha = (phi - phi_next) / ad.maximum(phi, PHI_EPS)
    return ad.clamp(alpha, 0.0, 1.0)


def volume_render_ray(alphas, colors, depths: np.ndarray, normals=None,
                      background=(0.0, 0.0, 0.0)) -> dict:
    """Transmittance-weighted compositing along rays.

    alphas [R,S], colors [R,S,3], optional normals [R,S,3] (unnormalized
    blend returned), depths plain [R,S]. Returns dict with color [R,3],
    normal [R,3] or None, depth [R], weight_sum [R], weights [R,S].
    """
    alphas = ad.asdiff(alphas)
    one_minus = ad.clamp(1.0 - alphas, 1e-10, 1.0)
    t_incl = ad.cumprod(one_minus, axis=-1)
    r = alphas.shape[0]
    t_excl = ad.concat([DiffArray(np.ones((r, 1))), t_incl[:, :-1]], axis=-1)
    w = alphas * t_excl

    wsum = ad.summation(w, axis=-1)
    bg = np.asarray(background, dtype=np.float64)
    color = ad.summation(ad.reshape(w, w.shape + (1,)) * colors, axis=1)
    color = color + ad.reshape(1.0 - wsum, (r, 1)) * bg

    depth = ad.summation(w * depths, axis=-1) / ad.maximum(wsum, WSUM_EPS)
    out = {"color": color, "depth": depth, "weight_sum": wsum, "weights": w}
    if normals is not None:
        out["normal"] = ad.summation(
            ad.reshape(w, w.shape + (1,)) * ad.asdiff(normals), axis=1)
    else:
        out["normal"] = None
    return out


def render_rays(field: SdfField, deformation: BijectiveDeformation | None,
                batch: RaySampleBatch, t: float,
                background=(0.0, 0.0, 0.0), want_normals: bool = True) -> dict:
    """Full surface-branch ray rendering at time t.

    Evaluates the composite SDF (with spatial gradients when normals are
    requested), converts to opacities, queries colors and composites.
    Returned dict adds 'sdf' [R,S] and 'points' [R,S,3] for loss reuse.
    """
    r, s_count = batch.depths.shape
    pts = batch.points().reshape(-1, 3)

    if want_normals:
        sdf, feat, grad_c, grad_o, x_c = sdf_eval_with_obs_grad(
            field, deformation, pts, t)
        norm = ad.sqrt(ad.summation(grad_c * grad_c, axis=-1, keepdims=True))
        gdir = grad_c / ad.maximum(norm, 1e-9)
        normals = ad.reshape(grad_o, (r, s_count, 3))
    else:
        x_c = ad.asdiff(pts) if deformation is None \
            else deformation.forward(pts, t)
        sdf, feat = field.sdf(x_c)
        gdir = DiffArray(np.zeros((pts.shape[0], 3)))
        normals = None

    rgb = field.color(x_c, feat, gdir)
    sdf_rs = ad.reshape(sdf, (r, s_count))
    alphas = sdf_to_alpha(sdf_rs, field.inv_s())
    out = volume_render_ray(alphas, ad.reshape(rgb, (r, s_count, 3)),
                            batch.depths, normals=normals,
                            background=background)
    out["sdf"] = sdf_rs
    out["points"] = pts.reshape(r, s_count, 3)
    out["alphas"] = alphas
    return out
