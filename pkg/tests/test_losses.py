import numpy as np
import pytest
from skimage.metrics import structural_similarity

from dgns import autodiff as ad
from dgns.autodiff import Param, finite_diff_check
from dgns.deform import BijectiveDeformation
from dgns.losses import (LossWeights, eikonal_term, image_loss_dg, l1_loss,
                         normal_consistency, ssim, surface_losses_dn,
                         total_loss)
from dgns.rasterizer import RenderConfig, rasterize
from dgns.surface import SdfField


def test_loss_weights_validation():
    LossWeights()
    with pytest.raises(ValueError):
        LossWeights(lambda_i=1.5)
    with pytest.raises(ValueError):
        LossWeights(lambda_sdf=-0.1)


def test_l1_examples():
    a = np.full((4, 4, 3), 0.6)
    b = np.full((4, 4, 3), 0.5)
    assert float(ad.value(l1_loss(a, b)).item()) == pytest.approx(0.1)
    assert float(ad.value(l1_loss(a, a)).item()) == 0.0


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------

def test_ssim_identical_images_is_one():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(24, 24, 3))
    assert float(ad.value(ssim(img, img)).item()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_skimage_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, size=(32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    mine = float(ad.value(ssim(a, b)).item())
    ref = structural_similarity(a, b, win_size=11, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=2)
    assert mine == pytest.approx(ref, abs=1e-7)


def test_ssim_size_mismatch_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_ssim_gradient_matches_fd():
    rng = np.random.default_rng(2)
    a = Param(rng.uniform(0.2, 0.8, size=(14, 14, 3)), "img")
    b = rng.uniform(0, 1, size=(14, 14, 3))
    err = finite_diff_check(lambda: ssim(a, b), [a], h=1e-6, max_coords=40,
                            rng=rng)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# normal consistency
# ---------------------------------------------------------------------------

def test_normal_consistency_zero_at_equality():
    n = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    v = float(ad.value(normal_consistency(n, n, np.array([True, True]))).item())
    assert v == pytest.approx(0.0, abs=1e-12)


def test_normal_consistency_normalizes_rendered():
    # a short blended normal pointing the right way still scores zero
    n = np.array([[0.0, 0.0, 0.4]])
    t = np.array([[0.0, 0.0, 1.0]])
    v = float(ad.value(normal_consistency(n, t, np.array([True]))).item())
    assert v == pytest.approx(0.0, abs=1e-9)


def test_normal_consistency_opposite_is_four():
    # L1 term |(-n) - n| sums to 2, angular |1 - (-1)| = 2
    n = np.array([[0.0, 0.0, -1.0]])
    t = np.array([[0.0, 0.0, 1.0]])
    v = float(ad.value(normal_consistency(n, t, np.array([True]))).item())
    assert v == pytest.approx(4.0, abs=1e-9)


def test_normal_consistency_empty_mask():
    n = np.zeros((3, 3))
    assert float(ad.value(normal_consistency(n, n, np.zeros(3, bool))).item()) == 0.0


# ---------------------------------------------------------------------------
# branch losses
# ---------------------------------------------------------------------------

def _render_output(img_size=16, seed=3):
    rng = np.random.default_rng(seed)
    n = 12
    mean2d = rng.uniform(2, img_size - 2, size=(n, 2))
    cov2d = np.tile([3.0, 0.0, 3.0], (n, 1))
    out = rasterize(mean2d, cov2d, rng.uniform(0.4, 0.9, n),
                    rng.uniform(0, 1, (n, 3)),
                    np.tile([0.0, 0.0, -1.0], (n, 1)),
                    rng.uniform(1, 3, n), np.ones(n, bool),
                    img_size, img_size, RenderConfig())
    return out


def test_image_loss_perfect_fit_is_zero():
    out = _render_output()
    target = ad.value(out.color).copy()
    normals = ad.value(out.normal).copy()
    norms = np.linalg.norm(normals, axis=-1, keepdims=True)
    unit = np.where(norms > 1e-9, normals / np.maximum(norms, 1e-9), 0.0)
    w = LossWeights()
    loss, parts = image_loss_dg(out, target, w, target_normals=unit)
    assert float(ad.value(loss).item()) == pytest.approx(0.0, abs=1e-9)
    assert parts["dg_l1"] == pytest.approx(0.0, abs=1e-12)
    assert parts["dg_ssim"] == pytest.approx(0.0, abs=1e-12)


def test_image_loss_pure_l1_case():
    out = _render_output()
    target = np.clip(ad.value(out.color) + 0.1, None, 2.0)
    w = LossWeights(lambda_i=1.0, lambda_gn=0.0)
    loss, _ = image_loss_dg(out, target, w)
    assert float(ad.value(loss).item()) == pytest.approx(0.1, abs=1e-12)


def test_image_loss_size_mismatch():
    out = _render_output()
    with pytest.raises(ValueError):
        image_loss_dg(out, np.zeros((8, 8, 3)), LossWeights())


def small_field(seed=0):
    return SdfField([-1, -1, -1], [1, 1, 1], hidden=16, feat_dim=3,
                    color_hidden=8, grid_levels=2, grid_table_size=2 ** 8,
                    grid_base_res=4, grid_max_res=8,
                    rng=np.random.default_rng(seed))


def test_surface_loss_on_surface_point_contributes_zero():
    field = small_field(seed=4)
    field.initialize_sphere(0.5, iters=400, rng=np.random.default_rng(5))
    # points on the fitted zero-level set: |F| small
    rng = np.random.default_rng(6)
    p = rng.normal(size=(32, 3))
    p = 0.5 * p / np.linalg.norm(p, axis=-1, keepdims=True)
    from dgns.surface import sdf_eval
    vals = ad.value(sdf_eval(field, None, p, 0.0))
    assert np.mean(np.abs(vals)) < 0.03


def test_eikonal_near_one_for_analytic_like_field():
    field = small_field(seed=7)
    field.initialize_sphere(0.4, iters=600, rng=np.random.default_rng(8))
    rng = np.random.default_rng(9)
    x = rng.uniform(-0.8, 0.8, size=(200, 3))
    keep = np.abs(np.linalg.norm(x, axis=-1) - 0.4) > 0.1  # away from kink at center
    term = float(ad.value(eikonal_term(field, x[keep])).item())
    assert term < 0.2


def test_surface_losses_parts_and_warning(caplog):
    field = small_field(seed=10)
    ray_out = {
        "color": ad.asdiff(np.full((4, 3), 0.5)),
        "normal": ad.asdiff(np.tile([0.0, 0.0, 1.0], (4, 1))),
        "weight_sum": ad.asdiff(np.ones(4)),
    }
    target = np.full((4, 3), 0.5)
    tn = np.tile([0.0, 0.0, 1.0], (4, 1))
    with caplog.at_level("WARNING"):
        loss, parts = surface_losses_dn(ray_out, target, field, None, 0.0,
                                        LossWeights(), filtered_points=None,
                                        target_normals=tn)
    assert "filtered-point" in caplog.text
    assert parts["dn_l1"] == pytest.approx(0.0, abs=1e-12)
    assert parts["dn_normal"] == pytest.approx(0.0, abs=1e-9)
    assert parts["dn_sdf"] == 0.0


def test_surface_loss_gradients_match_fd():
    """Full surface-branch loss vs central differences on every parameter
    group (field + deformation)."""
    from dgns.surface import RaySampleBatch, render_rays
    field = small_field(seed=11)
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(12))
    deform.randomize(np.random.default_rng(13), amplitude=0.15)
    rng = np.random.default_rng(14)
    r, s = 2, 4
    batch = RaySampleBatch(
        origins=np.tile([0.0, 0.0, -2.0], (r, 1)),
        dirs=np.tile([0.0, 0.0, 1.0], (r, 1)),
        depths=np.sort(rng.uniform(1.2, 2.8, size=(r, s)), axis=-1),
        guided=np.ones(r, bool), lo=np.ones(r), hi=np.full(r, 3.0),
        hits_box=np.ones(r, bool))
    target = rng.uniform(0, 1, size=(r, 3))
    tn = rng.normal(size=(r, 3))
    tn /= np.linalg.norm(tn, axis=-1, keepdims=True)
    fpts = rng.uniform(-0.5, 0.5, size=(5, 3))
    epts = rng.uniform(-0.8, 0.8, size=(6, 3))

    def f():
        out = render_rays(field, deform, batch, 0.4, want_normals=True)
        # force the mask on: tiny weight sums would otherwise gate the term
        mask = np.ones(r, bool)
        loss, _ = surface_losses_dn(out, target, field, deform, 0.4,
                                    LossWeights(), filtered_points=fpts,
                                    eikonal_points=epts, target_normals=tn,
                                    normal_valid=mask)
        return loss

    # weight_sum > 0.5 gating inside: bypass by checking gradient of the
    # loss as implemented (mask recomputed identically at perturbed points)
    err = finite_diff_check(f, field.params + deform.params, h=1e-6,
                            max_coords=12, rng=np.random.default_rng(15))
    assert err < 1e-3


def test_total_loss_addition_and_gradient_split():
    a = Param(np.array([1.5]), "a")
    b = Param(np.array([0.25]), "b")
    from dgns.autodiff import Tape, tape_backward
    with Tape():
        t = total_loss(ad.summation(a * 1.0), ad.summation(b * 1.0))
        assert float(ad.value(t).item()) == pytest.approx(1.75)
        g = tape_backward(t)
        assert g.get(a)[0] == 1.0
        assert g.get(b)[0] == 1.0
    assert float(ad.value(total_loss(0.0, 0.0)).item()) == 0.0
