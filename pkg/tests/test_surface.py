import numpy as np
import pytest

from dgns import autodiff as ad
from dgns.autodiff import Param, finite_diff_check
from dgns.deform import BijectiveDeformation
from dgns.surface import (RaySampleBatch, SdfField, guided_interval,
                          guided_sample_ray, ray_box_intersect, render_rays,
                          sdf_eval, sdf_eval_with_obs_grad, sdf_to_alpha,
                          uniform_sample_ray, volume_render_ray)

BOX = ([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


def small_field(seed=0, **kw):
    defaults = dict(hidden=32, feat_dim=7, color_hidden=16, grid_levels=4,
                    grid_table_size=2 ** 10, grid_base_res=4, grid_max_res=32)
    defaults.update(kw)
    return SdfField(*BOX, rng=np.random.default_rng(seed), **defaults)


@pytest.fixture(scope="module")
def sphere_field():
    field = small_field(seed=1)
    loss = field.initialize_sphere(0.5, iters=600, batch=512,
                                   rng=np.random.default_rng(2))
    assert loss < 5e-3
    return field


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------

def test_sphere_init_center_value(sphere_field):
    v = ad.value(sdf_eval(sphere_field, None, np.zeros((1, 3)), 0.0))
    assert abs(v[0] + 0.5) < 0.05


def test_identity_deformation_is_exact_passthrough(sphere_field):
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.9, 0.9, size=(20, 3))
    a = ad.value(sdf_eval(sphere_field, None, x, 0.3))
    b = ad.value(sdf_eval(sphere_field, deform, x, 0.3))
    np.testing.assert_array_equal(a, b)


def test_spatial_gradient_matches_fd(sphere_field):
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.7, 0.7, size=(8, 3))
    _, _, grad = sphere_field.sdf_with_grad(x)
    gv = ad.value(grad)
    h = 1e-5
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        num = (ad.value(sphere_field.sdf(x + d)[0])
               - ad.value(sphere_field.sdf(x - d)[0])) / (2 * h)
        rel = np.abs(gv[:, j] - num) / np.maximum(1.0, np.abs(num))
        assert rel.max() < 1e-3


def test_sphere_gradient_points_outward(sphere_field):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 3))
    x = 0.5 * x / np.linalg.norm(x, axis=-1, keepdims=True)
    _, _, grad = sphere_field.sdf_with_grad(x)
    gv = ad.value(grad)
    gv /= np.linalg.norm(gv, axis=-1, keepdims=True)
    outward = x / np.linalg.norm(x, axis=-1, keepdims=True)
    assert np.mean(np.sum(gv * outward, axis=-1)) > 0.9


def test_obs_grad_chains_deformation_jacobian(sphere_field):
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(7))
    deform.randomize(np.random.default_rng(8), amplitude=0.3)
    rng = np.random.default_rng(9)
    x = rng.uniform(-0.6, 0.6, size=(5, 3))
    _, _, _, grad_o, _ = sdf_eval_with_obs_grad(sphere_field, deform, x, 0.4)
    go = ad.value(grad_o)
    h = 1e-5
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        num = (ad.value(sdf_eval(sphere_field, deform, x + d, 0.4))
               - ad.value(sdf_eval(sphere_field, deform, x - d, 0.4))) / (2 * h)
        np.testing.assert_allclose(go[:, j], num, atol=2e-4)


def test_composite_sdf_gradients_wrt_all_params():
    field = small_field(seed=10, grid_levels=2, grid_table_size=2 ** 6,
                        hidden=8, feat_dim=3, color_hidden=8)
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(11))
    deform.randomize(np.random.default_rng(12), amplitude=0.2)
    rng = np.random.default_rng(13)
    x = rng.uniform(-0.5, 0.5, size=(4, 3))
    params = field.geometry_params + deform.params

    def f():
        return ad.summation(sdf_eval(field, deform, x, 0.6))

    err = finite_diff_check(f, params, h=1e-6, max_coords=25, rng=rng)
    assert err < 1e-4


def test_obs_normal_gradients_wrt_all_params():
    """The observation-space gradient (normals) must itself be exactly
    differentiable w.r.t. field and deformation parameters."""
    field = small_field(seed=14, grid_levels=2, grid_table_size=2 ** 6,
                        hidden=8, feat_dim=3, color_hidden=8)
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(15))
    deform.randomize(np.random.default_rng(16), amplitude=0.2)
    rng = np.random.default_rng(17)
    x = rng.uniform(-0.5, 0.5, size=(3, 3))
    w = rng.normal(size=(3, 3))

    def f():
        _, _, _, grad_o, _ = sdf_eval_with_obs_grad(field, deform, x, 0.2)
        return ad.summation(grad_o * w)

    err = finite_diff_check(f, field.geometry_params + deform.params,
                            h=1e-6, max_coords=25, rng=rng)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# guided sampling
# ---------------------------------------------------------------------------

def test_guided_interval_formula():
    lo, hi = guided_interval(np.array([2.0]), np.array([0.1]), s=3.0,
                             eps_floor=0.01)
    np.testing.assert_allclose([lo[0], hi[0]], [1.7, 2.3], atol=1e-12)


def test_guided_interval_floor_engaged():
    lo, hi = guided_interval(np.array([2.0]), np.array([0.0]), s=3.0,
                             eps_floor=0.01)
    np.testing.assert_allclose([lo[0], hi[0]], [1.99, 2.01], atol=1e-12)


def test_guided_interval_scale_factor_effect():
    lo3, hi3 = guided_interval(np.array([2.0]), np.array([0.1]), 3.0, 0.01)
    lo1, hi1 = guided_interval(np.array([2.0]), np.array([0.1]), 1.0, 0.01)
    assert hi3 - lo3 == pytest.approx(3 * (hi1 - lo1))


def test_ray_box_intersect():
    o = np.array([[0.0, 0.0, -3.0], [0.0, 5.0, -3.0]])
    v = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    tn, tf, hit = ray_box_intersect(o, v, np.array([-1.0, -1, -1]),
                                    np.array([1.0, 1, 1]))
    assert hit[0] and not hit[1]
    assert tn[0] == pytest.approx(2.0)
    assert tf[0] == pytest.approx(4.0)


def test_guided_sampling_monotone_and_in_window(sphere_field):
    rng = np.random.default_rng(20)
    r = 16
    origins = np.tile([0.0, 0.0, -3.0], (r, 1))
    dirs = rng.normal(size=(r, 3)) * 0.05 + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    d_alpha = np.full(r, 2.5)
    valid = np.ones(r, dtype=bool)
    valid[::4] = False
    batch = guided_sample_ray(origins, dirs, d_alpha, valid, s=3.0, n=16,
                              t=0.0, field=sphere_field, deformation=None,
                              rng=rng, eps_floor=0.02)
    assert np.all(np.diff(batch.depths, axis=-1) > 0)
    assert np.all(batch.depths >= batch.lo[:, None] - 1e-12)
    assert np.all(batch.depths <= batch.hi[:, None] + 1e-12)
    # invalid rays fall back to the box intersection window
    tn, tf, _ = ray_box_intersect(origins, dirs, sphere_field.box_min,
                                  sphere_field.box_max)
    np.testing.assert_allclose(batch.lo[~valid], tn[~valid], atol=1e-12)
    np.testing.assert_allclose(batch.hi[~valid], tf[~valid], atol=1e-12)


def test_guided_sampling_needs_two_samples(sphere_field):
    with pytest.raises(ValueError):
        guided_sample_ray(np.zeros((1, 3)), np.array([[0, 0, 1.0]]),
                          np.array([2.0]), np.array([True]), 1.0, 1, 0.0,
                          sphere_field, None, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# opacity conversion
# ---------------------------------------------------------------------------

def test_alpha_zero_far_from_surface():
    sdf = np.linspace(2.0, 1.5, 16)[None, :]
    a = ad.value(sdf_to_alpha(sdf, 20.0))
    assert np.all(a < 1e-6)


def test_alpha_positive_at_crossing():
    sdf = np.array([[0.3, 0.1, -0.1, -0.3]])
    a = ad.value(sdf_to_alpha(sdf, 20.0))
    assert a[0, 1] > 0.1


def test_alpha_exactly_zero_for_constant_sdf():
    sdf = np.full((2, 8), 0.7)
    a = ad.value(sdf_to_alpha(sdf, 20.0))
    assert np.all(a == 0.0)


def test_alpha_gradients_match_fd():
    rng = np.random.default_rng(21)
    sdf = Param(np.sort(rng.uniform(-0.5, 0.5, size=(3, 6)), axis=-1)[:, ::-1].copy(),
                "sdf")
    log_inv_s = Param(np.array([np.log(15.0)]), "lis")
    w = rng.normal(size=(3, 6))

    def f():
        return ad.summation(sdf_to_alpha(sdf, ad.exp(ad.asdiff(log_inv_s))) * w)

    assert finite_diff_check(f, [sdf, log_inv_s], h=1e-6) < 1e-3


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def test_volume_render_single_opaque_sample():
    out = volume_render_ray(np.array([[1.0]]),
                            np.array([[[0.2, 0.7, 0.1]]]),
                            np.array([[2.5]]),
                            normals=np.array([[[0.0, 0.0, 1.0]]]))
    np.testing.assert_allclose(ad.value(out["color"]), [[0.2, 0.7, 0.1]],
                               atol=1e-9)
    assert ad.value(out["depth"])[0] == pytest.approx(2.5)
    assert ad.value(out["weight_sum"])[0] == pytest.approx(1.0, abs=1e-9)


def test_volume_render_empty_ray_gives_background():
    out = volume_render_ray(np.zeros((1, 4)), np.ones((1, 4, 3)),
                            np.linspace(1, 2, 4)[None],
                            background=(0.3, 0.2, 0.1))
    np.testing.assert_allclose(ad.value(out["color"]), [[0.3, 0.2, 0.1]])
    assert ad.value(out["weight_sum"])[0] == 0.0


def test_volume_render_two_sample_hand_compositing():
    # w = (0.5, 0.25) from alphas (0.5, 0.5)
    alphas = np.array([[0.5, 0.5]])
    colors = np.array([[[1.0, 0, 0], [0, 0, 1.0]]])
    out = volume_render_ray(alphas, colors, np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(ad.value(out["color"]), [[0.5, 0.0, 0.25]],
                               atol=1e-12)


def test_weight_sum_in_unit_interval():
    rng = np.random.default_rng(22)
    alphas = rng.uniform(0, 1, size=(50, 12))
    out = volume_render_ray(alphas, rng.uniform(0, 1, (50, 12, 3)),
                            rng.uniform(1, 3, (50, 12)))
    ws = ad.value(out["weight_sum"])
    assert np.all(ws >= 0.0) and np.all(ws <= 1.0 + 1e-12)


def test_volume_render_gradients_match_fd():
    rng = np.random.default_rng(23)
    alphas = Param(rng.uniform(0.05, 0.8, size=(2, 5)), "alphas")
    colors = Param(rng.uniform(0, 1, size=(2, 5, 3)), "colors")
    depths = rng.uniform(1, 3, size=(2, 5))
    w = rng.normal(size=(2, 3))

    def f():
        out = volume_render_ray(alphas, colors, depths)
        return ad.summation(out["color"] * w) + ad.summation(out["weight_sum"])

    assert finite_diff_check(f, [alphas, colors], h=1e-6) < 1e-3


# ---------------------------------------------------------------------------
# end-to-end ray rendering on the fitted sphere
# ---------------------------------------------------------------------------

def test_sphere_expected_depth_near_analytic(sphere_field):
    """Rays through the silhouette interior: expected depth within 2% of
    the analytic ray-sphere intersection for >= 95% of them."""
    rng = np.random.default_rng(24)
    n = 80
    # aim at points well inside the r=0.5 sphere silhouette
    targets = rng.uniform(-0.25, 0.25, size=(n, 2))
    origins = np.tile([0.0, 0.0, -3.0], (n, 1))
    dirs = np.stack([targets[:, 0], targets[:, 1], np.full(n, 3.0)], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    # analytic first intersection with the sphere |x| = 0.5
    oc = origins
    b = np.sum(oc * dirs, axis=-1)
    disc = b * b - (np.sum(oc * oc, axis=-1) - 0.25)
    t_hit = -b - np.sqrt(disc)

    batch = uniform_sample_ray(origins, dirs, 96, sphere_field,
                               np.random.default_rng(25))
    out = render_rays(sphere_field, None, batch, 0.0, want_normals=False)
    depth = ad.value(out["depth"])
    ws = ad.value(out["weight_sum"])
    ok = ws > 0.5
    assert ok.mean() > 0.95
    rel = np.abs(depth[ok] - t_hit[ok]) / t_hit[ok]
    assert np.mean(rel < 0.02) >= 0.95


def test_render_rays_full_chain_gradients():
    """Every parameter of the composite (field + deformation) gets an exact
    gradient through sampling-free ray rendering."""
    field = small_field(seed=26, grid_levels=2, grid_table_size=2 ** 6,
                        hidden=8, feat_dim=3, color_hidden=8)
    deform = BijectiveDeformation(n_blocks=2, width=8,
                                  rng=np.random.default_rng(27))
    deform.randomize(np.random.default_rng(28), amplitude=0.15)
    rng = np.random.default_rng(29)
    r, s_count = 2, 4
    batch = RaySampleBatch(
        origins=np.tile([0.0, 0.0, -2.0], (r, 1)),
        dirs=np.tile([0.0, 0.0, 1.0], (r, 1)),
        depths=np.sort(rng.uniform(1.0, 3.0, size=(r, s_count)), axis=-1),
        guided=np.ones(r, dtype=bool), lo=np.ones(r), hi=np.full(r, 3.0),
        hits_box=np.ones(r, dtype=bool))
    w = rng.normal(size=(r, 3))

    def f():
        out = render_rays(field, deform, batch, 0.5, want_normals=True)
        return (ad.summation(out["color"] * w)
                + ad.summation(out["normal"] * 0.1)
                + ad.summation(out["weight_sum"]))

    params = field.params + deform.params
    err = finite_diff_check(f, params, h=1e-6, max_coords=15,
                            rng=np.random.default_rng(30))
    assert err < 1e-3
