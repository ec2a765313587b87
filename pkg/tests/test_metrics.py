import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgns.metrics import (MetricReport, chamfer_distance,
                          earth_mover_distance, psnr, ssim_value)


# ---------------------------------------------------------------------------
# psnr / ssim
# ---------------------------------------------------------------------------

def test_psnr_identical_capped():
    img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_constant_offset_closed_form():
    a = np.full((8, 8, 3), 0.5)
    b = np.full((8, 8, 3), 0.6)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_monotone_in_mse():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (12, 12, 3))
    vals = [psnr(a, np.clip(a + d, 0, 1.5)) for d in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_value_self_is_one():
    img = np.random.default_rng(2).uniform(0, 1, (16, 16, 3))
    assert ssim_value(img, img) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def test_chamfer_identical_zero():
    pts = np.random.default_rng(3).normal(size=(100, 3))
    assert chamfer_distance(pts, pts) == 0.0
    perm = pts[np.random.default_rng(4).permutation(100)]
    assert chamfer_distance(pts, perm) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=40), st.integers(0, 2 ** 31 - 1))
def test_chamfer_symmetric_and_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 3))
    b = rng.normal(size=(n + 3, 3))
    ab = chamfer_distance(a, b)
    ba = chamfer_distance(b, a)
    assert ab == pytest.approx(ba, rel=1e-12)
    assert ab >= 0.0


def test_chamfer_known_value():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[0.0, 0.5, 0], [1.0, 0.5, 0]])
    assert chamfer_distance(a, b) == pytest.approx(1.0)  # 0.5 + 0.5


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((4, 3)))


# ---------------------------------------------------------------------------
# emd
# ---------------------------------------------------------------------------

def test_emd_identical_cloud_near_zero():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(300, 3))
    perm = pts[rng.permutation(300)]
    value, meta = earth_mover_distance(pts, perm)
    diag = meta["diag"]
    assert value < 1e-3 * diag


def test_emd_translation_cost():
    # all-mass translation by d costs ~d under any plan
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 1, size=(200, 3))
    moved = pts + [0.5, 0.0, 0.0]
    value, _ = earth_mover_distance(pts, moved, seed=1)
    assert value == pytest.approx(0.5, rel=0.05)


def test_emd_subsamples_large_clouds_deterministically():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3000, 3))
    b = rng.normal(size=(2500, 3))
    v1, meta = earth_mover_distance(a, b, seed=9, iters=50)
    v2, _ = earth_mover_distance(a, b, seed=9, iters=50)
    assert meta["n_points"] == 1024
    assert v1 == v2


def test_emd_empty_rejected():
    with pytest.raises(ValueError):
        earth_mover_distance(np.zeros((0, 3)), np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_roundtrip(tmp_path):
    rep = MetricReport()
    rep.add_frame(0, 0.0, 25.0, 0.9)
    rep.add_frame(1, 0.5, 27.0, 0.95)
    rep.add_timestep(0.0, cd=0.04, emd=0.01)
    jpath = tmp_path / "report.json"
    cpath = tmp_path / "report.csv"
    rep.to_json(str(jpath))
    rep.to_csv(str(cpath))
    data = json.loads(jpath.read_text())
    assert data["aggregates"]["mean_psnr"] == pytest.approx(26.0)
    assert "cd_convention" in data["metadata"]
    assert len(cpath.read_text().splitlines()) >= 4


def test_report_validates_ranges():
    rep = MetricReport()
    with pytest.raises(ValueError):
        rep.add_frame(0, 0.0, -1.0, 0.5)
    with pytest.raises(ValueError):
        rep.add_frame(0, 0.0, 20.0, 1.5)
