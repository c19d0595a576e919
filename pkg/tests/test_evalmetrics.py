import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facedapt.evalmetrics import (ReportRow, comparison_report, degrade_resolution, marker_reprojection_error,
                                  overlay_strip, read_report, relative_reprojection_error, stability,
                                  write_report)
from facedapt.synthdata import DomainSpec, generate_wild
from facedapt.trainer import TrainConfig, arm_weights
from tinyscene import SIZE, tiny_encoder


def test_stability_collinear_is_one():
    g = np.array([[[0.0, 0, 0]], [[0.5, 0.5, 0.5]], [[1.0, 1, 1]]])
    assert abs(stability(g).mean - 1.0) <= 1e-9


def test_stability_jitter_case():
    g = np.array([0.0, 1.0, 0.5])[:, None, None]
    assert abs(stability(g).mean - 3.0) <= 1e-9


def test_stability_stationary_vertex_scores_one():
    g = np.zeros((3, 2, 3))
    g[:, 1, 0] = [0, 1, 2]   # second vertex moves uniformly
    r = stability(g)
    assert r.mean == pytest.approx(1.0)


def test_stability_return_trip_is_capped():
    g = np.array([0.0, 1.0, 0.0])[:, None, None]
    assert stability(g).mean == 100.0


def test_stability_needs_three_frames():
    with pytest.raises(ValueError):
        stability(np.zeros((2, 4, 3)))


def test_stability_per_frame_count():
    r = stability(np.random.default_rng(0).standard_normal((10, 5, 3)))
    assert r.per_frame.shape == (8,)
    assert r.mean == pytest.approx(r.per_frame.mean())


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_stability_at_least_one(seed):
    g = np.random.default_rng(seed).standard_normal((6, 7, 3))
    assert stability(g).mean >= 1.0 - 1e-12


def test_marker_error_examples(rng):
    gt = rng.standard_normal((4, 5, 2)) * 30
    assert marker_reprojection_error(gt, gt) == 0
    assert marker_reprojection_error(gt + [3, 4], gt) == pytest.approx(5.0)
    with_depth = np.concatenate([gt, rng.standard_normal((4, 5, 1)) * 100], axis=-1)
    assert marker_reprojection_error(with_depth, gt) == 0
    with pytest.raises(ValueError):
        marker_reprojection_error(gt[:3], gt)


def test_relative_error_examples(rng):
    g = rng.standard_normal((3, 10, 3))
    assert relative_reprojection_error(g, g) == 0
    assert relative_reprojection_error(g + [0, 2, 9], g) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        relative_reprojection_error(g[:2], g)


def test_degrade_resolution(rng):
    imgs = rng.random((2, 32, 32, 3))
    np.testing.assert_array_equal(degrade_resolution(imgs, 32), imgs)
    low = degrade_resolution(imgs, 8)
    assert low.shape == imgs.shape and np.all(np.isfinite(low))
    # detail is lost: high-frequency energy drops
    assert np.abs(np.diff(low, axis=1)).mean() < 0.5 * np.abs(np.diff(imgs, axis=1)).mean()


def test_overlay_strip():
    ov = np.arange(10)[:, None, None, None] * np.ones((10, 4, 5, 3))
    strip = overlay_strip(ov, count=3)
    assert strip.shape == (4, 15, 3)
    assert strip[0, 0, 0] == 0 and strip[0, -1, 0] == 9


def test_report_round_trip(tmp_path):
    rows = [ReportRow("no_DA", 1.5, 6.25), ReportRow("full_DA", 1.2, float("nan"))]
    write_report(tmp_path / "r.csv", rows)
    back = read_report(tmp_path / "r.csv")
    assert [r.arm for r in back] == ["no_DA", "full_DA"]
    assert back[0].stability == 1.5 and np.isnan(back[1].reprojection)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "arm,stability,reprojection"


def test_comparison_report_rows(tmp_path):
    from tinyscene import tiny_decoder

    dec = tiny_decoder()
    wild = generate_wild(dec, DomainSpec(), frames=6, seed=2, image_size=SIZE)
    enc = tiny_encoder(dec)
    cfg = TrainConfig.for_adaptation(epochs=1)
    arms = {"a": cfg, "b": cfg, "none": TrainConfig.for_adaptation(weights=arm_weights("none"))}
    rows = comparison_report(enc, dec, wild, arms, out_dir=tmp_path)
    assert len(rows) == 3
    assert rows[0] == ReportRow("a", rows[1].stability, rows[1].reprojection)
    assert (tmp_path / "strip_none.ppm").exists() and len(read_report(tmp_path / "report.csv")) == 3
