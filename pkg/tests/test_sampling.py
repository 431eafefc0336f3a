import numpy as np
import pytest

from soi import simworld as sw
from soi.bpa import BpaConfig
from soi.errors import PipelineError
from soi.mesh import is_manifold
from soi.metrics import cd_cm
from soi.pointcloud import ColoredPointCloud, HsvRange, RigidTransform
from soi.sampling import (GpsConfig, ParticleSet, gps_pipeline, gps_sample,
                          load_particles_csv, lps_sample, save_particles_csv)


@pytest.fixture(scope="module")
def rim():
    return sw.make_rim()


@pytest.fixture(scope="module")
def cams():
    return sw.default_cameras()


def tube_deviation(points, loop, r_tube=0.008):
    """|distance to the swept tube surface| per point."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    ab = b - a
    ap = points[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(-1) / (ab * ab).sum(-1)[None], 0, 1)
    foot = a[None] + t[..., None] * ab[None]
    d = np.sqrt(((points[:, None, :] - foot) ** 2).sum(-1)).min(axis=1)
    return np.abs(d - r_tube)


class TestConfig:
    def test_min_particles(self):
        with pytest.raises(ValueError, match="n_particles"):
            GpsConfig(n_particles=7)

    def test_voxel_positive(self):
        with pytest.raises(ValueError):
            GpsConfig(v_s=0.0)

    def test_particles_must_be_finite(self):
        with pytest.raises(ValueError):
            ParticleSet(np.array([[0.0, np.inf, 0.0]]))


class TestGps:
    def test_noiseless_ring_recovered(self, rim, cams):
        views = sw.render_views(rim, noise_sigma=0.0, occlusion=0.0, seed=1,
                                n_surface=6000)
        cfg = GpsConfig(v_s=0.002, bpa=BpaConfig((0.005,)))
        ps, mesh = gps_pipeline(views, cams, cfg)
        assert len(ps) == cfg.n_particles
        assert is_manifold(mesh)
        assert tube_deviation(ps.positions, rim.positions).max() < 1e-3

    def test_occluded_frames_within_budget(self, rim, cams):
        gt = sw.true_particles(rim, 64)
        for s in range(2):
            views = sw.render_views(rim, noise_sigma=0.002, occlusion=0.4,
                                    seed=50 + s)
            ps, mesh = gps_pipeline(views, cams, GpsConfig(seed=s))
            assert len(ps) == 64
            assert is_manifold(mesh) and len(mesh.triangles) > 0
            assert cd_cm(ps.positions, gt) <= 2.2

    def test_deterministic(self, rim, cams):
        views = sw.render_views(rim, seed=7)
        a = gps_sample(views, cams, GpsConfig(seed=3))
        b = gps_sample(views, cams, GpsConfig(seed=3))
        assert np.array_equal(a.positions, b.positions)

    def test_all_empty_views_fail_at_registration(self, cams):
        empty = ColoredPointCloud(np.empty((0, 3)), np.empty((0, 3)), "cam0")
        with pytest.raises(PipelineError) as e:
            gps_sample([empty] * 4, cams, GpsConfig())
        assert e.value.stage == "register"

    def test_unmatched_color_band_fails_at_filter(self, rim, cams):
        views = sw.render_views(rim, seed=2)
        cfg = GpsConfig(hsv=HsvRange(300.0, 320.0, s_min=0.5))
        with pytest.raises(PipelineError) as e:
            gps_sample(views, cams, cfg)
        assert e.value.stage == "hsv_filter"


class TestLps:
    def test_output_size_and_determinism(self, rim, cams):
        views = sw.render_views(rim, noise_sigma=0.002, occlusion=0.4, seed=9)
        a = lps_sample(views, cams, GpsConfig(seed=1))
        b = lps_sample(views, cams, GpsConfig(seed=1))
        assert len(a) == 64
        assert np.array_equal(a.positions, b.positions)

    def test_occluded_comparison_with_gps(self, rim, cams):
        gt = sw.true_particles(rim, 64)
        ratios = []
        for s in range(2):
            views = sw.render_views(rim, noise_sigma=0.002, occlusion=0.4,
                                    seed=70 + s)
            g = cd_cm(gps_sample(views, cams, GpsConfig(seed=s)).positions, gt)
            l = cd_cm(lps_sample(views, cams, GpsConfig(seed=s)).positions, gt)
            ratios.append(g / l)
        assert np.mean(ratios) <= 1.3

    def test_coplanar_view_lifted(self, cams):
        # one flat view: a colored square sheet in the z=0 plane
        g = np.linspace(-0.05, 0.05, 12)
        xy = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        pts = np.column_stack([xy, np.zeros(len(xy))])
        colors = np.tile([30.0, 0.9, 0.9], (len(pts), 1))
        view = ColoredPointCloud(pts, colors, "cam0")
        eye = RigidTransform(np.eye(3), np.zeros(3))
        ps = lps_sample([view], [eye], GpsConfig(v_s=0.004))
        assert len(ps) == 64
        assert np.abs(ps.positions[:, 2]).max() < 1e-9
        assert np.abs(ps.positions[:, :2]).max() <= 0.05 + 1e-9

    def test_convex_blob_single_view_comparable(self, cams):
        # complete single view of a convex surface: both routes should agree
        rng = np.random.default_rng(3)
        dirs = rng.normal(size=(1500, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * 0.06
        colors = np.tile([30.0, 0.9, 0.9], (len(pts), 1))
        view = ColoredPointCloud(pts, colors, "cam0")
        eye = RigidTransform(np.eye(3), np.zeros(3))
        cfg = GpsConfig(v_s=0.004)
        gt = dirs[:200] * 0.06
        g = cd_cm(gps_sample([view], [eye], cfg).positions, gt)
        l = cd_cm(lps_sample([view], [eye], cfg).positions, gt)
        assert g < 2.0 and l < 2.0
        assert max(g, l) / min(g, l) < 2.0

    def test_all_empty_views_fail(self, cams):
        empty = ColoredPointCloud(np.empty((0, 3)), np.empty((0, 3)), "cam0")
        with pytest.raises(PipelineError) as e:
            lps_sample([empty] * 4, cams, GpsConfig())
        assert e.value.stage == "register"


class TestCsv:
    def test_roundtrip(self, tmp_path):
        ps = ParticleSet(np.random.default_rng(0).normal(size=(64, 3)))
        path = tmp_path / "p.csv"
        save_particles_csv(path, ps)
        back = load_particles_csv(path)
        np.testing.assert_allclose(back.positions, ps.positions, atol=1e-8)

    def test_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_particles_csv(path)
