import os

import numpy as np
import pytest

from soi import simworld as sw
from soi.pointcloud import RigidTransform


def mirror_map(m):
    """Node index map for the x -> -x reflection of the rest ring."""
    return (m // 2 - np.arange(m)) % m


def seg_distances(points, loop):
    """Distance from each point to a closed polyline (min over segments)."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    ab = b - a                                      # (M, 3)
    ap = points[:, None, :] - a[None, :, :]         # (N, M, 3)
    t = (ap * ab[None]).sum(-1) / (ab * ab).sum(-1)[None]
    t = np.clip(t, 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    return np.sqrt(((points[:, None, :] - foot) ** 2).sum(-1)).min(axis=1)


class TestRimBasics:
    def test_rest_is_equilibrium(self):
        m = sw.make_rim()
        assert sw.spring_energy(m) < 1e-20
        assert np.array_equal(sw.settle(m), m.rest_positions)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            sw.make_rim(m=4)
        with pytest.raises(ValueError):
            sw.make_rim(m=16, anchor_arc=8)

    def test_stiffness_validation(self):
        with pytest.raises(ValueError):
            sw.make_rim(k_ring=0.0)

    def test_action_vector_roundtrip(self):
        a = sw.BimanualAction([0.01, -0.002, 0.003, 0.1],
                              [0.0, 0.004, -0.001, -0.2])
        v = a.pair_vector()
        assert v[3] == pytest.approx(0.1 * sw.HANDLE_RADIUS)
        back = sw.BimanualAction.from_pair_vector(v)
        np.testing.assert_allclose(back.arm0, a.arm0, atol=1e-15)
        np.testing.assert_allclose(back.arm1, a.arm1, atol=1e-15)

    def test_action_must_be_finite(self):
        with pytest.raises(ValueError):
            sw.BimanualAction([np.nan, 0, 0, 0], np.zeros(4))


class TestStep:
    def test_zero_action_unchanged(self):
        m = sw.make_rim()
        out = sw.step(m, sw.BimanualAction.zero())
        assert np.array_equal(out.positions, m.positions)

    def test_bound_violation_raises(self):
        m = sw.make_rim()
        with pytest.raises(ValueError, match="bound"):
            sw.step(m, sw.BimanualAction([0.05, 0, 0, 0], np.zeros(4)))

    def test_symmetric_pull_mirror_symmetry(self):
        m = sw.make_rim()
        out = sw.step(m, sw.BimanualAction([0.012, 0, 0, 0],
                                           [-0.012, 0, 0, 0]))
        p = out.positions
        q = p[mirror_map(out.m)] * np.array([-1.0, 1.0, 1.0])
        assert np.abs(p - q).max() < 1e-6

    def test_energy_never_increases_in_settle(self):
        m = sw.make_rim()
        from dataclasses import replace
        moved = replace(
            m,
            pose0=RigidTransform(m.pose0.rotation,
                                 m.pose0.translation + [0.015, 0, 0.005]),
        )
        before = sw.spring_energy(moved)
        settled = sw.settle(moved)
        assert sw.spring_energy(moved, settled) <= before

    def test_z_lift_raises_every_particle(self):
        m = sw.make_rim()
        lift = sw.BimanualAction([0, 0, 0.01, 0], [0, 0, 0.01, 0])
        out = sw.step(m, lift)
        dz = out.positions[:, 2] - m.positions[:, 2]
        assert dz.min() > 0.009

    def test_opposite_pull_elongates(self):
        m = sw.make_rim()
        out = sw.step(m, sw.BimanualAction([0.01, 0, 0, 0],
                                           [-0.01, 0, 0, 0]))
        assert np.ptp(out.positions[:, 0]) > np.ptp(m.positions[:, 0])

    def test_anchor_arcs_stay_rigid(self):
        m = sw.make_rim()
        rng = np.random.default_rng(4)
        for _ in range(5):
            v = rng.normal(size=8)
            v = v / np.linalg.norm(v) * 0.015
            m = sw.step(m, sw.BimanualAction.from_pair_vector(v))
        for anchors in (m.anchors0, m.anchors1):
            cur = m.positions[anchors]
            ref = m.rest_positions[anchors]
            dc = np.linalg.norm(cur[:, None] - cur[None, :], axis=-1)
            dr = np.linalg.norm(ref[:, None] - ref[None, :], axis=-1)
            assert np.abs(dc - dr).max() < 1e-9

    def test_settle_deterministic_and_idempotent(self):
        m = sw.make_rim()
        out = sw.step(m, sw.BimanualAction([0.008, 0.002, 0.004, 0.1],
                                           [-0.006, 0.003, 0, -0.1]))
        again = sw.step(m, sw.BimanualAction([0.008, 0.002, 0.004, 0.1],
                                             [-0.006, 0.003, 0, -0.1]))
        assert np.array_equal(out.positions, again.positions)
        assert np.array_equal(sw.settle(out), out.positions)

    def test_rotation_bends_near_rotated_handle(self):
        m = sw.make_rim()
        out = sw.step(m, sw.BimanualAction([0, 0, 0, 0.3], np.zeros(4)))
        moved = np.linalg.norm(out.positions - m.positions, axis=1)
        assert moved.max() > 1e-4
        # anchors of arm 1 were not commanded: they stay put
        assert moved[m.anchors1].max() < 1e-12


class TestParticles:
    def test_every_other_node(self):
        m = sw.make_rim()
        p = sw.true_particles(m, 64)
        assert p.shape == (64, 3)
        assert np.array_equal(p, m.positions[::2])

    def test_count_must_divide(self):
        m = sw.make_rim()
        with pytest.raises(ValueError, match="divide"):
            sw.true_particles(m, 63)


class TestRender:
    def test_noiseless_clouds_lie_on_scene_surfaces(self):
        m = sw.make_rim()
        views = sw.render_views(m, noise_sigma=0.0, occlusion=0.0, seed=5,
                                r_tube=0.008)
        cams = sw.default_cameras()
        hp = sw.handle_positions(m)
        for v, cam in zip(views, cams):
            world = cam.apply(v.positions)
            hue = v.colors[:, 0]
            rim = world[np.abs(hue - sw.RIM_HUE) < 1]
            d = seg_distances(rim, m.positions)
            # outer bound exact; slight inner slack where tube sections meet
            assert d.max() < 0.008 + 1e-9
            assert d.min() > 0.008 - 1e-5
            grip = world[np.abs(hue - sw.GRIPPER_HUE) < 1]
            centers = hp + [0, 0, sw.HANDLE_RADIUS]
            dg = np.linalg.norm(grip[:, None] - centers[None], axis=-1).min(1)
            assert np.abs(dg - 0.02).max() < 1e-9
            tab = world[np.abs(hue - sw.TABLE_HUE) < 1]
            assert np.abs(tab[:, 2] + 0.15).max() < 1e-12

    def test_seeded_renders_bit_identical(self):
        m = sw.make_rim()
        a = sw.render_views(m, seed=9)
        b = sw.render_views(m, seed=9)
        for va, vb in zip(a, b):
            assert np.array_equal(va.positions, vb.positions)
            assert np.array_equal(va.colors, vb.colors)
        c = sw.render_views(m, seed=10)
        assert not np.array_equal(a[0].positions, c[0].positions)

    def test_occlusion_removes_a_sector(self):
        m = sw.make_rim()
        full = sw.render_views(m, noise_sigma=0.0, occlusion=0.0, seed=2)
        occ = sw.render_views(m, noise_sigma=0.0, occlusion=0.4, seed=2)
        for f, o in zip(full, occ):
            assert len(o.positions) < len(f.positions)

    def test_camera_frames_are_labeled(self):
        m = sw.make_rim()
        views = sw.render_views(m, seed=0)
        assert [v.frame_id for v in views] == ["cam0", "cam1", "cam2", "cam3"]


class TestTargets:
    def test_oval_extents_ordered(self):
        lo = sw.make_target("LO")
        ro = sw.make_target("RO")
        so = sw.make_target("SO")
        assert np.ptp(lo[:, 0]) > np.ptp(ro[:, 0]) > np.ptp(so[:, 0])

    def test_offset_applies(self):
        base = sw.make_target("RO")
        moved = sw.make_target("RO", offset=(0.1, -0.05, 0.02))
        np.testing.assert_allclose(
            moved - base, np.tile([0.1, -0.05, 0.02], (64, 1)), atol=1e-12)

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            sw.make_target("XL")

    def test_explicit_spec_particle_count(self):
        spec = sw.TargetSpec(particles=np.zeros((10, 3)))
        with pytest.raises(ValueError):
            spec.resolve(n=64)
        ok = sw.TargetSpec(particles=np.zeros((64, 3)))
        assert ok.resolve(n=64).shape == (64, 3)


@pytest.fixture(scope="module")
def small():
    return sw.generate_dataset(3, seed=21, n_macro=4, repeat=6)


class TestDataset:

    def test_frame_count_invariant(self, small):
        for ep in small:
            assert len(ep) == 4 * 6
            assert ep.states().shape[0] == len(ep) + 1

    def test_every_frame_satisfies_constraints(self, small):
        for ep in small:
            track = ep.handle_track()
            sep = np.linalg.norm(track[:, 0] - track[:, 1], axis=1)
            assert np.all(sep >= 0.10 - 1e-12)
            assert np.all(sep <= 0.60 + 1e-12)
            for raw in ep.actions:
                a = sw.BimanualAction(raw[:4], raw[4:])
                assert a.norm() <= 0.02 + 1e-12

    def test_seed_reproduces_dataset(self, small):
        again = sw.generate_dataset(3, seed=21, n_macro=4, repeat=6)
        for e1, e2 in zip(small, again):
            assert np.array_equal(e1.particles, e2.particles)
            assert np.array_equal(e1.actions, e2.actions)

    def test_saved_bytes_reproducible(self, small, tmp_path):
        import hashlib

        def digest(ep, root):
            sw.save_episode(root, ep)
            h = hashlib.sha256()
            for name in sorted(os.listdir(root)):
                with open(os.path.join(root, name), "rb") as f:
                    h.update(name.encode())
                    h.update(f.read())
            return h.hexdigest()

        again = sw.generate_dataset(3, seed=21, n_macro=4, repeat=6)
        d1 = digest(small[0], tmp_path / "a")
        d2 = digest(again[0], tmp_path / "b")
        assert d1 == d2

    def test_save_load_roundtrip(self, small, tmp_path):
        sw.save_episode(tmp_path / "ep", small[1])
        back = sw.load_episode(tmp_path / "ep")
        np.testing.assert_allclose(back.particles, small[1].particles,
                                   atol=1e-8)
        np.testing.assert_allclose(back.actions, small[1].actions, atol=0)
        np.testing.assert_allclose(back.initial_particles,
                                   small[1].initial_particles, atol=1e-8)

    def test_split_fractions(self):
        eps = list(range(20))
        train, val, test = sw.split_episodes(eps)
        assert (len(train), len(val), len(test)) == (14, 3, 3)
        assert train + val + test == eps


class TestMsm:
    def test_unit_scale_is_exact(self):
        m = sw.make_rim()
        a = sw.BimanualAction([0.008, 0.004, 0, 0.05], [-0.008, 0, 0, -0.05])
        true = sw.step(m, a)
        base = sw.step(sw.msm_model(m, 1.0), a)
        assert np.array_equal(true.positions, base.positions)

    def test_mismatch_produces_error(self):
        m = sw.make_rim()
        a = sw.BimanualAction([0.008, 0.004, 0, 0.05], [-0.008, 0, 0, -0.05])
        true = sw.step(m, a)
        base = sw.step(sw.msm_model(m, 1.5), a)
        assert np.linalg.norm(true.positions - base.positions) > 1e-6

    def test_mismatch_grows_with_action(self):
        m = sw.make_rim()
        errs = []
        for s in (0.25, 0.5, 1.0):
            a = sw.BimanualAction(np.array([0.008, 0.004, 0, 0.05]) * s,
                                  np.array([-0.008, 0, 0.004, -0.05]) * s)
            true = sw.step(m, a)
            base = sw.step(sw.msm_model(m, 1.5), a)
            errs.append(np.linalg.norm(true.positions - base.positions))
        assert errs[0] < errs[1] < errs[2]
