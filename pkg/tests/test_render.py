import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dyncoef import gradtensor as gt
from dyncoef.field import AlphaMask
from dyncoef.model import FieldConfig, RadianceField
from dyncoef.appearance import AppearanceConfig
from dyncoef.render import (
    Camera,
    RenderConfig,
    compositing_weights,
    focal_from_fov,
    generate_rays,
    integrate,
    ray_box_interval,
    residual_transmittance,
    sample_rays,
)

BOUNDS = np.array([[-1.0, -1, -1], [1, 1, 1]])


def axis_rays(n=1):
    """Rays from z=+4 straight down the -z axis: they cross the box over t in [3, 5]."""
    o = np.tile([0.0, 0.0, 4.0], (n, 1))
    d = np.tile([0.0, 0.0, -1.0], (n, 1))
    return o, d


class TestCamera:
    def test_focal_formula(self):
        cam = Camera.from_fov(64, 64, 0.6911112070083618, np.eye(4))
        assert cam.focal == pytest.approx(0.5 * 64 / np.tan(0.5 * 0.6911112070083618), abs=1e-12)
        assert focal_from_fov(100, np.pi / 2) == pytest.approx(50.0)

    def test_rejects_non_orthonormal(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        with pytest.raises(ValueError):
            Camera(4, 4, 3.0, pose)


class TestGenerateRays:
    def test_center_pixel_looks_down_minus_z(self):
        cam = Camera(5, 5, 4.0, np.eye(4))
        _, d = generate_rays(cam, [[2, 2]])
        np.testing.assert_allclose(d[0], [0, 0, -1], atol=1e-15)

    def test_unit_norm(self, rng):
        pose = np.eye(4)
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        pose[:3, :3] = q
        pose[:3, 3] = [1, 2, 3]
        o, d = generate_rays(Camera(7, 5, 3.3, pose))
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(o, np.tile([1.0, 2, 3], (35, 1)))

    def test_corner_angle(self):
        w, h, f = 8, 6, 5.0
        _, d = generate_rays(Camera(w, h, f, np.eye(4)), [[0, 0]])
        half_diag = np.hypot(w / 2 - 0.5, h / 2 - 0.5)
        assert np.arccos(-d[0, 2]) == pytest.approx(np.arctan(half_diag / f), abs=1e-12)

    def test_top_left_pixel_is_up_left(self):
        _, d = generate_rays(Camera(4, 4, 2.0, np.eye(4)), [[0, 0]])
        assert d[0, 0] < 0 and d[0, 1] > 0


class TestSampling:
    def test_uniform_spacing(self):
        o, d = axis_rays()
        s = sample_rays(o, d, RenderConfig(samples_per_ray=10), BOUNDS, 2.0, 6.0)
        np.testing.assert_allclose(s.t[0], 3.0 + np.arange(10) * 0.2, atol=1e-14)
        np.testing.assert_allclose(s.deltas[0, :-1], 0.2, atol=1e-14)
        assert s.deltas[0, -1] == 0.0
        assert s.valid.all()

    def test_near_far_clip_box(self):
        o, d = axis_rays()
        s = sample_rays(o, d, RenderConfig(samples_per_ray=4), BOUNDS, 3.5, 4.5)
        np.testing.assert_allclose(s.t[0], [3.5, 3.75, 4.0, 4.25])

    def test_near_must_be_below_far(self):
        o, d = axis_rays()
        with pytest.raises(ValueError):
            sample_rays(o, d, RenderConfig(), BOUNDS, 3.0, 3.0)

    def test_miss_gives_empty_set(self):
        o = np.array([[5.0, 5.0, 4.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        s = sample_rays(o, d, RenderConfig(samples_per_ray=8), BOUNDS, 2.0, 6.0)
        assert not s.valid.any()
        assert np.all(s.deltas == 0)

    def test_all_empty_mask(self):
        mask = AlphaMask((4, 4, 4), BOUNDS, np.zeros((4, 4, 4), bool))
        o, d = axis_rays(3)
        s = sample_rays(o, d, RenderConfig(samples_per_ray=16), BOUNDS, 2.0, 6.0, mask)
        assert not s.valid.any()

    def test_half_mask_keeps_occupied_only(self, rng):
        occ = np.zeros((4, 4, 4), bool)
        occ[:, :, :2] = True  # z < 0 half
        mask = AlphaMask((4, 4, 4), BOUNDS, occ)
        o = np.tile([0.0, 0.0, 4.0], (50, 1)) + np.c_[rng.uniform(-0.5, 0.5, (50, 2)), np.zeros(50)]
        d = rng.standard_normal((50, 3)) * 0.1 + [0, 0, -1]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s = sample_rays(o, d, RenderConfig(samples_per_ray=32), BOUNDS, 2.0, 6.0, mask)
        kept = s.positions[s.valid]
        assert len(kept) > 0
        idx = mask.voxel_index(kept)
        assert np.all(occ[idx[:, 0], idx[:, 1], idx[:, 2]])
        assert (~s.valid).any()

    def test_dropped_intervals_merge_into_previous(self):
        occ = np.ones((4, 4, 4), bool)
        occ[:, :, 2] = False  # z in [0, 0.5)
        mask = AlphaMask((4, 4, 4), BOUNDS, occ)
        o, d = axis_rays()
        cfg = RenderConfig(samples_per_ray=20)
        full = sample_rays(o, d, cfg, BOUNDS, 2.0, 6.0)
        s = sample_rays(o, d, cfg, BOUNDS, 2.0, 6.0, mask)
        assert s.deltas.sum() == pytest.approx(full.deltas.sum(), abs=1e-12)
        # the kept sample just before the gap absorbs it
        gap = ~s.valid[0]
        first_gap = np.flatnonzero(gap)[0]
        assert s.deltas[0, first_gap - 1] == pytest.approx(0.1 * (gap.sum() + 1), abs=1e-12)

    def test_jitter_stays_in_bins(self, rng):
        o, d = axis_rays(5)
        s = sample_rays(o, d, RenderConfig(samples_per_ray=10, stratified_jitter=True), BOUNDS, 2.0, 6.0,
                        rng=rng)
        offs = (s.t - 3.0) / 0.2 - np.arange(10)
        assert np.all((offs >= 0) & (offs < 1))
        assert np.all(s.deltas[:, :-1] > 0)

    def test_ray_box_interval(self):
        lo, hi = ray_box_interval(np.array([[0.0, 0, 4]]), np.array([[0.0, 0, -1]]), BOUNDS)
        assert (lo[0], hi[0]) == (3.0, 5.0)


class TestIntegrate:
    def test_zero_density_is_background(self, rng):
        bg = (0.2, 0.4, 0.9)
        c = integrate(np.zeros(16), np.full(16, 0.1), rng.uniform(size=(16, 3)), bg)
        assert c.values.tolist() == list(bg)

    def test_opaque_first_sample(self):
        c = integrate(np.array([50.0]), np.array([1.0]), np.array([[0.3, 0.6, 0.9]]))
        np.testing.assert_allclose(c.values, [0.3, 0.6, 0.9], atol=1e-12, rtol=0)

    def test_homogeneous_medium_converges(self):
        sigma, color, bg = 1.3, np.array([0.8, 0.3, 0.1]), np.ones(3)
        o, d = axis_rays()
        closed = (1 - np.exp(-sigma * 2.0)) * color + np.exp(-sigma * 2.0) * bg
        errs = []
        for n in (64, 128, 256):
            s = sample_rays(o, d, RenderConfig(samples_per_ray=n), BOUNDS, 2.0, 6.0)
            c = integrate(np.full(n, sigma), s.deltas[0], np.tile(color, (n, 1)), bg).values
            errs.append(np.abs(c - closed).max())
        assert errs[0] > errs[1] > errs[2]
        assert errs[1] <= 0.5 * errs[0] and errs[2] <= 0.5 * errs[1]

    def test_single_ray_and_batch_agree(self, rng):
        sigma = rng.uniform(0, 3, (2, 8))
        deltas = rng.uniform(0.05, 0.2, (2, 8))
        rad = rng.uniform(size=(2, 8, 3))
        batch = integrate(sigma, deltas, rad).values
        np.testing.assert_array_equal(integrate(sigma[1], deltas[1], rad[1]).values, batch[1])

    def test_gradient_wrt_sigma(self, rng):
        sigma = gt.parameter(rng.uniform(0.1, 3, (3, 10)))
        deltas = rng.uniform(0.05, 0.2, (3, 10))
        rad = rng.uniform(size=(3, 10, 3))
        w = rng.standard_normal((3, 3))
        assert gt.finite_diff_check(lambda s: gt.reduce(integrate(s, deltas, rad) * w, "sum"), sigma) < 1e-5

    def test_gradient_wrt_radiance(self, rng):
        rad = gt.parameter(rng.uniform(size=(2, 6, 3)))
        sigma = rng.uniform(0.1, 3, (2, 6))
        deltas = np.full((2, 6), 0.3)
        assert gt.finite_diff_check(lambda r: gt.reduce(gt.square(integrate(sigma, deltas, r)), "sum"),
                                    rad) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(0, 20)),
       arrays(np.float64, 12, elements=st.floats(0, 0.5)))
def test_transmittance_invariants(sigma, deltas):
    trans, _, w = compositing_weights(sigma, deltas)
    t, w = trans.values, w.values
    assert t[0] == 1.0
    assert np.all(np.diff(t) <= 0) and np.all((t >= 0) & (t <= 1))
    np.testing.assert_allclose(t[1:], t[:-1] * np.exp(-sigma[:-1] * deltas[:-1]), rtol=1e-12, atol=1e-300)
    assert abs(w.sum() + residual_transmittance(sigma, deltas) - 1.0) <= 1e-12
    assert 0 <= w.sum() <= 1 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 7), st.integers(0, 2), st.floats(0.0, 1.0))
def test_integrate_monotone_in_radiance(seed, sample, channel, bump):
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0, 4, 8)
    deltas = rng.uniform(0, 0.4, 8)
    rad = rng.uniform(size=(8, 3))
    before = integrate(sigma, deltas, rad).values[channel]
    rad[sample, channel] += bump
    assert integrate(sigma, deltas, rad).values[channel] >= before


def tiny_model(**kw):
    cfg = FieldConfig(resolution=(6, 6, 6), bounds=((-1,) * 3, (1,) * 3), density_ranks=(2, 2, 2),
                      appearance_ranks=(2, 2, 2),
                      appearance=AppearanceConfig(n_basis=4, film_width=4, trunk_depth=2, trunk_width=8,
                                                  integrator_width=8),
                      render=RenderConfig(samples_per_ray=16), **kw)
    return RadianceField(cfg, seed=0)


def look_down_camera(size=6):
    pose = np.eye(4)
    pose[2, 3] = 4.0
    return Camera(size, size, 8.0, pose)


class TestRenderImage:
    def test_zero_density_gives_background(self):
        m = tiny_model()
        for t in m.grid.density.tensors():
            t.values = np.zeros(t.shape)
        img = m.render_image(look_down_camera())
        assert img.shape == (6, 6, 3)
        assert np.all(img == 1.0)

    def test_deterministic(self):
        m = tiny_model(init_std=0.8)
        a = m.render_image(look_down_camera())
        b = m.render_image(look_down_camera())
        assert np.array_equal(a, b)
        assert not np.all(a == 1.0)

    def test_weight_threshold_zero_matches_skipping_closely(self):
        m = tiny_model(init_std=0.8)
        o, d = generate_rays(look_down_camera())
        with gt.no_grad():
            exact, _ = m.render_rays(o, d, cfg=RenderConfig(samples_per_ray=16, weight_threshold=0.0))
            skip, s = m.render_rays(o, d, cfg=RenderConfig(samples_per_ray=16, weight_threshold=1e-4))
        # each skipped sample carries weight at most 1e-4 and radiance in (0, 1)
        bound = 1e-4 * ((s.weights <= 1e-4) & (s.weights > 0)).sum(axis=1)
        assert np.all(np.abs(exact.values - skip.values) <= bound[:, None] + 1e-15)
