import math

import numpy as np
import pytest
from scipy.integrate import quad

from stackrecon import autodiff as ad
from stackrecon.acquisition import (
    PsfModel,
    SliceGeometry,
    draw_psf_offsets,
    gaussian_weight,
    oriented_gaussian_sample,
    predict_slice,
    predict_slice_fixed,
    frozen_slice_plan,
    psf_covariance,
)
from stackrecon.errors import InputError
from stackrecon.rigid import RigidTransform
from stackrecon.simulate import make_smooth_phantom, stack_pose_for_orientation
from stackrecon.volume import SliceState, VoxelGrid3D, trilinear_sample


class TestPsfCovariance:
    def test_closed_form_values(self):
        # direct evaluation of the covariance formula with high-precision ln 2
        ln2 = 0.6931471805599453
        want = ((1.2 * 0.8) ** 2 / (8 * ln2), (1.2 * 0.8) ** 2 / (8 * ln2), 36.0 / (8 * ln2))
        got = psf_covariance(0.8, 0.8, 6.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_isotropic_symmetry(self):
        s = 1.7
        v1, v2, v3 = psf_covariance(s, s, s)
        assert v1 == v2
        assert v3 == pytest.approx(s**2 / (8 * math.log(2)))
        assert v1 == pytest.approx((1.2 * s) ** 2 / (8 * math.log(2)))

    def test_quadratic_in_thickness(self):
        _, _, v3a = psf_covariance(1, 1, 3.0)
        _, _, v3b = psf_covariance(1, 1, 6.0)
        assert v3b == pytest.approx(4.0 * v3a)

    def test_rejects_nonpositive(self):
        with pytest.raises(InputError):
            psf_covariance(0.0, 1, 1)
        with pytest.raises(InputError):
            psf_covariance(1, 1, -2)


class TestGaussianWeight:
    def test_unit_covariance_peak(self):
        # (2 pi)^(-3/2)
        assert gaussian_weight((0, 0, 0), (1, 1, 1)) == pytest.approx(0.06349363593424097)

    def test_even_symmetry(self):
        s2 = (0.5, 1.0, 4.0)
        u = np.array([0.3, -0.7, 1.1])
        assert gaussian_weight(u, s2) == pytest.approx(gaussian_weight(-u, s2))

    def test_decreasing_along_ray(self):
        s2 = (0.4, 0.9, 2.0)
        direction = np.array([0.5, -1.0, 0.25])
        radii = np.linspace(0, 3, 20)
        vals = [gaussian_weight(r * direction, s2) for r in radii]
        assert np.all(np.diff(vals) < 0)


class TestOffsets:
    def test_stochastic_variance_matches(self):
        psf = PsfModel(sigma2=(0.25, 1.0, 4.0), num_samples=100_000, mode="stochastic", seed=3)
        offsets, weights = draw_psf_offsets(psf)
        assert np.allclose(weights, 1.0 / 100_000)
        var = offsets.var(axis=0)
        assert np.all(np.abs(var - (0.25, 1.0, 4.0)) / (0.25, 1.0, 4.0) < 0.02)

    def test_deterministic_weights_sum_to_one(self):
        psf = PsfModel(sigma2=psf_covariance(0.8, 0.8, 6.0), num_samples=27)
        offsets, weights = draw_psf_offsets(psf)
        assert offsets.shape == (27, 3)
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
        # lattice bounded by 2.5 sigma per axis
        sig = np.sqrt(psf.sigma2)
        assert np.all(np.abs(offsets) <= 2.5 * sig + 1e-12)

    def test_same_seed_identical(self):
        psf = PsfModel(sigma2=(1, 1, 1), num_samples=64, mode="stochastic", seed=9)
        o1, w1 = draw_psf_offsets(psf)
        o2, w2 = draw_psf_offsets(psf)
        assert np.array_equal(o1, o2) and np.array_equal(w1, w2)

    def test_non_cube_deterministic_rejected(self):
        with pytest.raises(InputError):
            PsfModel(sigma2=(1, 1, 1), num_samples=10)


def _slice_geom(dims=(8, 8), spacing=(1.0, 1.0), thickness=3.0, pose=None):
    return SliceGeometry(dims, spacing, thickness, pose or RigidTransform())


class TestOrientedSample:
    def test_constant_volume(self):
        g = VoxelGrid3D((16, 16, 16), (1, 1, 1), (0, 0, 0), np.eye(3),
                        np.full((16, 16, 16), 2.5))
        psf = PsfModel(sigma2=(0.2, 0.2, 1.0))
        pose = RigidTransform(alpha=(20, -10, 5))
        pts = g.center_world + np.random.default_rng(0).uniform(-2, 2, (20, 3))
        vals = oriented_gaussian_sample(g, pts, psf, pose)
        assert np.max(np.abs(vals - 2.5)) < 1e-6

    def test_tiny_sigma_is_trilinear(self):
        g = make_smooth_phantom((16, 16, 16), seed=2)
        psf = PsfModel(sigma2=(1e-6, 1e-6, 1e-6))
        pts = g.center_world + np.random.default_rng(1).uniform(-3, 3, (30, 3))
        vals = oriented_gaussian_sample(g, pts, psf, RigidTransform())
        ref = trilinear_sample(g, pts)
        assert np.max(np.abs(vals - ref)) < 1e-3

    def test_step_edge_blurs_to_erf_profile(self):
        # 1-D step along z sampled through the thick-slice PSF; oracle is
        # dense quadrature of trilinear(step) * N(0, sigma3^2)
        dims = (8, 8, 48)
        data = np.zeros(dims)
        data[:, :, 24:] = 1.0
        g = VoxelGrid3D(dims, (1, 1, 1), (0, 0, 0), np.eye(3), data)
        s3 = 4.0
        var3 = s3**2 / (8 * math.log(2))
        psf = PsfModel(sigma2=(1e-8, 1e-8, var3), num_samples=100_000, mode="stochastic", seed=5)
        zs = np.linspace(16.0, 32.0, 9)
        pts = np.stack([np.full_like(zs, 4.0), np.full_like(zs, 4.0), zs], axis=1)
        vals = oriented_gaussian_sample(g, pts, psf, RigidTransform())

        def profile(z):
            # trilinear interpolation of the step along z: a unit ramp on [23, 24]
            def step_interp(t):
                return np.clip(t - 23.0, 0.0, 1.0)

            sig = math.sqrt(var3)
            f = lambda u: step_interp(z + u) * math.exp(-0.5 * (u / sig) ** 2) / (
                sig * math.sqrt(2 * math.pi)
            )
            return quad(f, -8 * sig, 8 * sig, limit=200)[0]

        oracle = np.array([profile(z) for z in zs])
        assert np.max(np.abs(vals - oracle)) < 0.01  # Monte-Carlo tolerance


class TestPredictSlice:
    def _setup(self, seed=0):
        g = make_smooth_phantom((20, 20, 20), seed=seed)
        pose = stack_pose_for_orientation("axial", g.center_world)
        geom = SliceGeometry((12, 12), (1.2, 1.2), 3.0, pose)
        psf = PsfModel.for_slice(1.2, 1.2, 3.0)
        return g, geom, psf

    def test_intensity_scale_doubles_pixels(self):
        g, geom, psf = self._setup()
        p1 = predict_slice(g, geom, SliceState(intensity_scale=1.0), psf)
        p2 = predict_slice(g, geom, SliceState(intensity_scale=2.0), psf)
        assert np.allclose(p2, 2.0 * p1, atol=1e-12)

    def test_linearity_in_volume(self):
        g, geom, psf = self._setup()
        rng = np.random.default_rng(7)
        x1 = g.with_data(rng.random(g.dims))
        x2 = g.with_data(rng.random(g.dims))
        a, b = 1.3, -0.4
        st = SliceState(transform=RigidTransform(alpha=(3, 1, -2), d=(0.5, 0, 1)))
        combo = g.with_data(a * x1.data + b * x2.data)
        lhs = predict_slice(combo, geom, st, psf)
        rhs = a * predict_slice(x1, geom, st, psf) + b * predict_slice(x2, geom, st, psf)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_translation_equivariance(self):
        # shifting the volume by a lattice step and the slice pose by the
        # opposite amount leaves the prediction unchanged
        g, geom, psf = self._setup(seed=4)
        delta = np.array([1.0, 0.0, 0.0])  # one voxel along x
        st0 = SliceState()
        base = predict_slice(g, geom, st0, psf)
        shifted = g.with_data(np.roll(g.data, -1, axis=0))  # x(p + delta)
        st = SliceState(transform=RigidTransform(d=tuple(-delta)))
        moved = predict_slice(shifted, geom, st, psf)
        interior = slice(2, -2)
        assert np.max(np.abs(base[interior, interior] - moved[interior, interior])) < 1e-3

    def test_graph_path_matches_numpy_path(self):
        g, geom, psf = self._setup(seed=9)
        st = SliceState(
            transform=RigidTransform(alpha=(4, -2, 3), d=(0.7, -0.3, 1.1)),
            intensity_scale=1.4,
        )
        ref = predict_slice(g, geom, st, psf)
        tape = ad.Tape()
        out = predict_slice(g, geom, st, psf, tape=tape)
        assert np.max(np.abs(out.value - ref)) < 1e-12

    def test_frozen_plan_matches_graph(self):
        g, geom, psf = self._setup(seed=10)
        st = SliceState(transform=RigidTransform(alpha=(2, 1, -1), d=(0.2, 0.5, -0.4)))
        offsets, weights = draw_psf_offsets(psf)
        ref = predict_slice(g, geom, st, psf, offsets=offsets, weights=weights)
        plan = frozen_slice_plan(g, geom, st, offsets)
        tape = ad.Tape()
        vol_t = tape.tensor(np.asarray(g.data), requires_grad=True)
        out = predict_slice_fixed(vol_t, plan, weights, 1.0)
        assert np.max(np.abs(out.value - ref)) < 1e-12

    def test_gradient_flow_through_pose(self):
        # finite-difference check of d(loss)/d(pose) for all 6 parameters
        g, geom, psf = self._setup(seed=11)
        offsets, weights = draw_psf_offsets(psf)
        target = predict_slice(
            g, geom, SliceState(transform=RigidTransform(alpha=(1, 0, 0), d=(0.5, 0, 0))),
            psf, offsets=offsets, weights=weights,
        )

        def loss_np(arrs):
            st = SliceState(transform=RigidTransform.from_params(arrs[0]))
            pred = predict_slice(g, geom, st, psf, offsets=offsets, weights=weights)
            return float(np.mean((pred - target) ** 2))

        p0 = np.array([0.8, -0.5, 0.3, 0.2, -0.1, 0.4])
        g_fd = ad.finite_difference_grad(loss_np, [p0])[0]
        tape = ad.Tape()
        params = tape.tensor(p0, requires_grad=True)
        pred = predict_slice(
            g, geom, None, psf, tape=tape, t_params=params, c_scale=1.0,
            offsets=offsets, weights=weights,
        )
        loss = ad.mean(ad.square(ad.sub(pred, tape.constant(target))))
        tape.backward(loss)
        assert np.max(np.abs(params.grad - g_fd)) / np.max(np.abs(g_fd)) < 1e-4

    def test_paper_literal_weighting_not_partition_of_unity(self):
        g = VoxelGrid3D((14, 14, 14), (1, 1, 1), (0, 0, 0), np.eye(3),
                        np.full((14, 14, 14), 1.0))
        pose = stack_pose_for_orientation("axial", g.center_world)
        geom = SliceGeometry((6, 6), (1.0, 1.0), 3.0, pose)
        psf = PsfModel.for_slice(1.0, 1.0, 3.0)
        normalized = predict_slice(g, geom, SliceState(), psf, self_normalized=True)
        literal = predict_slice(g, geom, SliceState(), psf, self_normalized=False)
        assert np.max(np.abs(normalized - 1.0)) < 1e-6
        assert np.max(np.abs(literal - 1.0)) > 0.01  # the unnormalized form drifts


class TestOrientation:
    @pytest.mark.parametrize("orientation,axis", [("axial", 2), ("coronal", 1), ("sagittal", 0)])
    def test_through_plane_axis(self, orientation, axis):
        pose = stack_pose_for_orientation(orientation, (0, 0, 0))
        e3 = pose.rotation[:, 2]
        expect = np.zeros(3)
        expect[axis] = 1.0
        assert np.allclose(np.abs(e3), expect, atol=1e-12)

    def test_anisotropic_blur_follows_slice_frame(self):
        # a sagittal slice's thickness axis lies along world x: the heavy
        # sigma3 must blur x, not z
        dims = (40, 12, 12)
        data = np.zeros(dims)
        data[20:, :, :] = 1.0  # step along x
        g = VoxelGrid3D(dims, (1, 1, 1), (0, 0, 0), np.eye(3), data)
        psf = PsfModel(
            sigma2=(1e-8, 1e-8, 6.0), num_samples=50_000, mode="stochastic", seed=2
        )
        pose = stack_pose_for_orientation("sagittal", g.center_world)
        xs = np.linspace(14.0, 25.0, 6)
        pts = np.stack([xs, np.full_like(xs, 6.0), np.full_like(xs, 6.0)], axis=1)
        blurred = oriented_gaussian_sample(g, pts, psf, pose)
        sharp = trilinear_sample(g, pts)
        # the profile must now be smeared over several mm
        assert np.max(np.abs(blurred - sharp)) > 0.1
