import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackrecon.errors import InputError
from stackrecon.rigid import RigidTransform
from stackrecon.simulate import MotionConfig, simulate_stack
from stackrecon.volume import (
    Slice2D,
    SliceStack,
    SliceState,
    VoxelGrid3D,
    bounding_grid,
    grid_to_stack,
    index_from_world,
    resample_to,
    scatter_init_volume,
    stack_to_grid,
    trilinear_sample,
    world_from_index,
)


def make_grid(dims=(4, 4, 4), spacing=(1, 1, 1), origin=(0, 0, 0), axes=None, data=None):
    axes = np.eye(3) if axes is None else axes
    if data is None:
        data = np.arange(np.prod(dims), dtype=float).reshape(dims)
    return VoxelGrid3D(dims, spacing, origin, axes, data)


class TestGeometry:
    def test_identity_mapping(self):
        g = make_grid()
        assert np.allclose(world_from_index(g, (2, 3, 4)), (2, 3, 4))

    def test_spacing_scaling(self):
        g = make_grid(spacing=(0.8, 0.8, 0.8))
        assert np.allclose(world_from_index(g, (10, 0, 0)), (8, 0, 0))

    def test_rotated_axes(self):
        # 90 degrees about z: index axis i maps to world +y
        axes = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        g = make_grid(axes=axes)
        assert np.allclose(world_from_index(g, (1, 0, 0)), (0, 1, 0))

    def test_inverse_mapping(self):
        g = make_grid(spacing=(0.7, 1.1, 2.0), origin=(3, -2, 5))
        ijk = np.array([1.25, 2.5, 0.75])
        assert np.allclose(index_from_world(g, world_from_index(g, ijk)), ijk)

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(-3, 3), st.floats(-3, 3),
        st.tuples(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.1, 3)),
    )
    def test_affine_linearity(self, a, b, pt):
        g = make_grid(spacing=(0.8, 1.2, 2.0), origin=(1, 2, 3))
        p = np.asarray(pt)
        q = np.array([0.5, 1.5, 2.5])
        # affine: f(a p + b q) - f(0) = a (f(p) - f(0)) + b (f(q) - f(0))
        f0 = world_from_index(g, np.zeros(3))
        lhs = world_from_index(g, a * p + b * q) - f0
        rhs = a * (world_from_index(g, p) - f0) + b * (world_from_index(g, q) - f0)
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_invariants_enforced(self):
        with pytest.raises(InputError):
            make_grid(dims=(0, 4, 4))
        with pytest.raises(InputError):
            make_grid(spacing=(0, 1, 1))
        with pytest.raises(InputError):
            VoxelGrid3D((4, 4, 4), (1, 1, 1), (0, 0, 0), np.eye(3) * 2, np.zeros((4, 4, 4)))
        with pytest.raises(InputError):
            VoxelGrid3D((4, 4, 4), (1, 1, 1), (0, 0, 0), np.eye(3), np.zeros((3, 3, 3)))


class TestTrilinear:
    def test_lattice_exact(self):
        g = make_grid()
        assert trilinear_sample(g, (3.0, 3.0, 3.0)) == g.data[3, 3, 3]
        for idx in [(0, 0, 0), (1, 2, 3), (3, 0, 2)]:
            assert trilinear_sample(g, tuple(float(i) for i in idx)) == g.data[idx]

    def test_constant_preserved(self):
        g = make_grid(data=np.full((4, 4, 4), 2.5))
        pts = np.random.default_rng(0).uniform(0, 3, (50, 3))
        assert np.allclose(trilinear_sample(g, pts), 2.5)

    def test_ramp_midpoint(self):
        data = np.fromfunction(lambda i, j, k: i, (5, 5, 5))
        g = make_grid(dims=(5, 5, 5), data=data)
        assert trilinear_sample(g, (2.5, 2.0, 2.0)) == pytest.approx(2.5, abs=1e-13)

    def test_continuity_across_cells(self):
        rng = np.random.default_rng(3)
        g = make_grid(dims=(6, 6, 6), data=rng.random((6, 6, 6)))
        # approach an interior lattice plane from both sides
        for axis in range(3):
            p = np.array([2.3, 3.1, 1.7])
            p[axis] = 3.0
            lo, hi = p.copy(), p.copy()
            lo[axis] -= 1e-13
            hi[axis] += 1e-13
            assert abs(trilinear_sample(g, lo) - trilinear_sample(g, hi)) < 1e-12

    def test_boundary_zero_vs_clamp(self):
        g = make_grid(data=np.full((4, 4, 4), 1.0))
        outside = (10.0, 1.0, 1.0)
        assert trilinear_sample(g, outside, "zero") == 0.0
        assert trilinear_sample(g, outside, "clamp") == 1.0

    def test_nonfinite_rejected(self):
        g = make_grid()
        with pytest.raises(InputError):
            trilinear_sample(g, (np.nan, 0, 0))
        with pytest.raises(InputError):
            trilinear_sample(g, (np.inf, 0, 0))


class TestSliceTypes:
    def test_slice_state_validation(self):
        with pytest.raises(InputError):
            SliceState(intensity_scale=0.0)
        with pytest.raises(InputError):
            SliceState(outlier_weight=-1.0)

    def test_stack_requires_shared_geometry(self):
        a = Slice2D((4, 4), (1, 1), 3.0, np.zeros((4, 4)))
        b = Slice2D((5, 5), (1, 1), 3.0, np.zeros((5, 5)))
        with pytest.raises(InputError):
            SliceStack([(a, SliceState()), (b, SliceState())])

    def test_slice_offsets_centered(self):
        a = Slice2D((4, 4), (1, 1), 3.0, np.zeros((4, 4)))
        stack = SliceStack([(a, SliceState()) for _ in range(5)])
        offs = [stack.slice_offset_mm(j) for j in range(5)]
        assert offs == [-6.0, -3.0, 0.0, 3.0, 6.0]

    def test_stack_grid_roundtrip(self):
        rng = np.random.default_rng(0)
        slices = [
            (Slice2D((6, 5), (0.5, 0.5), 2.0, rng.random((6, 5))), SliceState())
            for _ in range(4)
        ]
        stack = SliceStack(slices, "coronal", RigidTransform(alpha=(90, 0, 0), d=(1, 2, 3)))
        grid = stack_to_grid(stack)
        assert grid.dims == (6, 5, 4)
        back = grid_to_stack(grid)
        assert back.n_slices == 4
        assert back.nominal_orientation == "coronal"
        for (s1, _), (s2, _) in zip(stack.slices, back.slices):
            assert np.allclose(s1.data, s2.data)
        # world positions of matching voxels agree
        assert np.allclose(stack.slice_pose(2).apply((0.5, -1.0, 0.0)),
                           back.slice_pose(2).apply((0.5, -1.0, 0.0)), atol=1e-9)


class TestScatterInit:
    @staticmethod
    def _stacks(gt, orientations, thickness=3.0, in_plane=1.0):
        mc = MotionConfig(offset_range=0.0, seed=0)
        return [
            simulate_stack(gt, o, thickness, in_plane, mc, noise_frac=0.0)[0]
            for o in orientations
        ]

    def test_constant_preserved(self):
        # a stack of constant-intensity slices: every touched voxel gets
        # num = c * den, so the normalized average is exactly c
        sl = Slice2D((16, 16), (1, 1), 3.0, np.full((16, 16), 4.2))
        stack = SliceStack([(sl, SliceState()) for _ in range(6)])
        vol = scatter_init_volume([stack], 1.0)
        hit = vol.data != 0
        assert hit.any()
        assert np.max(np.abs(vol.data[hit] - 4.2)) < 1e-6

    def test_two_identical_stacks_average_to_same(self):
        gt = VoxelGrid3D((20, 20, 20), (1, 1, 1), (0, 0, 0), np.eye(3),
                         np.fromfunction(lambda i, j, k: i / 19.0, (20, 20, 20)))
        one = self._stacks(gt, ["axial"])
        two = self._stacks(gt, ["axial", "axial"])
        v1 = scatter_init_volume(one, 1.0)
        v2 = scatter_init_volume(two, 1.0)
        assert v1.dims == v2.dims
        assert np.allclose(v1.data, v2.data, atol=1e-9)

    def test_orthogonal_stacks_beat_single_stack(self):
        # ramp phantom: multi-orientation scatter must out-resolve any single
        # upsampled stack (through-plane blur hits each stack differently)
        dims = (32, 32, 32)
        data = np.fromfunction(lambda i, j, k: (i + 2 * j + 3 * k) / 96.0, dims)
        gt = VoxelGrid3D(dims, (1, 1, 1), (0, 0, 0), np.eye(3), data)
        stacks = self._stacks(gt, ["axial", "coronal", "sagittal"], thickness=4.0)
        fused = resample_to(scatter_init_volume(stacks, 1.0), gt)
        rmse_fused = np.sqrt(np.mean((fused.data - gt.data) ** 2))
        for s in stacks:
            up = resample_to(stack_to_grid(s), gt)
            rmse_single = np.sqrt(np.mean((up.data - gt.data) ** 2))
            assert rmse_fused < rmse_single

    def test_empty_input_rejected(self):
        with pytest.raises(InputError):
            scatter_init_volume([], 1.0)


def test_bounding_grid_dims_and_determinism():
    pts = np.array([[0.0, 0.0, 0.0], [50.4, 50.4, 50.4]])
    g1 = bounding_grid(pts, 0.8, align=16)
    g2 = bounding_grid(pts, 0.8, align=16)
    assert g1.dims == (64, 64, 64)
    assert g1.dims == g2.dims and g1.origin == g2.origin
