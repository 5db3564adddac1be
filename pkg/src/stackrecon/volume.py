"""Volume / slice / stack data model, grid geometry, and plain resampling.

Geometry convention: voxel samples are node-centered. The center of voxel
(0, 0, 0) sits exactly at ``origin``, and continuous index ijk maps to

    world = origin + axes @ (ijk * spacing)

with ``axes`` an orthonormal 3x3 matrix whose columns are the world
directions of the i/j/k index axes. All positions are in mm.

The trilinear sampler here is deliberately independent of the
differentiable sampler in :mod:`stackrecon.autodiff`; it doubles as the
oracle the differentiable path is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .rigid import RigidTransform, compose

_AXES_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VoxelGrid3D:
    """A 3D scalar image with grid-to-world geometry.

    dims: (nx, ny, nz) voxel counts
    spacing: (sx, sy, sz) mm per voxel step
    origin: world position (mm) of the center of voxel (0, 0, 0)
    axes: orthonormal 3x3 direction matrix (columns = index axis directions)
    data: intensities, shape (nx, ny, nz)
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    axes: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if any(n < 1 for n in dims):
            raise InputError(f"dims must be >= 1 per axis, got {dims}")
        if any(s <= 0 for s in spacing):
            raise InputError(f"spacing must be positive, got {spacing}")
        axes = np.asarray(self.axes, dtype=float)
        if axes.shape != (3, 3) or np.max(np.abs(axes.T @ axes - np.eye(3))) > _AXES_TOL:
            raise InputError("axes must be an orthonormal 3x3 matrix")
        data = np.asarray(self.data)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise InputError(
                f"data size {data.size} does not match dims {dims}"
            )
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", _readonly(axes))
        object.__setattr__(self, "data", _readonly(data.reshape(dims)))

    @property
    def affine(self) -> np.ndarray:
        """4x4 index-to-world affine (continuous index, node-centered)."""
        m = np.eye(4)
        m[:3, :3] = self.axes @ np.diag(self.spacing)
        m[:3, 3] = self.origin
        return m

    @property
    def center_world(self) -> np.ndarray:
        """World position of the grid center (continuous index (n-1)/2)."""
        c_idx = (np.asarray(self.dims, float) - 1.0) / 2.0
        return world_from_index(self, c_idx)

    def with_data(self, data: np.ndarray) -> "VoxelGrid3D":
        """Same geometry, new voxel values."""
        return VoxelGrid3D(self.dims, self.spacing, self.origin, self.axes, data)


def world_from_index(grid: VoxelGrid3D, ijk) -> np.ndarray:
    """Map continuous voxel coordinates (..., 3) to world mm."""
    ijk = np.asarray(ijk, dtype=float)
    scaled = ijk * np.asarray(grid.spacing)
    return scaled @ grid.axes.T + np.asarray(grid.origin)


def index_from_world(grid: VoxelGrid3D, xyz) -> np.ndarray:
    """Map world mm positions (..., 3) to continuous voxel coordinates."""
    xyz = np.asarray(xyz, dtype=float)
    local = (xyz - np.asarray(grid.origin)) @ grid.axes
    return local / np.asarray(grid.spacing)


def trilinear_sample(grid: VoxelGrid3D, xyz, boundary: str = "zero") -> np.ndarray:
    """Sample the volume at world positions (..., 3) by trilinear blending.

    boundary="zero" treats everything outside the voxel lattice as 0;
    boundary="clamp" extends edge values. Exact at lattice points.
    """
    if boundary not in ("zero", "clamp"):
        raise InputError(f"unknown boundary policy {boundary!r}")
    xyz = np.asarray(xyz, dtype=float)
    if not np.all(np.isfinite(xyz)):
        raise InputError("non-finite sample coordinates")
    idx = index_from_world(grid, xyz)
    return sample_at_index(grid.data, idx, boundary)


def sample_at_index(data: np.ndarray, idx, boundary: str = "zero") -> np.ndarray:
    """Trilinear interpolation of ``data`` at continuous indices (..., 3)."""
    idx = np.asarray(idx, dtype=float)
    lead = idx.shape[:-1]
    pts = idx.reshape(-1, 3)
    dims = np.asarray(data.shape)
    if boundary == "clamp":
        pts = np.clip(pts, 0.0, dims - 1.0)
    i0 = np.floor(pts).astype(np.int64)
    frac = pts - i0
    out = np.zeros(pts.shape[0], dtype=data.dtype)
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        ci = i0 + np.asarray(bits)
        w = np.ones(pts.shape[0])
        for a in range(3):
            w = w * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
        valid = np.all((ci >= 0) & (ci < dims), axis=1)
        if not np.any(valid):
            continue
        cv = ci[valid]
        out[valid] += w[valid] * data[cv[:, 0], cv[:, 1], cv[:, 2]]
    return out.reshape(lead)


@dataclass(frozen=True)
class Slice2D:
    """A single acquired 2D slice: in-plane grid plus thickness."""

    dims: tuple[int, int]
    spacing: tuple[float, float]
    thickness: float
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if any(n < 1 for n in dims):
            raise InputError(f"slice dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing) or self.thickness <= 0:
            raise InputError("slice spacing and thickness must be positive")
        data = np.asarray(self.data)
        if data.shape != dims:
            raise InputError(f"slice data shape {data.shape} != dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "thickness", float(self.thickness))
        object.__setattr__(self, "data", _readonly(data.astype(np.float64)))


@dataclass
class SliceState:
    """Mutable per-slice reconstruction state."""

    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    intensity_scale: float = 1.0
    outlier_weight: float = 1.0
    excluded: bool = False

    def __post_init__(self):
        if self.intensity_scale <= 0:
            raise InputError("intensity_scale must be > 0")
        if self.outlier_weight <= 0:
            raise InputError("outlier_weight must be > 0")


ORIENTATIONS = ("axial", "coronal", "sagittal")


@dataclass
class SliceStack:
    """An ordered stack of parallel slices with shared geometry.

    ``stack_pose`` places the unperturbed stack in world space: it maps the
    stack frame (e1/e2 in-plane, e3 along slice normal, origin at the stack
    center) to world coordinates. Slice j is offset along e3 by
    (j - (n-1)/2) * (thickness + gap).
    """

    slices: list[tuple[Slice2D, SliceState]]
    nominal_orientation: str = "axial"
    stack_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    gap: float = 0.0

    def __post_init__(self):
        if not self.slices:
            raise InputError("a stack needs at least one slice")
        if self.nominal_orientation not in ORIENTATIONS:
            raise InputError(f"unknown orientation {self.nominal_orientation!r}")
        first = self.slices[0][0]
        for s, _ in self.slices:
            if (
                s.dims != first.dims
                or s.spacing != first.spacing
                or s.thickness != first.thickness
            ):
                raise InputError("all slices in a stack must share geometry")

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def slice_dims(self) -> tuple[int, int]:
        return self.slices[0][0].dims

    @property
    def in_plane_spacing(self) -> tuple[float, float]:
        return self.slices[0][0].spacing

    @property
    def thickness(self) -> float:
        return self.slices[0][0].thickness

    @property
    def pitch(self) -> float:
        """Center-to-center distance between adjacent slices."""
        return self.thickness + self.gap

    def slice_offset_mm(self, j: int) -> float:
        return (j - (self.n_slices - 1) / 2.0) * self.pitch

    def slice_pose(self, j: int) -> RigidTransform:
        """Slice-frame to world pose of slice j (before any motion)."""
        offset = RigidTransform(d=(0.0, 0.0, self.slice_offset_mm(j)))
        return compose(self.stack_pose, offset)


def slice_pixel_coords(dims: tuple[int, int], spacing: tuple[float, float]) -> np.ndarray:
    """Slice-frame positions of pixel centers, shape (nu, nv, 3).

    The slice frame origin is the slice center; the third coordinate is 0.
    """
    nu, nv = dims
    u = (np.arange(nu) - (nu - 1) / 2.0) * spacing[0]
    v = (np.arange(nv) - (nv - 1) / 2.0) * spacing[1]
    out = np.zeros((nu, nv, 3))
    out[:, :, 0] = u[:, None]
    out[:, :, 1] = v[None, :]
    return out


def bounding_grid(
    points_world: np.ndarray,
    spacing: float,
    margin_mm: float = 0.0,
    align: int = 1,
) -> VoxelGrid3D:
    """World-axis-aligned empty grid covering the given points.

    The grid is centered on the point bounding box and sized to the exact
    voxel count covering it (padded up to a multiple of ``align`` for the
    decoder's upsampling factor), so regeneration from identical inputs is
    deterministic and a snug footprint stays snug.
    """
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    lo = pts.min(axis=0) - margin_mm
    hi = pts.max(axis=0) + margin_mm
    center = (lo + hi) / 2.0
    dims = np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1
    if align > 1:
        dims = (np.ceil(dims / align) * align).astype(int)
    origin = center - (dims - 1) * spacing / 2.0
    data = np.zeros(tuple(dims))
    return VoxelGrid3D(tuple(dims), (spacing,) * 3, tuple(origin), np.eye(3), data)


def stack_sample_positions(stack: SliceStack, apply_motion: bool = True):
    """World positions and values of every slice pixel in a stack.

    Returns (points (P, 3), values (P,)). Motion transforms (if any) are
    applied as plain matrix transforms about the world origin; callers that
    need center-relative motion fold the center into the transform first.
    """
    pts_all, val_all = [], []
    for j, (sl, state) in enumerate(stack.slices):
        base = slice_pixel_coords(sl.dims, sl.spacing).reshape(-1, 3)
        world = stack.slice_pose(j).apply(base)
        if apply_motion and not state.transform.is_identity():
            world = state.transform.apply(world)
        pts_all.append(world)
        val_all.append(sl.data.reshape(-1))
    return np.concatenate(pts_all), np.concatenate(val_all)


def stack_to_grid(stack: SliceStack) -> VoxelGrid3D:
    """Pack a stack into a 3D grid at its nominal (motion-free) geometry.

    The third grid axis runs along the slice normal with the slice pitch as
    spacing; per-slice motion state is intentionally dropped (this is the
    raw-acquisition view used for file export and naive upsampling).
    """
    nu, nv = stack.slice_dims
    ns = stack.n_slices
    data = np.stack([sl.data for sl, _ in stack.slices], axis=2)
    corner = np.array(
        [
            -(nu - 1) / 2.0 * stack.in_plane_spacing[0],
            -(nv - 1) / 2.0 * stack.in_plane_spacing[1],
            stack.slice_offset_mm(0),
        ]
    )
    origin = stack.stack_pose.apply(corner)
    spacing = (stack.in_plane_spacing[0], stack.in_plane_spacing[1], stack.pitch)
    return VoxelGrid3D((nu, nv, ns), spacing, tuple(origin), stack.stack_pose.rotation, data)


def grid_to_stack(grid: VoxelGrid3D, gap: float = 0.0) -> SliceStack:
    """Interpret a 3D grid as a stack of slices along its third axis.

    Slice thickness is the third spacing minus ``gap`` (contiguous slices
    by default). Grids with a reflected axis set are made right-handed by
    reversing the slice axis first.
    """
    from .rigid import matrix_to_params

    axes = np.array(grid.axes)
    data = np.asarray(grid.data)
    origin = np.asarray(grid.origin, dtype=float)
    if np.linalg.det(axes) < 0:
        data = data[:, :, ::-1]
        origin = origin + axes[:, 2] * grid.spacing[2] * (grid.dims[2] - 1)
        axes[:, 2] = -axes[:, 2]
    thickness = grid.spacing[2] - gap
    e3 = np.abs(axes[:, 2])
    orientation = ("sagittal", "coronal", "axial")[int(np.argmax(e3))]
    m = np.eye(4)
    m[:3, :3] = axes
    center_idx = (np.asarray(grid.dims, float) - 1.0) / 2.0
    m[:3, 3] = origin + axes @ (center_idx * np.asarray(grid.spacing))
    pose = matrix_to_params(m)
    slices = [
        (
            Slice2D(
                dims=(grid.dims[0], grid.dims[1]),
                spacing=(grid.spacing[0], grid.spacing[1]),
                thickness=thickness,
                data=data[:, :, j],
            ),
            SliceState(),
        )
        for j in range(grid.dims[2])
    ]
    return SliceStack(slices, orientation, pose, gap=gap)


def resample_to(src: VoxelGrid3D, ref: VoxelGrid3D, boundary: str = "zero") -> VoxelGrid3D:
    """Trilinearly resample ``src`` onto the geometry of ``ref``."""
    ii, jj, kk = np.meshgrid(
        np.arange(ref.dims[0]), np.arange(ref.dims[1]), np.arange(ref.dims[2]),
        indexing="ij",
    )
    pts = world_from_index(ref, np.stack([ii, jj, kk], axis=-1).astype(float))
    vals = trilinear_sample(src, pts, boundary)
    return ref.with_data(vals)


def splat_trilinear(
    grid_dims: tuple[int, int, int],
    idx: np.ndarray,
    values: np.ndarray,
    weights: np.ndarray,
    num: np.ndarray,
    den: np.ndarray,
) -> None:
    """Scatter weighted values onto a voxel lattice with trilinear kernels.

    Accumulates weight*value into ``num`` and weight into ``den`` (both
    flat, length prod(dims)). Out-of-grid corners are dropped.
    """
    dims = np.asarray(grid_dims)
    i0 = np.floor(idx).astype(np.int64)
    frac = idx - i0
    nvox = int(np.prod(dims))
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        ci = i0 + np.asarray(bits)
        w = weights.copy()
        for a in range(3):
            w = w * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
        valid = np.all((ci >= 0) & (ci < dims), axis=1)
        if not np.any(valid):
            continue
        flat = np.ravel_multi_index(
            (ci[valid, 0], ci[valid, 1], ci[valid, 2]), tuple(dims)
        )
        num += np.bincount(flat, weights=w[valid] * values[valid], minlength=nvox)
        den += np.bincount(flat, weights=w[valid], minlength=nvox)


def scatter_init_volume(
    stacks: list[SliceStack],
    target_spacing: float,
    margin_mm: float = 0.0,
    align: int = 1,
    grid: VoxelGrid3D | None = None,
    return_weight: bool = False,
):
    """PSF-weighted scattered average of all slice samples onto a fresh grid.

    Every slice pixel is splatted at its (motion-transformed) world position
    and at the PSF offset cloud around it, weighted by the PSF; the result
    is the weight-normalized average. Voxels never touched stay 0.
    """
    from .acquisition import PsfModel, draw_psf_offsets, psf_covariance

    if not stacks:
        raise InputError("scatter_init_volume needs at least one stack")
    if grid is None:
        all_pts = [stack_sample_positions(s)[0] for s in stacks]
        grid = bounding_grid(
            np.concatenate(all_pts), target_spacing, margin_mm=margin_mm, align=align
        )
    nvox = int(np.prod(grid.dims))
    num = np.zeros(nvox)
    den = np.zeros(nvox)
    for stack in stacks:
        s1, s2 = stack.in_plane_spacing
        psf = PsfModel(sigma2=psf_covariance(s1, s2, stack.thickness))
        offsets, wgts = draw_psf_offsets(psf)
        for j, (sl, state) in enumerate(stack.slices):
            if state.excluded:
                continue
            base = slice_pixel_coords(sl.dims, sl.spacing).reshape(-1, 3)
            pose = stack.slice_pose(j)
            world = pose.apply(base)
            rot = pose.rotation
            if not state.transform.is_identity():
                world = state.transform.apply(world)
                rot = state.transform.rotation @ rot
            vals = sl.data.reshape(-1)
            for u, w in zip(offsets, wgts):
                pts = world + rot @ u
                idx = index_from_world(grid, pts)
                splat_trilinear(
                    grid.dims,
                    idx,
                    vals,
                    np.full(vals.shape, w),
                    num,
                    den,
                )
    out = np.zeros(nvox)
    hit = den > 1e-12
    out[hit] = num[hit] / den[hit]
    result = grid.with_data(out.reshape(grid.dims))
    if return_weight:
        return result, grid.with_data(den.reshape(grid.dims))
    return result
