"""Ground-truth phantoms and motion-corrupted stack synthesis.

Stacks are generated through the same forward model the reconstruction
inverts (slice prediction at a known per-slice pose plus additive Gaussian
noise), so a noiseless simulated slice is reproduced exactly by the
forward model at the ground-truth transform. Per-slice trajectories come
from a control-point random walk with uniform offset increments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .acquisition import PsfModel, SliceGeometry, predict_slice
from .errors import InputError
from .nifti import write_nifti
from .rigid import RigidTransform, save_transforms
from .tomlio import dump_toml
from .volume import Slice2D, SliceStack, SliceState, VoxelGrid3D, stack_to_grid

GROUP_OFFSET_RANGES = {"A": 4.0, "B": 9.0}
_ORIENT_ROT = {
    "axial": (0.0, 0.0, 0.0),
    "coronal": (90.0, 0.0, 0.0),
    "sagittal": (0.0, 90.0, 0.0),
}


@dataclass(frozen=True)
class MotionConfig:
    """Random-walk motion trajectory parameters.

    offset_range is the half-width i of the uniform U(-i, i) offsets, used
    for all six parameters (mm for translations, degrees for rotations).
    """

    offset_range: float
    control_point_stride: int = 4
    seed: int = 0
    interpolation: str = "linear"
    walk_mode: str = "incremental"

    def __post_init__(self):
        if self.offset_range < 0:
            raise InputError("offset_range must be >= 0")
        if self.control_point_stride < 1:
            raise InputError("control_point_stride must be >= 1")
        if self.interpolation not in ("linear", "spline"):
            raise InputError(f"unknown interpolation {self.interpolation!r}")
        if self.walk_mode not in ("incremental", "absolute"):
            raise InputError(f"unknown walk_mode {self.walk_mode!r}")


def random_walk_control_points(n_slices: int, config: MotionConfig):
    """Control-point slice positions, values (n_cp, 6) and raw increments.

    The first control point is the identity plus one U(-i, i) offset; each
    subsequent one adds an independent U(-i, i) increment per parameter
    (incremental mode) or redraws absolute U(-i, i) offsets (absolute mode).
    """
    if n_slices < 1:
        raise InputError("n_slices must be >= 1")
    positions = list(range(0, n_slices, config.control_point_stride))
    if positions[-1] != n_slices - 1:
        positions.append(n_slices - 1)
    rng = np.random.default_rng(config.seed)
    i = config.offset_range
    draws = rng.uniform(-i, i, size=(len(positions), 6)) if i > 0 else np.zeros(
        (len(positions), 6)
    )
    if config.walk_mode == "incremental":
        values = np.cumsum(draws, axis=0)
    else:
        values = draws
    return np.asarray(positions), values, draws


def random_walk_trajectory(n_slices: int, config: MotionConfig) -> list[RigidTransform]:
    """Per-slice rigid transforms along a control-point random walk."""
    positions, values, _ = random_walk_control_points(n_slices, config)
    if len(positions) == 1:
        per_slice = np.repeat(values, n_slices, axis=0)
    elif config.interpolation == "linear":
        per_slice = np.stack(
            [np.interp(np.arange(n_slices), positions, values[:, p]) for p in range(6)],
            axis=1,
        )
    else:
        spline = CubicSpline(positions, values, axis=0)
        per_slice = spline(np.arange(n_slices))
    return [RigidTransform.from_params(p) for p in per_slice]


@dataclass(frozen=True)
class PhantomSpec:
    """Nested-ellipsoid phantom with three tissue classes and a smooth bias."""

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    class_means: tuple[float, float, float] = (0.25, 0.55, 0.85)
    class_std: float = 0.02
    bias_amplitude: float = 0.05
    blur_voxels: float = 0.7

    def __post_init__(self):
        if min(self.dims) < 16:
            raise InputError("phantom dims must be at least 16 per axis")
        means = np.asarray(self.class_means)
        if np.any(means < 0) or np.any(means > 1):
            raise InputError("class means must lie in [0, 1]")
        if np.min(np.diff(np.sort(means))) < 5 * self.class_std:
            raise InputError("class means must be separated by >= 5 class stds")


def _ellipsoid_mask(shape, center, semi, rng=None):
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    q = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi))
    return q <= 1.0


def make_phantom_with_labels(spec: PhantomSpec) -> tuple[VoxelGrid3D, np.ndarray]:
    """Phantom volume plus its integer class labels (0 = background).

    A middle-class head ellipsoid holds a dark core and two bright interior
    cavities; keeping the number of class interfaces low leaves most tissue
    voxels pure, which the histogram analyses rely on.
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.dims
    c = (np.asarray(shape, float) - 1.0) / 2.0
    jig = rng.uniform(0.95, 1.05, size=12).reshape(4, 3)
    head_semi = np.asarray(shape) * 0.42 * jig[0]
    core_semi = head_semi * 0.60 * jig[1] / jig[0]

    labels = np.zeros(shape, dtype=np.int8)
    labels[_ellipsoid_mask(shape, c, head_semi)] = 2  # head: middle class
    labels[_ellipsoid_mask(shape, c, core_semi)] = 1  # core: darkest class
    # two bright interior cavities, placed asymmetrically
    for sgn in (-1.0, 1.0):
        vc = c + sgn * np.asarray(shape) * np.array([0.05, 0.08, 0.04]) * jig[3]
        vs = np.asarray(shape) * np.array([0.07, 0.11, 0.13])
        labels[_ellipsoid_mask(shape, vc, vs)] = 3

    vol = np.zeros(shape, dtype=np.float64)
    for k, mu in enumerate(spec.class_means, start=1):
        m = labels == k
        vol[m] = mu + rng.normal(0.0, spec.class_std, size=int(m.sum()))
    # low-frequency multiplicative bias
    coarse = rng.standard_normal((4, 4, 4))
    zoom = np.array(shape) / 4.0
    grids = np.meshgrid(*[np.arange(n) / z for n, z in zip(shape, zoom)], indexing="ij")
    idx = np.stack(grids, axis=-1)
    from .volume import sample_at_index

    bias = sample_at_index(coarse, idx.reshape(-1, 3), "clamp").reshape(shape)
    bias = bias / max(np.abs(bias).max(), 1e-12)
    vol *= 1.0 + spec.bias_amplitude * bias
    if spec.blur_voxels > 0:
        vol = gaussian_filter(vol, spec.blur_voxels, mode="constant")
    vol = np.clip(vol, 0.0, 1.0)
    grid = VoxelGrid3D(shape, spec.spacing, (0.0, 0.0, 0.0), np.eye(3), vol)
    return grid, labels


def make_phantom(spec: PhantomSpec) -> VoxelGrid3D:
    """Deterministic three-class phantom (see :func:`make_phantom_with_labels`)."""
    return make_phantom_with_labels(spec)[0]


def make_smooth_phantom(
    dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0), seed: int = 0, n_blobs: int = 8
) -> VoxelGrid3D:
    """Smooth, textured phantom (sum of random Gaussians) for registration
    tests: everywhere differentiable, no flat plateaus."""
    rng = np.random.default_rng(seed)
    shape = dims
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    vol = np.zeros(shape)
    for _ in range(n_blobs):
        center = rng.uniform(0.25, 0.75, 3) * np.asarray(shape)
        width = rng.uniform(0.08, 0.22, 3) * np.asarray(shape)
        amp = rng.uniform(0.4, 1.0)
        q = sum(((g - c) / w) ** 2 for g, c, w in zip(grids, center, width))
        vol += amp * np.exp(-0.5 * q)
    vol -= vol.min()
    vol = 0.1 + 0.8 * vol / vol.max()
    return VoxelGrid3D(shape, spacing, (0.0, 0.0, 0.0), np.eye(3), vol)


def stack_pose_for_orientation(orientation: str, center_world) -> RigidTransform:
    """Canonical stack pose: orientation rotation with the stack centered at
    ``center_world``."""
    if orientation not in _ORIENT_ROT:
        raise InputError(f"unknown orientation {orientation!r}")
    return RigidTransform(alpha=_ORIENT_ROT[orientation], d=tuple(np.asarray(center_world, float)))


def simulate_stack(
    gt: VoxelGrid3D,
    orientation: str,
    thickness: float,
    in_plane: float,
    motion: MotionConfig,
    noise_frac: float = 0.05,
    psf: PsfModel | None = None,
    noise_seed: int | None = None,
) -> tuple[SliceStack, list[RigidTransform]]:
    """Synthesize one motion-corrupted stack from a ground-truth volume.

    Each slice is the forward-model prediction of the GT at its trajectory
    pose (intensity scale 1) plus N(0, (noise_frac * max(gt))^2) noise.
    Ground-truth transforms are returned separately; the stack's own state
    is reset to identity, as reconstruction would see it.
    """
    if thickness < in_plane:
        raise InputError("thickness must be >= in-plane resolution")
    extent = max((n - 1) * s for n, s in zip(gt.dims, gt.spacing))
    n_pix = int(np.floor(extent / in_plane)) + 1
    n_slices = int(np.floor(extent / thickness)) + 1
    pose = stack_pose_for_orientation(orientation, gt.center_world)
    if psf is None:
        psf = PsfModel.for_slice(in_plane, in_plane, thickness)
    trajectory = random_walk_trajectory(n_slices, motion)
    rng = np.random.default_rng(motion.seed + 7919 if noise_seed is None else noise_seed)
    sigma = noise_frac * float(np.max(gt.data))

    proto = SliceStack(
        slices=[
            (
                Slice2D((n_pix, n_pix), (in_plane, in_plane), thickness, np.zeros((n_pix, n_pix))),
                SliceState(),
            )
        ]
        * n_slices,
        nominal_orientation=orientation,
        stack_pose=pose,
    )
    slices = []
    for j in range(n_slices):
        geom = SliceGeometry.from_stack(proto, j)
        pred = predict_slice(
            gt, geom, SliceState(transform=trajectory[j]), psf, motion_center=gt.center_world
        )
        if noise_frac > 0:
            pred = pred + rng.normal(0.0, sigma, size=pred.shape)
        slices.append(
            (Slice2D((n_pix, n_pix), (in_plane, in_plane), thickness, pred), SliceState())
        )
    stack = SliceStack(slices, orientation, pose)
    return stack, trajectory


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def simulate_dataset(
    group: str,
    gts: list[tuple[str, VoxelGrid3D]],
    root,
    thickness: float = 6.0,
    in_plane: float = 0.8,
    noise_frac: float = 0.05,
    control_point_stride: int = 4,
    interpolation: str = "linear",
    walk_mode: str = "incremental",
    seed: int = 0,
) -> list[Path]:
    """Write a motion-corrupted dataset: three orthogonal stacks per GT.

    Layout per ground truth: <root>/<gt_id>/{axial,coronal,sagittal}.nii
    plus gt.nii, transforms_gt.txt (all stacks concatenated in that order)
    and manifest.toml recording every parameter, seed, transform row and
    file digest. Regeneration with the same seed is byte-identical.
    """
    if group not in GROUP_OFFSET_RANGES:
        raise InputError(f"unknown dataset group {group!r}")
    if not gts:
        raise InputError("need at least one ground-truth volume")
    offset = GROUP_OFFSET_RANGES[group]
    root = Path(root)
    manifests = []
    for g_idx, (gt_id, gt) in enumerate(gts):
        gt_dir = root / str(gt_id)
        gt_dir.mkdir(parents=True, exist_ok=True)
        write_nifti(gt, gt_dir / "gt.nii")
        rows = []
        files = {"gt.nii": _sha256(gt_dir / "gt.nii")}
        transform_lines = []
        for o_idx, orientation in enumerate(("axial", "coronal", "sagittal")):
            stack_seed = seed + 1000 * g_idx + 100 * o_idx
            motion = MotionConfig(
                offset_range=offset,
                control_point_stride=control_point_stride,
                seed=stack_seed,
                interpolation=interpolation,
                walk_mode=walk_mode,
            )
            stack, truth = simulate_stack(
                gt, orientation, thickness, in_plane, motion, noise_frac
            )
            out = gt_dir / f"{orientation}.nii"
            write_nifti(stack_to_grid(stack), out)
            files[out.name] = _sha256(out)
            rows.append(
                {
                    "orientation": orientation,
                    "seed": stack_seed,
                    "n_slices": stack.n_slices,
                }
            )
            transform_lines.append(f"# {orientation}")
            for t in truth:
                transform_lines.append(" ".join(f"{v:.17g}" for v in t.params))
        tf_path = gt_dir / "transforms_gt.txt"
        tf_path.write_text("\n".join(transform_lines) + "\n")
        files[tf_path.name] = _sha256(tf_path)

        manifest = {
            "group": group,
            "offset_range": offset,
            "thickness": thickness,
            "in_plane": in_plane,
            "noise_frac": noise_frac,
            "control_point_stride": control_point_stride,
            "interpolation": interpolation,
            "walk_mode": walk_mode,
            "seed": seed,
            "gt_id": str(gt_id),
            "stacks": {
                r["orientation"]: [r["seed"], r["n_slices"]] for r in rows
            },
            "transforms": {"rows": [l for l in transform_lines if not l.startswith("#")]},
            "files": files,
        }
        mpath = gt_dir / "manifest.toml"
        dump_toml(manifest, mpath)
        manifests.append(mpath)
    return manifests
