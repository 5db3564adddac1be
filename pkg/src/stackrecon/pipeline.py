"""End-to-end orchestration: preprocessing, the alternating registration /
super-resolution schedule, bookkeeping, and the run report.

The reconstruction sequence is: intensity normalization against a target
stack, stack-to-stack rigid initialization, a scattered first volume, then
alternating passes of slice registration and decoder fitting on a fixed
epoch budget. All mutable state lives in the per-slice SliceState and the
decoder; input pixel data is never modified.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acquisition import PsfModel
from .errors import InputError, StackreconError
from .rigid import RigidTransform, about_center, compose, inverse
from .srr import SrrConfig, SrrFitter
from .svr import SvrConfig, fit_svr, ncc, svr_loss_graph
from .tomlio import load_toml
from .metrics import psnr, ssim
from .volume import (
    SliceStack,
    VoxelGrid3D,
    bounding_grid,
    resample_to,
    scatter_init_volume,
    slice_pixel_coords,
    stack_sample_positions,
    stack_to_grid,
    trilinear_sample,
    world_from_index,
)


@dataclass
class ReconstructionConfig:
    """Everything one reconstruction run needs, with desk-scale defaults."""

    target_spacing: float = 0.8
    total_epochs: int = 2000
    svr_interval: int = 250
    svr: SvrConfig = field(default_factory=SvrConfig)
    srr: SrrConfig = field(default_factory=SrrConfig)
    psf_mode: str = "deterministic"
    psf_samples: int = 27
    psf_seed: int = 0
    seed: int = 0
    margin_mm: float = 0.0
    normalize_intensities: bool = True
    v2v_register: bool = True
    target_stack: int = 0
    early_stop: bool = False
    early_stop_tol: float = 1e-5
    early_stop_window: int = 3

    def __post_init__(self):
        if self.target_spacing <= 0:
            raise InputError("target_spacing must be > 0")
        if not (self.total_epochs >= self.svr_interval >= 1):
            raise InputError("need total_epochs >= svr_interval >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionConfig":
        d = dict(d)
        svr_kw = d.pop("svr", {})
        srr_kw = d.pop("srr", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(svr=SvrConfig(**svr_kw), srr=SrrConfig(**srr_kw), **d)

    @classmethod
    def from_toml(cls, path) -> "ReconstructionConfig":
        return cls.from_dict(load_toml(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def psfs_for(self, stacks: list[SliceStack]) -> list[PsfModel]:
        return [
            PsfModel.for_slice(
                s.in_plane_spacing[0],
                s.in_plane_spacing[1],
                s.thickness,
                mode=self.psf_mode,
                num_samples=self.psf_samples,
                seed=self.psf_seed,
            )
            for s in stacks
        ]


def normalize_stack_intensities(
    stacks: list[SliceStack], target_stack_index: int = 0
) -> dict:
    """Initialize every slice's intensity scale against the target stack.

    For each slice of the non-target stacks, C is the least-squares scalar
    relating the slice to the target stack resampled at the slice's pixel
    positions over their overlap; target-stack slices get C = 1. Slices
    with no usable overlap fall back to a ratio of robust means and are
    flagged in the returned report.
    """
    if not stacks:
        raise InputError("no stacks")
    if not 0 <= target_stack_index < len(stacks):
        raise InputError("target_stack_index out of range")
    target = stacks[target_stack_index]
    fine = min(target.in_plane_spacing)
    vol, wgt = scatter_init_volume([target], fine, return_weight=True)
    tgt_vals = vol.data[vol.data > 0]
    robust_target = float(np.median(tgt_vals)) if tgt_vals.size else 0.0

    flagged, scales = [], {}
    for si, stack in enumerate(stacks):
        for sj, (sl, state) in enumerate(stack.slices):
            if si == target_stack_index:
                state.intensity_scale = 1.0
                scales[(si, sj)] = 1.0
                continue
            pix = slice_pixel_coords(sl.dims, sl.spacing).reshape(-1, 3)
            pts = stack.slice_pose(sj).apply(pix)
            if not state.transform.is_identity():
                pts = state.transform.apply(pts)
            r = trilinear_sample(vol, pts)
            support = trilinear_sample(wgt, pts) > 1e-9
            y = sl.data.reshape(-1)
            m = support
            denom = float(np.sum(y[m] * y[m])) if m.any() else 0.0
            if m.sum() >= 10 and denom > 0:
                c = float(np.sum(y[m] * r[m]) / denom)
            else:
                c = 0.0
            if c <= 0:
                pos = y[np.abs(y) > 0]
                robust_slice = float(np.median(np.abs(pos))) if pos.size else 1.0
                c = robust_target / robust_slice if robust_slice > 0 else 1.0
                c = c if c > 0 else 1.0
                flagged.append((si, sj))
            state.intensity_scale = c
            scales[(si, sj)] = c
    return {"scales": scales, "flagged": flagged}


def register_stacks_v2v(
    stacks: list[SliceStack],
    spacing: float | None = None,
    iters: int = 80,
    lr: float = 0.5,
) -> dict:
    """Rigidly align stacks 2..n to stack 1 on scattered thumbnails.

    Gradient ascent on volume NCC through the differentiable sampler; the
    identity pose is always a candidate, so the accepted alignment never
    scores worse than the initial one. Degenerate (zero-variance)
    thumbnails keep their pose and are flagged.
    """
    if len(stacks) < 2:
        return {"applied": [], "flagged": [], "ncc": []}
    if spacing is None:
        spacing = max(2.0, min(s.thickness for s in stacks) / 2.0)
    all_pts = np.concatenate([stack_sample_positions(s)[0] for s in stacks])
    grid = bounding_grid(all_pts, spacing, margin_mm=spacing)
    thumbs = []
    for s in stacks:
        v, w = scatter_init_volume([s], spacing, grid=grid, return_weight=True)
        thumbs.append((v, w))
    ref_vol, ref_wgt = thumbs[0]
    mask = (ref_wgt.data > 1e-9).reshape(-1)
    ref_flat = ref_vol.data.reshape(-1)
    if ref_flat[mask].std() == 0:
        return {"applied": [], "flagged": list(range(1, len(stacks))), "ncc": []}

    ii, jj, kk = np.meshgrid(*[np.arange(n) for n in grid.dims], indexing="ij")
    pts_world = world_from_index(
        grid, np.stack([ii, jj, kk], axis=-1).astype(float)
    ).reshape(-1, 3)
    center = grid.center_world
    inv_sp = 1.0 / np.asarray(grid.spacing)
    a_mat = np.diag(inv_sp) @ grid.axes.T
    a_shift = -(np.asarray(grid.origin) @ grid.axes) * inv_sp

    applied, flagged, ncc_rows = [], [], []
    for k in range(1, len(stacks)):
        mov_vol, _ = thumbs[k]
        if mov_vol.data[mov_vol.data > 0].std() == 0:
            flagged.append(k)
            continue
        tape = ad.Tape(dtype=np.float64)
        ref_c = tape.constant(ref_flat)
        mov_c = tape.constant(mov_vol.data)
        pts_c = tape.constant(pts_world)
        tau = tape.tensor(np.zeros(6), requires_grad=True)
        opt = ad.Adam([tau], lr=lr)
        best_loss, best_p = np.inf, np.zeros(6)
        for _ in range(iters):
            tape.clear()
            tau.grad = None
            moved = ad.transform_points_rigid(tau, pts_c, center)
            idx = ad.affine_map_points(moved, a_mat, a_shift)
            vals = ad.grid_sample_trilinear(mov_c, idx)
            loss_t = svr_loss_graph(ref_c, vals, mask=mask)
            loss = float(loss_t.value)
            if loss < best_loss:
                best_loss, best_p = loss, tau.value.copy()
            tape.backward(loss_t)
            opt.step()
        ncc_before = ncc(ref_flat[mask], mov_vol.data.reshape(-1)[mask])
        ncc_after = 1.0 - best_loss
        if np.any(best_p != 0.0) and ncc_after > ncc_before:
            t = about_center(best_p[:3], best_p[3:], center)
            stacks[k].stack_pose = compose(inverse(t), stacks[k].stack_pose)
            applied.append(k)
        ncc_rows.append({"stack": k, "before": ncc_before, "after": max(ncc_after, ncc_before)})
    return {"applied": applied, "flagged": flagged, "ncc": ncc_rows}


def stack_upsample_baseline(stack: SliceStack, ref: VoxelGrid3D) -> VoxelGrid3D:
    """Naive baseline: pack the stack at nominal geometry and trilinearly
    resample it onto the reference grid."""
    return resample_to(stack_to_grid(stack), ref)


def _stage(report: dict, name: str):
    report["stages"].append(name)


class StageError(StackreconError):
    """Wraps a stage failure with the stage tag and the partial report."""

    def __init__(self, stage: str, cause: Exception, report: dict):
        super().__init__(f"[stage {stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.partial_report = report


def reconstruct(
    stacks: list[SliceStack],
    config: ReconstructionConfig,
    gt: VoxelGrid3D | None = None,
) -> tuple[VoxelGrid3D, dict]:
    """Full pipeline: normalize -> align -> scatter init -> alternate
    SVR/SRR on the epoch budget -> final volume plus run report.

    When a ground-truth volume is supplied the report additionally carries
    PSNR/SSIM of the scatter init, of each naive single-stack upsampling
    baseline, and of the final reconstruction (all on the GT grid).
    """
    if not stacks:
        raise InputError("reconstruct needs at least one stack")
    t_start = time.perf_counter()
    report: dict = {"stages": [], "config": config.to_dict(), "timing": {}}
    psfs = config.psfs_for(stacks)
    stage = "init"
    try:
        if config.normalize_intensities and len(stacks) > 1:
            stage = "normalize"
            report["normalize"] = normalize_stack_intensities(stacks, config.target_stack)
            _stage(report, stage)
        if config.v2v_register and len(stacks) > 1:
            stage = "v2v_register"
            report["v2v"] = register_stacks_v2v(stacks)
            _stage(report, stage)

        stage = "scatter_init"
        align = 2 ** config.srr.levels
        all_pts = np.concatenate([stack_sample_positions(s)[0] for s in stacks])
        hr_grid = bounding_grid(
            all_pts, config.target_spacing, margin_mm=config.margin_mm, align=align
        )
        x = scatter_init_volume(stacks, config.target_spacing, grid=hr_grid)
        _stage(report, stage)

        if gt is not None:
            report["baselines"] = {
                "scatter_init": _eval_against(x, gt),
                "stack_upsample": [
                    _eval_against(stack_upsample_baseline(s, gt), gt, resample=False)
                    for s in stacks
                ],
            }

        stage = "alternate"
        fitter = SrrFitter(
            stacks,
            hr_grid,
            config.srr,
            psf_by_stack=psfs,
            motion_center=hr_grid.center_world,
        )
        n_passes = math.ceil(config.total_epochs / config.svr_interval)
        schedule, svr_snapshots = [], []
        epochs_done = 0
        for p in range(n_passes):
            svr_res = fit_svr(
                stacks,
                x,
                config.svr,
                psf_by_stack=psfs,
                motion_center=hr_grid.center_world,
            )
            fitter.refresh_plans()
            svr_snapshots.append(svr_res.report["mean_loss"])
            chunk = min(config.svr_interval, config.total_epochs - epochs_done)
            fitter.run(chunk)
            epochs_done += chunk
            x = fitter.volume()
            schedule.append({"pass": p, "svr_mean_loss": svr_res.report["mean_loss"], "srr_epochs": chunk})
            if config.early_stop and len(svr_snapshots) > config.early_stop_window:
                window = svr_snapshots[-config.early_stop_window - 1 :]
                if max(window) - min(window) < config.early_stop_tol:
                    break
        _stage(report, stage)

        report["schedule"] = schedule
        report["svr_passes"] = len(schedule)
        report["total_epochs"] = epochs_done
        report["svr_snapshots"] = svr_snapshots
        report["svr_snapshot_best"] = list(np.minimum.accumulate(svr_snapshots))
        report["srr"] = fitter.report()
        report["transforms"] = {
            f"{si}:{sj}": list(map(float, st.transform.params))
            for si, s in enumerate(stacks)
            for sj, (_, st) in enumerate(s.slices)
        }
        if gt is not None:
            report["final_vs_gt"] = _eval_against(x, gt)
        report["checksum"] = run_checksum(x, report)
    except StackreconError as e:
        raise StageError(stage, e, report) from e
    report["timing"]["total_s"] = time.perf_counter() - t_start
    return x, report


def _eval_against(vol: VoxelGrid3D, gt: VoxelGrid3D, resample: bool = True) -> dict:
    v = resample_to(vol, gt) if resample else vol
    return {"psnr": psnr(v.data, gt.data), "ssim": ssim(v.data, gt.data)}


def run_checksum(volume: VoxelGrid3D, report: dict) -> str:
    """Deterministic digest of the run outcome (volume, transforms, traces).

    Timing and the checksum itself are excluded, so two runs with the same
    config and seeds produce identical digests in single-thread mode.
    """
    h = hashlib.sha256()
    h.update(np.asarray(volume.data, dtype=np.float32).tobytes())
    for key in sorted(report.get("transforms", {})):
        h.update(key.encode())
        h.update(np.asarray(report["transforms"][key], dtype=np.float64).tobytes())
    trace = report.get("srr", {}).get("trace", [])
    for row in trace:
        h.update(np.float64(row["loss"]).tobytes())
    return h.hexdigest()
