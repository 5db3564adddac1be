"""Unsupervised super-resolution through an under-parameterized decoder.

The high-resolution volume is the output of a small generator (fixed
random seed tensor, per-level trilinear upsampling + channel mixing +
normalization, sigmoid output) whose parameters are fitted by comparing
forward-model slice predictions against the observed slices. The network's
limited capacity acts as the image prior: no training data is involved.

The data term is a Gaussian log-likelihood with a learnable per-slice
noise scale w_k (parameterized as exp(rho_k) for positivity), which
automatically down-weights slices the model cannot explain; total
variation regularizes local intensity consistency. Per-slice intensity
scales C_k are co-optimized with a relative step clamp, with one scale
frozen to pin the global intensity gauge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acquisition import (
    PsfModel,
    SliceGeometry,
    draw_psf_offsets,
    frozen_slice_plan,
    predict_slice_fixed,
)
from .errors import InputError, NumericalError
from .svr import default_psfs
from .volume import SliceStack, VoxelGrid3D


class DeepDecoder:
    """Fixed-noise generator mapping a small seed tensor to a volume in (0, 1).

    Per level: upsample2x -> channel_mix -> relu -> channel_norm; a final
    1-channel mix and sigmoid produce the output. The parameter count is
    asserted to stay below the output voxel count (that under-parameterization
    is the whole point of using this architecture as a prior).
    """

    def __init__(
        self,
        tape: ad.Tape,
        out_dims: tuple[int, int, int],
        levels: int = 4,
        channels: int = 64,
        seed: int = 0,
        z_scale: float = 0.1,
        sigma_v: float | None = None,
    ):
        factor = 2**levels
        if any(n % factor != 0 or n < factor for n in out_dims):
            raise InputError(
                f"output dims {out_dims} must be positive multiples of 2^levels = {factor}"
            )
        self.tape = tape
        self.out_dims = tuple(int(n) for n in out_dims)
        self.levels = levels
        self.channels = channels
        rng = np.random.default_rng(seed)
        zdims = tuple(n // factor for n in out_dims)
        self.z = rng.uniform(0.0, z_scale, size=(channels,) + zdims)
        self.sigma_v = float(sigma_v) if sigma_v is not None else 0.03 * float(self.z.std())

        def mix_init(cout, cin):
            return rng.standard_normal((cout, cin)) * np.sqrt(2.0 / cin)

        self.mixes = [
            tape.tensor(mix_init(channels, channels), requires_grad=True)
            for _ in range(levels)
        ]
        self.gains = [
            tape.tensor(np.ones(channels), requires_grad=True) for _ in range(levels)
        ]
        self.biases = [
            tape.tensor(np.zeros(channels), requires_grad=True) for _ in range(levels)
        ]
        self.w_out = tape.tensor(mix_init(1, channels), requires_grad=True)
        self.b_out = tape.tensor(np.zeros(1), requires_grad=True)
        self.params = self.mixes + self.gains + self.biases + [self.w_out, self.b_out]
        voxels = int(np.prod(out_dims))
        if self.parameter_count >= voxels:
            raise InputError(
                f"decoder is over-parameterized: {self.parameter_count} parameters "
                f"for {voxels} output voxels"
            )

    @property
    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params))

    @property
    def compression_ratio(self) -> float:
        """Parameters per output voxel (< 1 by construction)."""
        return self.parameter_count / float(np.prod(self.out_dims))

    def decode(self, perturbation_on: bool = False, rng: np.random.Generator | None = None) -> ad.DiffTensor:
        """Generate the volume tensor (nx, ny, nz), values strictly in (0, 1).

        With perturbation on, fresh N(0, sigma_v^2) noise is added to the
        seed tensor for this call only; with it off the output is a pure
        function of (z, parameters).
        """
        zv = self.z
        if perturbation_on and self.sigma_v > 0:
            if rng is None:
                raise InputError("decode with perturbation needs an RNG")
            zv = zv + rng.normal(0.0, self.sigma_v, size=zv.shape)
        h = self.tape.constant(zv)
        for lvl in range(self.levels):
            h = ad.upsample2x_trilinear(h)
            h = ad.channel_mix(h, self.mixes[lvl])
            h = ad.relu(h)
            h = ad.channel_norm(h, self.gains[lvl], self.biases[lvl])
        h = ad.channel_mix(h, self.w_out, self.b_out)
        h = ad.sigmoid(h)
        return ad.reshape(h, self.out_dims)


def total_variation(x: ad.DiffTensor, eps: float = 1e-8) -> ad.DiffTensor:
    """Anisotropic L1 total variation of a volume tensor (smoothed |.|)."""
    return ad.total_variation(x, eps=eps)


def srr_residual_loss(
    y_k: ad.DiffTensor,
    y_hat_k: ad.DiffTensor,
    rho_k: ad.DiffTensor,
    reduction: str = "mean",
) -> ad.DiffTensor:
    """Per-slice outlier-aware data term with w_k = exp(rho_k):

        residual^2 / (2 w^2) + log(w)

    using the mean (default) or sum of squared residuals over pixels. The
    stationary point over w for a frozen residual is w* = rms(residual).
    """
    resid = ad.sub(y_k, y_hat_k)
    sq = ad.square(resid)
    msq = ad.mean(sq) if reduction == "mean" else ad.sum_(sq)
    inv_2w2 = ad.scalar_mul(ad.exp(ad.scalar_mul(rho_k, -2.0)), 0.5)
    return ad.add(ad.mul(msq, inv_2w2), rho_k)


@dataclass
class SrrConfig:
    """Super-resolution fitting knobs."""

    tv_weight: float = 1e-4
    sigma_v: float | None = None  # None: 0.03 * std(z)
    epochs: int = 400
    lr: float = 0.01
    loss_form: str = "gaussian_outlier"
    levels: int = 4
    channels: int = 64
    seed: int = 0
    w_floor: float = 1e-4
    c_clip: float = 0.1
    residual_reduction: str = "mean"
    dtype: str = "float32"
    optimize_scales: bool = True
    trace_w_every: int = 50

    def __post_init__(self):
        if self.tv_weight < 0:
            raise InputError("tv_weight must be >= 0")
        if self.sigma_v is not None and self.sigma_v < 0:
            raise InputError("sigma_v must be >= 0")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.loss_form not in ("gaussian_outlier", "plain_l2"):
            raise InputError(f"unknown loss form {self.loss_form!r}")
        if self.residual_reduction not in ("mean", "sum"):
            raise InputError(f"unknown reduction {self.residual_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise InputError(f"unknown dtype {self.dtype!r}")


class SrrFitter:
    """Owns one decoder and its optimization state across epoch chunks.

    The alternating reconstruction loop interleaves registration passes
    with epochs of this fitter; after transforms change, call
    :meth:`refresh_plans` so slice predictions sample the new poses.
    """

    def __init__(
        self,
        stacks: list[SliceStack],
        hr_grid: VoxelGrid3D,
        config: SrrConfig,
        psf_by_stack: list[PsfModel] | None = None,
        motion_center=None,
        gauge_slice: tuple[int, int] | None = (0, 0),
    ):
        self.stacks = stacks
        self.grid = hr_grid
        self.config = config
        dtype = np.float32 if config.dtype == "float32" else np.float64
        self.tape = ad.Tape(dtype=dtype)
        self.decoder = DeepDecoder(
            self.tape,
            hr_grid.dims,
            levels=config.levels,
            channels=config.channels,
            seed=config.seed,
            sigma_v=config.sigma_v,
        )
        if psf_by_stack is None:
            psf_by_stack = default_psfs(stacks)
        self.psf_by_stack = psf_by_stack
        self.center = (
            np.asarray(motion_center, float)
            if motion_center is not None
            else hr_grid.center_world
        )
        self.entries = []
        scale = 0.0
        for si, stack in enumerate(stacks):
            offsets, weights = draw_psf_offsets(psf_by_stack[si])
            for sj, (sl, state) in enumerate(stack.slices):
                if state.excluded:
                    continue
                scale = max(scale, float(np.max(np.abs(sl.data))))
                self.entries.append(
                    {
                        "key": (si, sj),
                        "slice": sl,
                        "state": state,
                        "geom": SliceGeometry.from_stack(stack, sj),
                        "offsets": offsets,
                        "weights": weights,
                    }
                )
        if not self.entries:
            raise InputError("fit_srr: no usable slices")
        if scale <= 0:
            raise InputError("slices are identically zero; nothing to reconstruct")
        self.intensity_scale = scale
        for e in self.entries:
            e["y"] = self.tape.constant(e["slice"].data / scale)
            e["rho"] = self.tape.tensor(0.0, requires_grad=True)
            trainable = config.optimize_scales and e["key"] != gauge_slice
            e["c"] = self.tape.tensor(float(e["state"].intensity_scale), requires_grad=trainable)
            e["c_prev"] = float(e["state"].intensity_scale)
        self.params = list(self.decoder.params)
        if config.loss_form == "gaussian_outlier":
            self.params += [e["rho"] for e in self.entries]
        self.params += [e["c"] for e in self.entries if e["c"].requires_grad]
        self.opt = ad.Adam(self.params, lr=config.lr)
        self.rng_v = np.random.default_rng(config.seed + 1)
        self.epoch = 0
        self.trace: list[dict] = []
        self.ema_loss: float | None = None
        self.refresh_plans()

    def refresh_plans(self) -> None:
        """Rebuild the frozen sample plans from the current slice transforms."""
        for e in self.entries:
            e["plan"] = frozen_slice_plan(
                self.grid,
                e["geom"],
                e["state"],
                e["offsets"],
                motion_center=self.center,
                dtype=self.tape.dtype,
            )

    def _epoch_loss(self, perturb: bool) -> tuple[ad.DiffTensor, float, float]:
        vol = self.decoder.decode(perturbation_on=perturb, rng=self.rng_v)
        total = None
        for e in self.entries:
            pred = predict_slice_fixed(vol, e["plan"], e["weights"], e["c"])
            if self.config.loss_form == "gaussian_outlier":
                term = srr_residual_loss(
                    e["y"], pred, e["rho"], self.config.residual_reduction
                )
            else:
                resid = ad.sub(e["y"], pred)
                sq = ad.square(resid)
                term = (
                    ad.mean(sq)
                    if self.config.residual_reduction == "mean"
                    else ad.sum_(sq)
                )
            total = term if total is None else ad.add(total, term)
        data_val = float(total.value)
        if self.config.tv_weight > 0:
            tv = total_variation(vol)
            tv_val = float(tv.value)
            total = ad.add(total, ad.scalar_mul(tv, self.config.tv_weight))
        else:
            tv_val = 0.0
        return total, data_val, tv_val

    def run(self, epochs: int) -> None:
        """Advance the fit by ``epochs`` optimization steps."""
        cfg = self.config
        for _ in range(epochs):
            self.tape.clear()
            self.opt.zero_grad()
            loss_t, data_val, tv_val = self._epoch_loss(perturb=True)
            loss = float(loss_t.value)
            if not np.isfinite(loss):
                err = NumericalError(f"non-finite SRR loss at epoch {self.epoch}")
                err.snapshot = self.snapshot()
                raise err
            self.tape.backward(loss_t)
            self.opt.step()
            # positivity floor for w and a trust region for the scales
            floor = math.log(cfg.w_floor)
            for e in self.entries:
                if e["rho"].value < floor:
                    e["rho"].value = np.asarray(floor, dtype=self.tape.dtype)
                if e["c"].requires_grad:
                    lo = e["c_prev"] * (1.0 - cfg.c_clip)
                    hi = e["c_prev"] * (1.0 + cfg.c_clip)
                    e["c"].value = np.clip(e["c"].value, lo, hi)
                    e["c_prev"] = float(e["c"].value)
            self.ema_loss = (
                loss if self.ema_loss is None else 0.99 * self.ema_loss + 0.01 * loss
            )
            row = {
                "epoch": self.epoch,
                "data": data_val,
                "tv": tv_val,
                "loss": loss,
                "ema": self.ema_loss,
            }
            if self.epoch % cfg.trace_w_every == 0:
                row["w"] = [float(np.exp(e["rho"].value)) for e in self.entries]
            self.trace.append(row)
            self.epoch += 1
        # push fitted per-slice state back where the pipeline reads it
        for e in self.entries:
            e["state"].outlier_weight = float(np.exp(e["rho"].value))
            e["state"].intensity_scale = float(e["c"].value)

    def data_term(self) -> float:
        """Current data term with perturbation off (snapshot metric)."""
        self.tape.clear()
        _, data_val, _ = self._epoch_loss(perturb=False)
        self.tape.clear()
        return data_val

    def volume(self) -> VoxelGrid3D:
        """Decode (perturbation off) and undo the intensity normalization."""
        self.tape.clear()
        vol = self.decoder.decode(perturbation_on=False)
        data = np.asarray(vol.value, dtype=np.float64) * self.intensity_scale
        self.tape.clear()
        return self.grid.with_data(data)

    def snapshot(self) -> dict:
        return {
            "epoch": self.epoch,
            "w": [float(np.exp(e["rho"].value)) for e in self.entries],
            "c": [float(e["c"].value) for e in self.entries],
            "trace_tail": self.trace[-5:],
        }

    def report(self) -> dict:
        return {
            "epochs": self.epoch,
            "parameters": self.decoder.parameter_count,
            "compression_ratio": self.decoder.compression_ratio,
            "intensity_scale": self.intensity_scale,
            "w": {str(e["key"]): float(np.exp(e["rho"].value)) for e in self.entries},
            "c": {str(e["key"]): float(e["c"].value) for e in self.entries},
            "adam_rejections": self.opt.state.rejections,
            "trace": self.trace,
        }


def fit_srr(
    stacks: list[SliceStack],
    x_init_hint: VoxelGrid3D,
    config: SrrConfig,
    psf_by_stack: list[PsfModel] | None = None,
    motion_center=None,
) -> tuple[VoxelGrid3D, dict]:
    """One-shot super-resolution fit on the geometry of ``x_init_hint``.

    The hint supplies the target grid (its dims must be divisible by
    2^levels); slice transforms are taken from the stacks' current state.
    Returns the reconstructed volume and the run report (loss trace,
    final w_k / C_k, parameter accounting).
    """
    fitter = SrrFitter(
        stacks, x_init_hint, config, psf_by_stack=psf_by_stack, motion_center=motion_center
    )
    fitter.run(config.epochs)
    return fitter.volume(), fitter.report()
