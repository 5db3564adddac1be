"""Unsupervised slice-to-volume registration.

Each slice's 6-DoF pose is recovered by maximizing normalized
cross-correlation between the observed slice and the forward-model
prediction of the current volume at the hypothesized pose. Two routes are
available and composable:

* amortized: a compact dual-branch localization network (strided conv
  encoders over the slice and a volume thumbnail, pooled features, small
  regression head) predicts a bounded pose per slice; trained on this scan
  only, no external data.
* direct: plain gradient refinement of the 6 parameters through the
  differentiable forward model, with best-loss snapshotting so the result
  is never worse than the starting pose.

The default mode runs the network first and polishes with direct
refinement, keeping whichever optimum is better per slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acquisition import PsfModel, SliceGeometry, draw_psf_offsets, predict_slice
from .errors import InputError, NumericalError
from .rigid import RigidTransform
from .volume import SliceState, SliceStack, VoxelGrid3D, sample_at_index

# ---------------------------------------------------------------------------
# normalized cross-correlation


def ncc(a, b, mask=None, return_flag: bool = False):
    """Pearson correlation of two images over an optional mask, in [-1, 1].

    Zero-variance input yields 0.0 with a degeneracy flag instead of NaN.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise InputError("ncc: shape mismatch")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.shape != a.shape:
            raise InputError("ncc: mask shape mismatch")
        a, b = a[m], b[m]
    if a.size < 2:
        raise InputError("ncc needs at least 2 unmasked pixels")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt(np.sum(ac * ac) * np.sum(bc * bc))
    if denom == 0.0:
        return (0.0, True) if return_flag else 0.0
    val = float(np.clip(np.sum(ac * bc) / denom, -1.0, 1.0))
    return (val, False) if return_flag else val


def ncc_graph(a: ad.DiffTensor, b: ad.DiffTensor, mask=None, eps: float = 1e-8) -> ad.DiffTensor:
    """Differentiable NCC with an epsilon-guarded denominator."""
    if a.value.shape != b.value.shape:
        raise InputError("ncc_graph: shape mismatch")
    tape = a.tape
    if mask is None:
        za = ad.scalar_add(a, ad.scalar_mul(ad.mean(a), -1.0))
        zb = ad.scalar_add(b, ad.scalar_mul(ad.mean(b), -1.0))
        cov = ad.mean(ad.mul(za, zb))
        va = ad.mean(ad.square(za))
        vb = ad.mean(ad.square(zb))
    else:
        m = np.asarray(mask, dtype=float)
        n = float(m.sum())
        if n < 2:
            raise InputError("ncc_graph needs at least 2 unmasked pixels")
        mc = tape.constant(m)
        inv_n = 1.0 / n
        mu_a = ad.scalar_mul(ad.sum_(ad.mul(a, mc)), inv_n)
        mu_b = ad.scalar_mul(ad.sum_(ad.mul(b, mc)), inv_n)
        za = ad.mul(ad.scalar_add(a, ad.scalar_mul(mu_a, -1.0)), mc)
        zb = ad.mul(ad.scalar_add(b, ad.scalar_mul(mu_b, -1.0)), mc)
        cov = ad.scalar_mul(ad.sum_(ad.mul(za, zb)), inv_n)
        va = ad.scalar_mul(ad.sum_(ad.square(za)), inv_n)
        vb = ad.scalar_mul(ad.sum_(ad.square(zb)), inv_n)
    denom = ad.scalar_add(ad.sqrt(ad.mul(va, vb)), eps)
    return ad.div(cov, denom)


def svr_loss(y_k, y_hat) -> float:
    """Registration loss 1 - NCC (smaller is better, 0 at a perfect match)."""
    return 1.0 - ncc(y_k, y_hat)


def svr_loss_graph(y_k: ad.DiffTensor, y_hat: ad.DiffTensor, mask=None, eps: float = 1e-8) -> ad.DiffTensor:
    return ad.scalar_add(ad.scalar_mul(ncc_graph(y_k, y_hat, mask, eps), -1.0), 1.0)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SvrConfig:
    """Knobs for one registration phase."""

    mode: str = "amortized_then_direct"
    lr_amortized: float = 1e-3
    iters_amortized: int = 150
    lr_direct: float = 0.5
    iters_direct: int = 80
    ncc_epsilon: float = 1e-8
    thumbnail: int = 24
    channels: int = 32
    max_deg: float = 15.0
    max_mm: float = 15.0
    flag_loss_threshold: float = 0.5
    exclude_flagged: bool = False
    grad_tol: float = 1e-7
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in ("amortized", "direct", "amortized_then_direct"):
            raise InputError(f"unknown SVR mode {self.mode!r}")
        if self.iters_amortized < 1 or self.iters_direct < 1:
            raise InputError("iteration counts must be >= 1")
        if self.thumbnail < 4:
            raise InputError("thumbnail size too small")
        if self.dtype not in ("float32", "float64"):
            raise InputError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ---------------------------------------------------------------------------
# localization network


def volume_thumbnail(x: VoxelGrid3D, size: int) -> np.ndarray:
    """Fixed-size resampled, standardized view of the volume for the 3D branch."""
    axes_pts = [np.linspace(0.0, n - 1.0, size) for n in x.dims]
    ii, jj, kk = np.meshgrid(*axes_pts, indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1)
    vals = sample_at_index(x.data, idx.reshape(-1, 3), "clamp").reshape(size, size, size)
    return _standardize(vals)


def _standardize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return (a - a.mean()) / (a.std() + 1e-8)


class LocalizationNet:
    """Dual-branch pose regressor: 2D slice encoder + 3D volume encoder.

    Three strided conv blocks per branch, global average pooling, pooled
    features concatenated and mapped by a 2-layer head to 6 outputs that a
    saturating nonlinearity keeps within +-max_deg / +-max_mm. The head is
    zero-initialized so the first prediction is always the identity pose.
    """

    def __init__(
        self,
        tape: ad.Tape,
        channels: int = 32,
        max_deg: float = 15.0,
        max_mm: float = 15.0,
        seed: int = 0,
    ):
        self.tape = tape
        rng = np.random.default_rng(seed)
        c = channels

        def he(shape, fan_in):
            return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

        def conv_params(cin, cout, k):
            w = tape.tensor(he((cout, cin) + k, cin * int(np.prod(k))), requires_grad=True)
            b = tape.tensor(np.zeros(cout), requires_grad=True)
            return w, b

        plan2d = [(1, c), (c, c), (c, c)]
        self.conv2d = [conv_params(ci, co, (1, 3, 3)) for ci, co in plan2d]
        plan3d = [(1, c), (c, c), (c, c)]
        self.conv3d = [conv_params(ci, co, (3, 3, 3)) for ci, co in plan3d]
        self.w1 = tape.tensor(he((c, 2 * c), 2 * c), requires_grad=True)
        self.b1 = tape.tensor(np.zeros(c), requires_grad=True)
        self.w2 = tape.tensor(np.zeros((6, c)), requires_grad=True)
        self.b2 = tape.tensor(np.zeros(6), requires_grad=True)
        self._bounds = np.array([max_deg] * 3 + [max_mm] * 3).reshape(6, 1, 1, 1)
        self.params = [p for w, b in self.conv2d + self.conv3d for p in (w, b)] + [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params))

    def forward(self, slice_t: ad.DiffTensor, thumb_t: ad.DiffTensor) -> ad.DiffTensor:
        """Bounded 6-vector pose prediction, shape (6, 1, 1, 1)."""
        h = slice_t
        for w, b in self.conv2d:
            h = ad.relu(ad.conv3d(h, w, b, stride=(1, 2, 2), padding=(0, 1, 1)))
        f2 = ad.mean(h, axis=(1, 2, 3), keepdims=True)
        h = thumb_t
        for w, b in self.conv3d:
            h = ad.relu(ad.conv3d(h, w, b, stride=(2, 2, 2), padding=(1, 1, 1)))
        f3 = ad.mean(h, axis=(1, 2, 3), keepdims=True)
        f = ad.concat([f2, f3], axis=0)
        h = ad.relu(ad.channel_mix(f, self.w1, self.b1))
        h = ad.channel_mix(h, self.w2, self.b2)
        sat = ad.scalar_add(ad.scalar_mul(ad.sigmoid(h), 2.0), -1.0)
        return ad.mul(sat, self.tape.constant(self._bounds))

    def slice_input(self, data: np.ndarray) -> ad.DiffTensor:
        return self.tape.constant(_standardize(data)[None, None, :, :])

    def thumb_input(self, x: VoxelGrid3D, size: int) -> ad.DiffTensor:
        return self.tape.constant(volume_thumbnail(x, size)[None, :, :, :])


def predict_transform(net: LocalizationNet, y_k: np.ndarray, x: VoxelGrid3D, thumbnail: int = 24) -> RigidTransform:
    """Run the localization net on one slice and return the predicted pose."""
    out = net.forward(net.slice_input(np.asarray(y_k)), net.thumb_input(x, thumbnail))
    return RigidTransform.from_params(out.value.reshape(6))


# ---------------------------------------------------------------------------
# direct refinement


def direct_refine(
    y_k: np.ndarray,
    x: VoxelGrid3D,
    t0: RigidTransform,
    config: SvrConfig,
    geom: SliceGeometry,
    psf: PsfModel,
    c_scale: float = 1.0,
    motion_center=None,
    offsets: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> tuple[RigidTransform, dict]:
    """Locally minimize 1 - NCC over the 6 rigid parameters.

    Every iterate is evaluated before stepping and the best is snapshotted,
    so the returned pose never scores worse than ``t0``. Five consecutive
    loss increases abort the descent (the best iterate is returned and the
    event reported).
    """
    if offsets is None:
        offsets, weights = draw_psf_offsets(psf)
    tape = ad.Tape(dtype=config.np_dtype)
    y_c = tape.constant(np.asarray(y_k))
    params = tape.tensor(t0.params, requires_grad=True)
    opt = ad.Adam([params], lr=config.lr_direct)
    cloud = geom.pixel_cloud(offsets).astype(config.np_dtype)

    def eval_loss():
        tape.clear()
        params.grad = None
        y_hat = predict_slice(
            x,
            geom,
            None,
            psf,
            tape=tape,
            t_params=params,
            c_scale=c_scale,
            motion_center=motion_center,
            offsets=offsets,
            weights=weights,
            cloud=cloud,
        )
        return svr_loss_graph(y_c, y_hat, eps=config.ncc_epsilon)

    best_loss = np.inf
    best_p = t0.params.copy()
    prev = np.inf
    streak = 0
    since_best = 0
    diverged = False
    iterations = 0
    for _ in range(config.iters_direct):
        loss_t = eval_loss()
        loss = float(loss_t.value)
        if not np.isfinite(loss):
            raise NumericalError("direct_refine: non-finite loss")
        iterations += 1
        if loss < best_loss:
            best_loss, best_p = loss, params.value.copy()
            since_best = 0
        else:
            since_best += 1
        streak = streak + 1 if loss > prev else 0
        prev = loss
        # divergence: a sustained rising streak with no progress for a while
        # (momentum overshoot recovers quickly; the best iterate is kept
        # either way, so aborting is safe, just reported)
        if streak >= 5 and since_best >= 25:
            diverged = True
            break
        tape.backward(loss_t)
        g = params.grad
        if g is None or not np.all(np.isfinite(g)):
            raise NumericalError("direct_refine: non-finite gradient")
        if float(np.linalg.norm(g)) < config.grad_tol:
            break
        opt.step()
    # the last step may have improved things; evaluate the final iterate too
    final_loss = float(eval_loss().value)
    if final_loss < best_loss:
        best_loss, best_p = final_loss, params.value.copy()
    return RigidTransform.from_params(best_p), {
        "loss": best_loss,
        "iterations": iterations,
        "diverged": diverged,
    }


# ---------------------------------------------------------------------------
# whole-scan registration


@dataclass
class SvrResult:
    transforms: dict  # (stack_idx, slice_idx) -> RigidTransform
    losses: dict  # (stack_idx, slice_idx) -> best loss
    flagged: list
    report: dict = field(default_factory=dict)


def _slice_entries(stacks: list[SliceStack], psf_by_stack):
    entries = []
    for si, stack in enumerate(stacks):
        psf = psf_by_stack[si]
        offsets, weights = draw_psf_offsets(psf)
        for sj, (sl, state) in enumerate(stack.slices):
            if state.excluded:
                continue
            geom = SliceGeometry.from_stack(stack, sj)
            entries.append((si, sj, sl, state, geom, psf, offsets, weights))
    return entries


def default_psfs(stacks: list[SliceStack], mode="deterministic", num_samples=27, seed=0):
    return [
        PsfModel.for_slice(
            s.in_plane_spacing[0], s.in_plane_spacing[1], s.thickness,
            mode=mode, num_samples=num_samples, seed=seed,
        )
        for s in stacks
    ]


def fit_svr(
    stacks: list[SliceStack],
    x: VoxelGrid3D,
    config: SvrConfig,
    psf_by_stack: list[PsfModel] | None = None,
    motion_center=None,
) -> SvrResult:
    """Update every non-excluded slice's rigid transform against ``x``.

    One localization network is shared across all slices and trained
    scan-specifically (amortized modes); direct refinement then polishes
    each slice from both its prior pose and the network hypothesis, keeping
    the better optimum. Per-slice best losses are recorded; slices whose
    best loss stays above ``flag_loss_threshold`` are flagged (and only
    excluded if the config asks for it).
    """
    if psf_by_stack is None:
        psf_by_stack = default_psfs(stacks)
    center = np.asarray(motion_center, float) if motion_center is not None else x.center_world
    entries = _slice_entries(stacks, psf_by_stack)
    if not entries:
        raise InputError("fit_svr: no usable slices")

    amortized_poses = {}
    net_report = {}
    clouds = [e[4].pixel_cloud(e[6]).astype(config.np_dtype) for e in entries]
    if config.mode in ("amortized", "amortized_then_direct"):
        tape = ad.Tape(dtype=config.np_dtype)
        net = LocalizationNet(
            tape, config.channels, config.max_deg, config.max_mm, seed=config.seed
        )
        thumb_c = net.thumb_input(x, config.thumbnail)
        slice_in = [net.slice_input(e[2].data) for e in entries]
        y_consts = [tape.constant(e[2].data) for e in entries]
        opt = ad.Adam(net.params, lr=config.lr_amortized)
        rng = np.random.default_rng(config.seed)
        n = len(entries)
        perm = rng.permutation(n)
        for step in range(config.iters_amortized):
            if step % n == 0:
                perm = rng.permutation(n)
            k = int(perm[step % n])
            si, sj, sl, state, geom, psf, offsets, weights = entries[k]
            tape.clear()
            opt.zero_grad()
            pose_t = net.forward(slice_in[k], thumb_c)
            y_hat = predict_slice(
                x,
                geom,
                None,
                psf,
                tape=tape,
                t_params=pose_t,
                c_scale=float(state.intensity_scale),
                motion_center=center,
                offsets=offsets,
                weights=weights,
                cloud=clouds[k],
            )
            loss_t = svr_loss_graph(y_consts[k], y_hat, eps=config.ncc_epsilon)
            if not np.isfinite(float(loss_t.value)):
                raise NumericalError("fit_svr: non-finite amortized loss")
            tape.backward(loss_t)
            opt.step()
        for k, (si, sj, sl, state, geom, psf, offsets, weights) in enumerate(entries):
            tape.clear()
            pose_t = net.forward(slice_in[k], thumb_c)
            amortized_poses[(si, sj)] = RigidTransform.from_params(pose_t.value.reshape(6))
        net_report = {
            "parameters": net.parameter_count,
            "steps": config.iters_amortized,
        }

    transforms, losses, flagged = {}, {}, []
    reverted = []
    for si, sj, sl, state, geom, psf, offsets, weights in entries:
        key = (si, sj)
        prior = state.transform

        def loss_at(t: RigidTransform) -> float:
            probe = SliceState(transform=t, intensity_scale=state.intensity_scale)
            pred = predict_slice(
                x, geom, probe, psf,
                motion_center=center, offsets=offsets, weights=weights,
            )
            return svr_loss(sl.data, pred)

        if config.mode == "amortized":
            cand = amortized_poses[key]
            l_prior, l_cand = loss_at(prior), loss_at(cand)
            if l_cand <= l_prior:
                best_t, best_l = cand, l_cand
            else:
                best_t, best_l = prior, l_prior
                reverted.append(key)
        else:
            starts = [prior]
            if config.mode == "amortized_then_direct":
                starts.append(amortized_poses[key])
            best_t, best_l, any_diverged = None, np.inf, False
            for t_start in starts:
                t_ref, info = direct_refine(
                    sl.data, x, t_start, config, geom, psf,
                    c_scale=float(state.intensity_scale),
                    motion_center=center, offsets=offsets, weights=weights,
                )
                any_diverged |= info["diverged"]
                if info["loss"] < best_l:
                    best_t, best_l = t_ref, info["loss"]
            if any_diverged:
                reverted.append(key)
        state.transform = best_t
        transforms[key] = best_t
        losses[key] = best_l
        if best_l > config.flag_loss_threshold:
            flagged.append(key)
            if config.exclude_flagged:
                state.excluded = True
    return SvrResult(
        transforms=transforms,
        losses=losses,
        flagged=flagged,
        report={
            "mode": config.mode,
            "n_slices": len(entries),
            "mean_loss": float(np.mean(list(losses.values()))),
            "reverted": reverted,
            "net": net_report,
        },
    )
