"""Tape-based reverse-mode differentiation over dense numpy tensors.

The operator set is deliberately tiny: exactly what the slice-acquisition
forward model, the registration loss, and the decoder generator need.
Tensors hold up to 5 axes (channels + 3 spatial, plus whatever a caller
flattens in). There is no general broadcasting: binary elementwise ops
require equal shapes, and the few scalar/vector couplings that the losses
need (scalar scale, channel-wise affine) are fused primitives with
hand-written adjoints.

A :class:`Tape` is single-owner: build a forward graph, call
``tape.backward(loss)``, read ``.grad`` off the leaves, then ``clear()``
(or ``zero_grad()``) before the next pass. Kernels are plain vectorized
numpy with deterministic accumulation order, so identical seeds and inputs
give bit-identical results in a single-threaded run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, StackreconError
from .rigid import euler_matrix_deg, euler_matrix_derivs_deg

DEFAULT_DTYPE = np.float64


class GraphError(StackreconError):
    """Misuse of the tape / operator API (shape mismatch, bad backward)."""


class DiffTensor:
    """A node in the differentiation graph: value plus gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "tape", "is_op_output")

    def __init__(self, value, tape, requires_grad=False, node_id=-1, is_op_output=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape
        self.is_op_output = is_op_output

    @property
    def shape(self):
        return self.value.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"DiffTensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # ergonomic arithmetic; numbers go through the scalar path
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


@dataclass
class _Record:
    out: DiffTensor
    inputs: tuple
    vjp: object  # callable(grad_out) -> tuple of grads aligned with inputs
    name: str = ""


@dataclass
class Tape:
    """Topologically ordered record of forward operations.

    ``dtype`` fixes the working precision of every tensor created through
    this tape (float64 for tests and oracles, float32 for production runs).
    """

    dtype: type = DEFAULT_DTYPE
    check_finite: bool = False
    records: list = field(default_factory=list)
    _n_nodes: int = 0
    _ran_backward: bool = False

    def tensor(self, value, requires_grad: bool = False) -> DiffTensor:
        arr = np.array(value, dtype=self.dtype)
        t = DiffTensor(arr, self, requires_grad=requires_grad, node_id=self._n_nodes)
        self._n_nodes += 1
        return t

    def constant(self, value) -> DiffTensor:
        return self.tensor(value, requires_grad=False)

    def _emit(self, value, inputs, vjp, name) -> DiffTensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite values produced by op {name!r}")
        out = DiffTensor(
            value, self, requires_grad=False, node_id=self._n_nodes, is_op_output=True
        )
        self._n_nodes += 1
        self.records.append(_Record(out, tuple(inputs), vjp, name))
        return out

    def backward(self, loss: DiffTensor) -> None:
        """Run the exact adjoint of the recorded computation from ``loss``.

        Gradients accumulate into ``.grad`` of every tensor reachable from
        the loss that either requires grad or feeds one that does.
        """
        if self._ran_backward:
            raise GraphError("backward already ran on this tape; clear() or zero_grad() first")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        self._ran_backward = True
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None:
                    continue
                if not (inp.requires_grad or inp.is_op_output):
                    continue
                if inp.grad is None:
                    # fresh vjp outputs are adopted; anything aliasing the
                    # upstream gradient (or a view) is copied first
                    if gi is g or gi.base is not None or not gi.flags.owndata:
                        inp.grad = np.array(gi, copy=True)
                    else:
                        inp.grad = gi
                else:
                    inp.grad += gi
            rec.out.grad = None  # free intermediate gradients eagerly

    def zero_grad(self, params=None) -> None:
        """Drop accumulated gradients (all leaves by default) and re-arm backward."""
        if params is None:
            for rec in self.records:
                for inp in rec.inputs:
                    inp.grad = None
                rec.out.grad = None
        else:
            for p in params:
                p.grad = None
        self._ran_backward = False

    def clear(self) -> None:
        """Drop all records (leaf tensors survive and can be reused)."""
        self.records = []
        self._ran_backward = False


def _as_tensor(x, like: DiffTensor) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return like.tape.constant(x)


def _check_same_shape(a, b, name):
    if a.value.shape != b.value.shape:
        raise GraphError(f"{name}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    return a.tape._emit(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    return a.tape._emit(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape._emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return a.tape._emit(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def scalar_mul(a: DiffTensor, s) -> DiffTensor:
    """Multiply by a python number or by a 0-d differentiable scalar."""
    if isinstance(s, DiffTensor):
        if s.value.size != 1:
            raise GraphError("scalar_mul: scale must be a scalar tensor")
        av, sv = a.value, float(s.value)

        def vjp(g):
            return g * sv, np.array(np.sum(g * av), dtype=a.value.dtype).reshape(s.value.shape)

        return a.tape._emit(av * sv, (a, s), vjp, "scalar_mul")
    c = float(s)
    return a.tape._emit(a.value * c, (a,), lambda g: (g * c,), "scalar_mul")


def scalar_add(a: DiffTensor, s) -> DiffTensor:
    """Add a python number or a 0-d differentiable scalar to every element."""
    if isinstance(s, DiffTensor):
        if s.value.size != 1:
            raise GraphError("scalar_add: addend must be a scalar tensor")

        def vjp(g):
            return g, np.array(np.sum(g), dtype=a.value.dtype).reshape(s.value.shape)

        return a.tape._emit(a.value + float(s.value), (a, s), vjp, "scalar_add")
    c = float(s)
    return a.tape._emit(a.value + c, (a,), lambda g: (g,), "scalar_add")


def square(a: DiffTensor) -> DiffTensor:
    av = a.value
    return a.tape._emit(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def sqrt(a: DiffTensor) -> DiffTensor:
    out = np.sqrt(a.value)
    return a.tape._emit(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.value)
    return a.tape._emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: DiffTensor) -> DiffTensor:
    av = a.value
    return a.tape._emit(np.log(av), (a,), lambda g: (g / av,), "log")


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.value > 0
    return a.tape._emit(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: DiffTensor) -> DiffTensor:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape._emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _reduce_vjp(g, shape, axis, keepdims, scale):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape) * scale


def sum_(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    return a.tape._emit(
        np.asarray(out),
        (a,),
        lambda g: (_reduce_vjp(g, shape, axis, keepdims, 1.0),),
        "sum",
    )


def mean(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    count = a.value.size / np.asarray(out).size
    return a.tape._emit(
        np.asarray(out),
        (a,),
        lambda g: (_reduce_vjp(g, shape, axis, keepdims, 1.0 / count),),
        "mean",
    )


def reshape(a: DiffTensor, shape) -> DiffTensor:
    old = a.value.shape
    return a.tape._emit(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def concat(tensors, axis: int = 0) -> DiffTensor:
    tape = tensors[0].tape
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._emit(out, tuple(tensors), vjp, "concat")


# ---------------------------------------------------------------------------
# channel ops (the decoder's 1x1x1 mixing and normalization)


def channel_mix(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """Per-voxel channel mixing: out[o, ...] = sum_c w[o, c] * x[c, ...] (+ b[o]).

    Acts as a 1x1x1 convolution on (C, D, H, W) tensors and as a fully
    connected layer on (C, 1, 1, 1) feature vectors.
    """
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[0] != wv.shape[1]:
        raise GraphError(f"channel_mix: weights {wv.shape} incompatible with input {xv.shape}")
    spatial = xv.shape[1:]
    x2 = xv.reshape(xv.shape[0], -1)
    out2 = wv @ x2
    out = out2.reshape((wv.shape[0],) + spatial)
    inputs = [x, w]
    if b is not None:
        if b.value.shape != (wv.shape[0],):
            raise GraphError("channel_mix: bias shape must be (C_out,)")
        out = out + b.value.reshape((-1,) + (1,) * len(spatial))
        inputs.append(b)

    def vjp(g):
        g2 = g.reshape(g.shape[0], -1)
        gx = (wv.T @ g2).reshape(xv.shape)
        gw = g2 @ x2.T
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return x.tape._emit(out, tuple(inputs), vjp, "channel_mix")


def channel_norm(
    x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-6
) -> DiffTensor:
    """Standardize each channel over its spatial extent, then apply a
    learnable per-channel affine. ``eps`` is added to the variance so
    zero-variance channels stay finite."""
    xv = x.value
    c = xv.shape[0]
    if gain.value.shape != (c,) or bias.value.shape != (c,):
        raise GraphError("channel_norm: gain/bias must have shape (C,)")
    axes = tuple(range(1, xv.ndim))
    n = xv.size // c
    shape_c = (c,) + (1,) * (xv.ndim - 1)
    mu = xv.mean(axis=axes, keepdims=True)
    var = np.mean(xv * xv, axis=axes, keepdims=True) - mu * mu
    std = np.sqrt(np.maximum(var, 0.0) + eps)
    scale = gain.value.reshape(shape_c) / std
    out = xv * scale + (bias.value.reshape(shape_c) - mu * scale)

    def vjp(g):
        # per-channel reductions first, then one fused output pass;
        # xhat = (x - mu)/std is never materialized
        sum_g = np.sum(g, axis=axes, keepdims=True)
        sum_gx = np.sum(g * xv, axis=axes, keepdims=True)
        ggain = ((sum_gx - mu * sum_g) / std).reshape(c)
        gbias = sum_g.reshape(c)
        mean_g = sum_g / n
        coef = scale * (ggain.reshape(shape_c) / (n * std))
        gx = scale * (g - mean_g) - (xv - mu) * coef
        return gx, ggain, gbias

    return x.tape._emit(out, (x, gain, bias), vjp, "channel_norm")


# ---------------------------------------------------------------------------
# trilinear upsampling (cell-centered, align-corners-false)


def _axis_slices(ndim: int, axis: int, s: slice) -> tuple:
    return tuple(s if i == axis else slice(None) for i in range(ndim))


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """2x cell-centered linear upsampling along one axis.

    Output 2i = 0.75 x[i] + 0.25 x[i-1], output 2i+1 = 0.75 x[i] + 0.25 x[i+1]
    (edges clamped) - the explicit two-tap form of the interpolation matrix.
    """
    n = x.shape[axis]
    sl = lambda s: _axis_slices(x.ndim, axis, s)
    prev = np.concatenate([x[sl(slice(0, 1))], x[sl(slice(0, n - 1))]], axis=axis)
    nxt = np.concatenate([x[sl(slice(1, n))], x[sl(slice(n - 1, n))]], axis=axis)
    shape = list(x.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=x.dtype)
    out[sl(slice(0, None, 2))] = 0.75 * x + 0.25 * prev
    out[sl(slice(1, None, 2))] = 0.75 * x + 0.25 * nxt
    return out


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    sl = lambda s: _axis_slices(g.ndim, axis, s)
    ge = g[sl(slice(0, None, 2))]
    go = g[sl(slice(1, None, 2))]
    gx = 0.75 * (ge + go)
    gx[sl(slice(0, n - 1))] += 0.25 * ge[sl(slice(1, n))]
    gx[sl(slice(0, 1))] += 0.25 * ge[sl(slice(0, 1))]
    gx[sl(slice(1, n))] += 0.25 * go[sl(slice(0, n - 1))]
    gx[sl(slice(n - 1, n))] += 0.25 * go[sl(slice(n - 1, n))]
    return gx


def upsample2x_trilinear(x: DiffTensor) -> DiffTensor:
    """Double every spatial axis of a (C, D, H, W) tensor by separable
    cell-centered linear interpolation."""
    xv = x.value
    if xv.ndim != 4:
        raise GraphError(f"upsample2x_trilinear expects (C, D, H, W), got {xv.shape}")
    out = xv
    for a in (1, 2, 3):
        out = _up2_axis(out, a)

    def vjp(g):
        gx = g
        for a in (3, 2, 1):
            gx = _up2_axis_adjoint(gx, a)
        return (gx,)

    return x.tape._emit(out, (x,), vjp, "upsample2x_trilinear")


# ---------------------------------------------------------------------------
# trilinear gathering from a volume

_CORNERS = [((c >> 2) & 1, (c >> 1) & 1, c & 1) for c in range(8)]


def _corner_weights(frac: np.ndarray, bits) -> np.ndarray:
    w = np.ones(frac.shape[0], dtype=frac.dtype)
    for a in range(3):
        w = w * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
    return w


def grid_sample_trilinear(vol: DiffTensor, points: DiffTensor) -> DiffTensor:
    """Sample a (D, H, W) volume at continuous voxel coordinates (..., 3).

    Zero-padding outside the lattice. Differentiable with respect to both
    the volume values and the sample points; the point gradient is the
    analytic spatial derivative of the interpolation.

    The 8 corner contributions are built from per-axis factor arrays
    (weights, flattened index parts, validity), which keeps the hot loop at
    a handful of vectorized passes.
    """
    volv = vol.value
    if volv.ndim != 3:
        raise GraphError(f"grid_sample_trilinear expects a (D, H, W) volume, got {volv.shape}")
    pv = points.value
    if pv.shape[-1] != 3:
        raise GraphError("points must have a trailing axis of size 3")
    if not np.all(np.isfinite(pv)):
        raise NumericalError("grid_sample_trilinear: non-finite sample points")
    lead = pv.shape[:-1]
    pts = pv.reshape(-1, 3)
    dt = volv.dtype
    d0, d1, d2 = volv.shape
    strides = (d1 * d2, d2, 1)
    flat_vol = volv.reshape(-1)

    i0 = np.floor(pts).astype(np.int64)
    frac = (pts - i0).astype(dt, copy=False)
    # per-axis factor arrays, index 0/1 for the low/high corner along it
    wgt, idxp, valid = [], [], []
    for a in range(3):
        n = volv.shape[a]
        ia0 = i0[:, a]
        ia1 = ia0 + 1
        f = frac[:, a]
        wgt.append((1.0 - f, f))
        valid.append(((ia0 >= 0) & (ia0 < n), (ia1 >= 0) & (ia1 < n)))
        idxp.append(
            (np.clip(ia0, 0, n - 1) * strides[a], np.clip(ia1, 0, n - 1) * strides[a])
        )
    # pairwise weight products over axes (1,2) reused by every corner
    w12 = [[wgt[1][b1] * wgt[2][b2] for b2 in (0, 1)] for b1 in (0, 1)]
    out = np.zeros(pts.shape[0], dtype=dt)
    corner_vals = np.empty((8, pts.shape[0]), dtype=dt)
    for c, (b0, b1, b2) in enumerate(_CORNERS):
        flat = idxp[0][b0] + idxp[1][b1] + idxp[2][b2]
        ok = valid[0][b0] & valid[1][b1] & valid[2][b2]
        vals = flat_vol[flat] * ok
        corner_vals[c] = vals
        out += (wgt[0][b0] * w12[b1][b2]) * vals

    def vjp(g):
        gf = g.reshape(-1).astype(dt, copy=False)
        gvol = None
        if vol.requires_grad or vol.is_op_output:
            acc = np.zeros(volv.size, dtype=np.float64)
            for c, (b0, b1, b2) in enumerate(_CORNERS):
                flat = idxp[0][b0] + idxp[1][b1] + idxp[2][b2]
                ok = valid[0][b0] & valid[1][b1] & valid[2][b2]
                w = (wgt[0][b0] * w12[b1][b2]) * gf * ok
                acc += np.bincount(flat, weights=w, minlength=volv.size)
            gvol = acc.reshape(volv.shape).astype(dt, copy=False)
        gpts = None
        if points.requires_grad or points.is_op_output:
            gp = np.empty_like(pts)
            w01 = [[wgt[0][b0] * wgt[1][b1] for b1 in (0, 1)] for b0 in (0, 1)]
            w02 = [[wgt[0][b0] * wgt[2][b2] for b2 in (0, 1)] for b0 in (0, 1)]
            cv = corner_vals

            def axis_grad(pairs, diffs):
                da = np.zeros(pts.shape[0], dtype=dt)
                for w, d in zip(pairs, diffs):
                    da += w * d
                return da

            gp[:, 0] = axis_grad(
                [w12[0][0], w12[0][1], w12[1][0], w12[1][1]],
                [cv[4] - cv[0], cv[5] - cv[1], cv[6] - cv[2], cv[7] - cv[3]],
            ) * gf
            gp[:, 1] = axis_grad(
                [w02[0][0], w02[0][1], w02[1][0], w02[1][1]],
                [cv[2] - cv[0], cv[3] - cv[1], cv[6] - cv[4], cv[7] - cv[5]],
            ) * gf
            gp[:, 2] = axis_grad(
                [w01[0][0], w01[0][1], w01[1][0], w01[1][1]],
                [cv[1] - cv[0], cv[3] - cv[2], cv[5] - cv[4], cv[7] - cv[6]],
            ) * gf
            gpts = gp.reshape(pv.shape)
        return gvol, gpts

    return vol.tape._emit(out.reshape(lead), (vol, points), vjp, "grid_sample_trilinear")


@dataclass(frozen=True)
class SamplePlan:
    """Precomputed gather indices/weights for sampling at fixed points.

    Out-of-lattice corners carry zero weight, so zero-padding semantics
    match :func:`grid_sample_trilinear` exactly.
    """

    vol_shape: tuple
    out_shape: tuple
    flat_idx: np.ndarray  # (P, 8) int64
    weights: np.ndarray  # (P, 8)


def make_sample_plan(vol_shape, points: np.ndarray, dtype=DEFAULT_DTYPE) -> SamplePlan:
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    dims = np.asarray(vol_shape)
    i0 = np.floor(pts).astype(np.int64)
    frac = pts - i0
    idx = np.zeros((pts.shape[0], 8), dtype=np.int64)
    wgt = np.zeros((pts.shape[0], 8), dtype=dtype)
    for c, bits in enumerate(_CORNERS):
        ci = i0 + np.asarray(bits)
        valid = np.all((ci >= 0) & (ci < dims), axis=1)
        ci_c = np.where(valid[:, None], ci, 0)
        idx[:, c] = np.ravel_multi_index((ci_c[:, 0], ci_c[:, 1], ci_c[:, 2]), tuple(vol_shape))
        w = _corner_weights(frac.astype(dtype), bits)
        wgt[:, c] = np.where(valid, w, 0.0)
    return SamplePlan(tuple(vol_shape), tuple(lead), idx, wgt)


def sample_fixed(vol: DiffTensor, plan: SamplePlan) -> DiffTensor:
    """Trilinear gather at precomputed points (volume gradient only)."""
    volv = vol.value
    if volv.shape != plan.vol_shape:
        raise GraphError(f"sample_fixed: volume shape {volv.shape} != plan {plan.vol_shape}")
    flat = volv.reshape(-1)
    out = np.einsum("pc,pc->p", flat[plan.flat_idx], plan.weights.astype(volv.dtype, copy=False))

    def vjp(g):
        gf = g.reshape(-1)
        contrib = (gf[:, None] * plan.weights).reshape(-1)
        acc = np.bincount(plan.flat_idx.reshape(-1), weights=contrib, minlength=volv.size)
        return (acc.reshape(volv.shape).astype(volv.dtype, copy=False),)

    return vol.tape._emit(out.reshape(plan.out_shape), (vol,), vjp, "sample_fixed")


# ---------------------------------------------------------------------------
# small strided convolutions (registration encoder only)


def conv3d(
    x: DiffTensor,
    w: DiffTensor,
    b: DiffTensor | None = None,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
) -> DiffTensor:
    """Strided 3D convolution of (C_in, D, H, W) with (C_out, C_in, kd, kh, kw).

    Small fixed kernels only; implemented as a sum over kernel offsets of
    strided channel mixes. 2D slices ride along with a depth of 1 and a
    (1, kh, kw) kernel.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 5 or wv.shape[1] != xv.shape[0]:
        raise GraphError(f"conv3d: incompatible shapes x={xv.shape} w={wv.shape}")
    sd, sh, sw = stride
    pd, ph, pw = padding
    co, ci, kd, kh, kw = wv.shape
    xp = np.pad(xv, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    dp, hp, wp_ = xp.shape[1:]
    od = (dp - kd) // sd + 1
    oh = (hp - kh) // sh + 1
    ow = (wp_ - kw) // sw + 1
    if od < 1 or oh < 1 or ow < 1:
        raise GraphError("conv3d: kernel larger than padded input")
    out = np.zeros((co, od, oh, ow), dtype=xv.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sl = xp[
                    :,
                    i : i + (od - 1) * sd + 1 : sd,
                    j : j + (oh - 1) * sh + 1 : sh,
                    k : k + (ow - 1) * sw + 1 : sw,
                ]
                out += np.tensordot(wv[:, :, i, j, k], sl, axes=(1, 0))
    inputs = [x, w]
    if b is not None:
        if b.value.shape != (co,):
            raise GraphError("conv3d: bias shape must be (C_out,)")
        out += b.value.reshape(co, 1, 1, 1)
        inputs.append(b)

    def vjp(g):
        gw = np.zeros_like(wv)
        gxp = np.zeros_like(xp)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    sl = xp[
                        :,
                        i : i + (od - 1) * sd + 1 : sd,
                        j : j + (oh - 1) * sh + 1 : sh,
                        k : k + (ow - 1) * sw + 1 : sw,
                    ]
                    gw[:, :, i, j, k] = np.tensordot(g, sl, axes=([1, 2, 3], [1, 2, 3]))
                    gxp[
                        :,
                        i : i + (od - 1) * sd + 1 : sd,
                        j : j + (oh - 1) * sh + 1 : sh,
                        k : k + (ow - 1) * sw + 1 : sw,
                    ] += np.tensordot(wv[:, :, i, j, k], g, axes=(0, 0))
        gx = gxp[:, pd : pd + xv.shape[1], ph : ph + xv.shape[2], pw : pw + xv.shape[3]]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2, 3))

    return x.tape._emit(out, tuple(inputs), vjp, "conv3d")


# ---------------------------------------------------------------------------
# rigid point transform (the pose-to-sample-point coupling)


def transform_points_rigid(params: DiffTensor, points, center) -> DiffTensor:
    """Apply a 6-parameter rigid motion (degrees, mm) to points (..., 3).

    out = R(angles) @ (p - center) + center + d, rotating about ``center``.
    Differentiable in both the 6 parameters and the points; the angle
    adjoint uses the analytic derivative of the Euler matrix.
    """
    if params.value.size != 6:
        raise GraphError("transform_points_rigid: params must have 6 elements")
    pts_t = points if isinstance(points, DiffTensor) else params.tape.constant(points)
    pv = params.value.reshape(6)
    ptv = pts_t.value
    if ptv.shape[-1] != 3:
        raise GraphError("points must have a trailing axis of size 3")
    c = np.asarray(center, dtype=ptv.dtype)
    r = euler_matrix_deg(pv[:3]).astype(ptv.dtype)
    rel = ptv.reshape(-1, 3) - c
    out = (rel @ r.T + c + pv[3:].astype(ptv.dtype)).reshape(ptv.shape)

    def vjp(g):
        g2 = g.reshape(-1, 3)
        gparams = None
        if params.requires_grad or params.is_op_output:
            dr = euler_matrix_derivs_deg(pv[:3])
            gparams = np.empty(6, dtype=params.value.dtype)
            for i in range(3):
                gparams[i] = np.sum(g2 * (rel @ dr[i].T.astype(ptv.dtype)))
            gparams[3:] = g2.sum(axis=0)
            gparams = gparams.reshape(params.value.shape)
        gpts = None
        if pts_t.requires_grad or pts_t.is_op_output:
            gpts = (g2 @ r).reshape(ptv.shape)
        return gparams, gpts

    return params.tape._emit(out, (params, pts_t), vjp, "transform_points_rigid")


def affine_map_points(points: DiffTensor, mat: np.ndarray, shift: np.ndarray) -> DiffTensor:
    """Fixed affine map of points (..., 3): out = p @ mat.T + shift.

    ``mat``/``shift`` are non-differentiable constants (grid geometry).
    """
    pv = points.value
    m = np.asarray(mat, dtype=pv.dtype)
    s = np.asarray(shift, dtype=pv.dtype)
    out = pv.reshape(-1, 3) @ m.T + s

    def vjp(g):
        return ((g.reshape(-1, 3) @ m).reshape(pv.shape),)

    return points.tape._emit(out.reshape(pv.shape), (points,), vjp, "affine_map_points")


# ---------------------------------------------------------------------------
# total variation (fused: needs neighbor shifts the op set doesn't expose)


def total_variation(x: DiffTensor, eps: float = 1e-8) -> DiffTensor:
    """Anisotropic L1 total variation with an epsilon-smoothed absolute value.

    Sums sqrt(d^2 + eps^2) - eps over forward differences d along every
    axis, so constant inputs give exactly 0 and the loss stays smooth.
    """
    xv = x.value
    total = 0.0
    diffs = []
    for a in range(xv.ndim):
        if xv.shape[a] < 2:
            diffs.append(None)
            continue
        d = np.diff(xv, axis=a)
        r = np.sqrt(d * d + eps * eps)
        total += np.sum(r) - r.size * eps
        diffs.append(d / r)  # d(smooth_abs)/dd

    def vjp(g):
        gs = float(g)
        gx = np.zeros_like(xv)
        for a, s in enumerate(diffs):
            if s is None:
                continue
            lo = [slice(None)] * xv.ndim
            hi = [slice(None)] * xv.ndim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            gx[tuple(hi)] += gs * s
            gx[tuple(lo)] -= gs * s
        return (gx,)

    return x.tape._emit(np.asarray(total, dtype=xv.dtype), (x,), vjp, "total_variation")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus step count for adaptive updates."""

    m: list
    v: list
    t: int = 0
    rejections: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros_like(np.asarray(p)) for p in params],
            v=[np.zeros_like(np.asarray(p)) for p in params],
        )


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list:
    """One adaptive-moment update with bias correction.

    If any gradient is non-finite the step is rejected: the parameters are
    returned unchanged, the moments untouched, and ``state.rejections``
    incremented so callers can report it.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            state.rejections += 1
            return params
    state.t += 1
    t = state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    """Adam over a list of leaf DiffTensors (reads .grad, writes .value)."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.for_params([p.value for p in self.params])

    def step(self) -> bool:
        """Apply one update; returns False (and changes nothing) when any
        gradient is non-finite."""
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params
        ]
        before = self.state.rejections
        new_vals = adam_step(
            [p.value for p in self.params],
            grads,
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        if self.state.rejections > before:
            return False
        for p, v in zip(self.params, new_vals):
            p.value = v.astype(p.value.dtype, copy=False)
        return True

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite differences (test hook)


def finite_difference_grad(f, arrays: list, eps: float = 1e-4) -> list:
    """Central-difference gradient of a scalar function of numpy arrays.

    ``f`` is called with the perturbed list; used by the gradient-integrity
    tests as the independent oracle for every primitive and composite loss.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in work:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(work)
            flat[j] = orig - eps
            fm = f(work)
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads
