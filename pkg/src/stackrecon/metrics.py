"""Quantitative evaluation: image similarity, motion recovery error, and
histogram-based tissue/partial-volume analysis.

All functions here are pure and operate on plain numpy arrays (or rigid
transform lists); they are safe to evaluate for many volumes in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, NumericalError
from .rigid import RigidTransform, geodesic_rotation_deg

_SQRT_2LN2 = math.sqrt(2.0 * math.log(2.0))


def psnr(x: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB with MAX = the reference dynamic range.

    A perfect match (MSE = 0) returns the +inf sentinel.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise InputError(f"shape mismatch {x.shape} vs {ref.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        x, ref = x[m], ref[m]
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    rng = float(ref.max() - ref.min())
    return 10.0 * math.log10(rng * rng / mse)


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Structural similarity with the original convention: 11-tap Gaussian
    window (sigma 1.5), K1 = 0.01, K2 = 0.03, population covariances."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise InputError(f"shape mismatch {x.shape} vs {ref.shape}")
    dr = float(ref.max() - ref.min())
    if dr == 0.0:
        return 1.0 if np.array_equal(x, ref) else 0.0
    sigma, truncate = 1.5, 3.5  # radius 5 -> 11 taps per axis
    c1 = (0.01 * dr) ** 2
    c2 = (0.03 * dr) ** 2

    def f(a):
        return gaussian_filter(a, sigma, truncate=truncate, mode="nearest")

    ux, uy = f(x), f(ref)
    vx = f(x * x) - ux * ux
    vy = f(ref * ref) - uy * uy
    vxy = f(x * ref) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = 5
    core = s[tuple(slice(pad, n - pad) for n in s.shape)]
    return float(core.mean())


def ncc_volume(x: np.ndarray, ref: np.ndarray) -> float:
    """Pearson correlation of two equally shaped images, in [-1, 1]."""
    x = np.asarray(x, dtype=float).reshape(-1)
    ref = np.asarray(ref, dtype=float).reshape(-1)
    if x.shape != ref.shape:
        raise InputError("shape mismatch")
    xc = x - x.mean()
    rc = ref - ref.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(rc * rc))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(xc * rc) / denom, -1.0, 1.0))


def _mae_rmse(errors: np.ndarray) -> dict:
    e = np.asarray(errors, dtype=float)
    return {"mae": float(np.mean(np.abs(e))), "rmse": float(np.sqrt(np.mean(e * e)))}


def motion_error(pred: list[RigidTransform], truth: list[RigidTransform]) -> dict:
    """Per-slice motion recovery error, aggregated as MAE and RMSE.

    Translation error is the Euclidean norm of the translation difference
    per slice. Rotation error is reported under both common definitions:
    the norm of the Euler-angle difference vector ("rotation_euler") and
    the geodesic rotation distance ("rotation_geodesic"), both in degrees.
    """
    if len(pred) != len(truth):
        raise InputError(f"length mismatch: {len(pred)} vs {len(truth)}")
    t_err, r_euler, r_geo = [], [], []
    for p, t in zip(pred, truth):
        dp = np.asarray(p.d) - np.asarray(t.d)
        t_err.append(np.linalg.norm(dp))
        da = np.asarray(p.alpha) - np.asarray(t.alpha)
        r_euler.append(np.linalg.norm(da))
        r_geo.append(geodesic_rotation_deg(p, t))
    return {
        "translation": _mae_rmse(t_err),
        "rotation_euler": _mae_rmse(r_euler),
        "rotation_geodesic": _mae_rmse(r_geo),
    }


@dataclass(frozen=True)
class GmmComponent:
    """One Gaussian mixture component over 1-D intensities."""

    weight: float
    mean: float
    std: float

    def __post_init__(self):
        if not (0.0 < self.weight < 1.0 + 1e-12):
            raise InputError(f"component weight must be in (0, 1), got {self.weight}")
        if self.std <= 0:
            raise InputError("component std must be positive")

    @property
    def delta(self) -> float:
        """Half FWHM: sqrt(2 ln 2) * std."""
        return _SQRT_2LN2 * self.std

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        return self.weight * np.exp(-0.5 * z * z) / (self.std * math.sqrt(2 * math.pi))


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min([(x - c) ** 2 for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.sort(np.asarray(centers))


def fit_gmm3(
    intensities,
    iters: int = 200,
    seed: int = 0,
    n_components: int = 3,
    max_restarts: int = 5,
) -> tuple[list[GmmComponent], list[float]]:
    """Fit a Gaussian mixture to 1-D intensities by expectation-maximization.

    k-means++ style seeding, up to ``max_restarts`` reseeded attempts when a
    component collapses (std below 1e-6 of the data range). Returns the
    components sorted by mean and the log-likelihood trace of accepted
    iterations (non-decreasing by the EM guarantee; iterations that would
    dip below the previous value by numerical noise end the fit instead).
    """
    x = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if x.size < 30:
        raise InputError(f"need at least 30 samples, got {x.size}")
    if np.var(x) == 0.0:
        raise InputError("samples have zero variance")
    data_range = float(x.max() - x.min())
    collapse_tol = 1e-6 * data_range
    n = x.size

    for restart in range(max_restarts):
        rng = np.random.default_rng(seed + restart)
        mu = _kmeanspp_centers(x, n_components, rng)
        assign = np.argmin(np.abs(x[:, None] - mu[None, :]), axis=1)
        sig = np.empty(n_components)
        pi = np.empty(n_components)
        for k in range(n_components):
            sel = x[assign == k]
            pi[k] = max(len(sel), 1) / n
            sig[k] = sel.std() if len(sel) > 1 else x.std() / n_components
        sig = np.maximum(sig, max(collapse_tol, 1e-12))
        pi = pi / pi.sum()

        ll_trace: list[float] = []
        collapsed = False
        for _ in range(iters):
            # E step in log space for stability
            logp = (
                np.log(pi)[None, :]
                - 0.5 * ((x[:, None] - mu[None, :]) / sig[None, :]) ** 2
                - np.log(sig)[None, :]
                - 0.5 * math.log(2 * math.pi)
            )
            m = logp.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
            ll = float(lse.sum())
            if ll_trace and ll < ll_trace[-1]:
                break  # converged to numerical noise; keep the trace monotone
            ll_trace.append(ll)
            resp = np.exp(logp - lse[:, None])
            nk = resp.sum(axis=0)
            pi = nk / n
            mu = (resp * x[:, None]).sum(axis=0) / nk
            var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
            sig = np.sqrt(var)
            if np.any(sig < collapse_tol) or np.any(nk < 1e-8):
                collapsed = True
                break
        if collapsed:
            continue
        order = np.argsort(mu)
        comps = [
            GmmComponent(weight=float(pi[k]), mean=float(mu[k]), std=float(sig[k]))
            for k in order
        ]
        return comps, ll_trace
    raise NumericalError(
        f"mixture fit collapsed in all {max_restarts} restarts (degenerate data?)"
    )


def pve_proxy(intensities, components: list[GmmComponent]) -> float:
    """Fraction of samples outside every component's half-FWHM band.

    A sample inside any band |x - mean_k| <= delta_k counts as classified;
    bands may overlap. Larger values indicate more mixed-tissue voxels.
    """
    x = np.asarray(intensities, dtype=float).reshape(-1)
    inside = np.zeros(x.shape, dtype=bool)
    for c in components:
        inside |= np.abs(x - c.mean) <= c.delta
    return float(np.mean(~inside))
