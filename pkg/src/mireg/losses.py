"""Similarity losses (Parzen-window MI, NCC, MSE) and the smoothness
regularizer, each returning a value plus its analytic gradient.

Parzen density estimation: every sampled voxel spreads one unit of histogram
mass over the bins through a Gaussian window, and each voxel's window vector
is normalized to sum to 1 before accumulation.  With that convention the
joint sums to exactly 1 and its row/column sums coincide with the marginal
estimator applied to either image alone, so the histogram pair is internally
consistent to rounding error (a global renormalization would leave
boundary-truncation residue far above 1e-10).

Gradients of the similarity losses are taken with respect to the second
image (the warped moving image); the fixed image is never differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import DisplacementField, Volume3D

__all__ = [
    "ParzenConfig",
    "HistogramPair",
    "LossValueGrad",
    "gaussian_window",
    "parzen_marginal",
    "parzen_joint",
    "parzen_histogram_pair",
    "dmi_loss",
    "mse_loss",
    "ncc_loss",
    "smoothness_loss",
    "total_loss",
]

_LOG_FLOOR = 1e-12  # added inside every log argument; empty bins stay finite
_NORM_TOL = 1e-6    # slack allowed on the [0, 1] intensity precondition


@dataclass
class ParzenConfig:
    """Histogram bins, Gaussian bandwidth, and sampling stride.

    Bin centers are (k + 0.5) / num_bins.  sigma defaults to one bin width.
    sample_stride > 1 subsamples voxels on a regular lattice (deterministic,
    keeps the loss differentiable at the sampled voxels).
    """

    num_bins: int = 32
    sigma: float | None = None
    sample_stride: int = 1

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if self.sigma is None:
            self.sigma = 1.0 / self.num_bins
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.num_bins) + 0.5) / self.num_bins


@dataclass
class HistogramPair:
    """Joint and marginal Parzen histograms for an image pair.

    joint[j, k] pairs bin j of the first image with bin k of the second, so
    joint.sum(axis=1) == marginal_a and joint.sum(axis=0) == marginal_b.
    """

    marginal_a: np.ndarray
    marginal_b: np.ndarray
    joint: np.ndarray


@dataclass
class LossValueGrad:
    """A scalar loss value with the gradient of its differentiated argument."""

    value: float
    grad: np.ndarray


def gaussian_window(d, sigma: float):
    """Gaussian window: exp(-d^2 / (2 sigma^2)) / (sigma sqrt(2 pi))."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = np.asarray(d, dtype=np.float64)
    out = np.exp(-(d * d) / (2.0 * sigma * sigma)) / (sigma * math.sqrt(2.0 * math.pi))
    return float(out) if out.ndim == 0 else out


def _check_normalized(img: Volume3D, name: str) -> None:
    lo, hi = img.data.min(), img.data.max()
    if lo < -_NORM_TOL or hi > 1.0 + _NORM_TOL:
        raise ValueError(f"{name} must be normalized to [0, 1], got range [{lo:g}, {hi:g}]")


def _strided(data: np.ndarray, stride: int) -> np.ndarray:
    return data[::stride, ::stride, ::stride]


def _windows(samples: np.ndarray, cfg: ParzenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw Gaussian window matrix (n, num_bins) and per-sample window mass."""
    centers = cfg.bin_centers
    w = gaussian_window(centers[None, :] - samples[:, None], cfg.sigma)
    mass = w.sum(axis=1)
    mass = np.maximum(mass, 1e-300)  # guards pathological tiny sigma
    return w, mass


def parzen_marginal(img: Volume3D, cfg: ParzenConfig | None = None) -> np.ndarray:
    """Parzen estimate of a single image's intensity distribution."""
    cfg = cfg or ParzenConfig()
    _check_normalized(img, "img")
    samples = _strided(img.data, cfg.sample_stride).ravel()
    w, mass = _windows(samples, cfg)
    p = (w / mass[:, None]).sum(axis=0) / samples.size
    return p / p.sum()


def parzen_joint(a: Volume3D, b: Volume3D, cfg: ParzenConfig | None = None) -> np.ndarray:
    """Parzen estimate of the joint intensity distribution of an image pair."""
    return parzen_histogram_pair(a, b, cfg).joint


def parzen_histogram_pair(a: Volume3D, b: Volume3D, cfg: ParzenConfig | None = None) -> HistogramPair:
    """Joint plus derived marginals for an image pair, all summing to 1."""
    cfg = cfg or ParzenConfig()
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    _check_normalized(a, "a")
    _check_normalized(b, "b")
    sa = _strided(a.data, cfg.sample_stride).ravel()
    sb = _strided(b.data, cfg.sample_stride).ravel()
    wa, ma = _windows(sa, cfg)
    wb, mb = _windows(sb, cfg)
    joint = (wa / ma[:, None]).T @ (wb / mb[:, None]) / sa.size
    joint /= joint.sum()
    return HistogramPair(joint.sum(axis=1), joint.sum(axis=0), joint)


def dmi_loss(a: Volume3D, b: Volume3D, cfg: ParzenConfig | None = None) -> LossValueGrad:
    """Negative Parzen mutual information, with the gradient w.r.t. b's voxels.

    value = -sum_{j,k} P(j,k) log(P(j,k) / (P_a(j) P_b(k))) over the Parzen
    histograms; grad has b's shape (zero at voxels skipped by the stride).
    """
    cfg = cfg or ParzenConfig()
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    _check_normalized(a, "a")
    _check_normalized(b, "b")

    stride = cfg.sample_stride
    sa = _strided(a.data, stride).ravel()
    sb_block = _strided(b.data, stride)
    sb = sb_block.ravel()
    n = sa.size
    centers = cfg.bin_centers
    sigma = cfg.sigma

    wa_raw, ma = _windows(sa, cfg)
    wb_raw, mb = _windows(sb, cfg)
    va = wa_raw / ma[:, None]          # normalized windows of a (n, K)
    vb = wb_raw / mb[:, None]          # normalized windows of b (n, K)

    joint_raw = va.T @ vb / n
    z = joint_raw.sum()
    p = joint_raw / z
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)

    log_p = np.log(p + _LOG_FLOOR)
    log_pa = np.log(pa + _LOG_FLOOR)
    log_pb = np.log(pb + _LOG_FLOOR)
    mi = float(np.sum(p * (log_p - log_pa[:, None] - log_pb[None, :])))

    # dMI/dP, exact including the log floors
    g = (
        log_p
        + p / (p + _LOG_FLOOR)
        - log_pa[:, None]
        - (pa / (pa + _LOG_FLOOR))[:, None]
        - log_pb[None, :]
        - (pb / (pb + _LOG_FLOOR))[None, :]
    )
    s = float(np.sum(g * p))

    # chain through the joint, the per-sample normalization, and the window:
    # d w(c - b) / d b = w * (c - b) / sigma^2
    m = va @ g                                   # (n, K): sum_j (G[j,k]) va[t,j]
    wb_prime = wb_raw * (centers[None, :] - sb[:, None]) / (sigma * sigma)
    mb_prime = wb_prime.sum(axis=1)
    gm = m - s                                   # sum_j (G - S) va  (rows of va sum to 1)
    inner = (gm * wb_prime).sum(axis=1) - mb_prime * (gm * vb).sum(axis=1)
    dmi_db = inner / (n * z * mb)

    grad = np.zeros_like(b.data)
    grad[::stride, ::stride, ::stride] = (-dmi_db).reshape(sb_block.shape)
    return LossValueGrad(-mi, grad)


def mse_loss(a: Volume3D, b: Volume3D) -> LossValueGrad:
    """Mean squared intensity difference; grad = 2 (b - a) / n."""
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    diff = b.data - a.data
    n = diff.size
    return LossValueGrad(float(np.mean(diff * diff)), 2.0 * diff / n)


def ncc_loss(a: Volume3D, b: Volume3D) -> LossValueGrad:
    """Negative global normalized cross-correlation, with gradient w.r.t. b."""
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    if np.ptp(a.data) == 0.0 or np.ptp(b.data) == 0.0:
        raise ValueError("ncc undefined for a constant image (zero variance)")
    x = a.data - a.data.mean()
    y = b.data - b.data.mean()
    sxx = float(np.sum(x * x))
    syy = float(np.sum(y * y))
    sxy = float(np.sum(x * y))
    denom = math.sqrt(sxx * syy)
    ncc = sxy / denom
    grad = -(x / denom - ncc * y / syy)
    return LossValueGrad(-ncc, grad)


def smoothness_loss(field: DisplacementField) -> LossValueGrad:
    """Mean over voxels of the summed squared forward differences of the field.

    value = (1/|Omega|) * sum over voxels, axes, and components of
    (phi[v + e_axis] - phi[v])^2, omitting differences that would cross the
    far boundary.  Constant (pure-translation) fields score zero.
    """
    phi = field.vectors
    nvox = phi.shape[0] * phi.shape[1] * phi.shape[2]
    total = 0.0
    grad = np.zeros_like(phi)
    for ax in range(3):
        d = np.diff(phi, axis=ax)
        total += float(np.sum(d * d))
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[ax] = slice(0, -1)
        tail[ax] = slice(1, None)
        grad[tuple(head)] -= 2.0 * d
        grad[tuple(tail)] += 2.0 * d
    return LossValueGrad(total / nvox, grad / nvox)


def total_loss(
    fixed: Volume3D,
    warped_moving: Volume3D,
    field: DisplacementField,
    cfg: ParzenConfig | None = None,
    lam: float = 0.3,
    *,
    similarity: str = "dmi",
    warp_jacobian: np.ndarray | None = None,
) -> LossValueGrad:
    """Similarity plus lam * smoothness; gradient taken w.r.t. the field.

    warp_jacobian is the per-voxel spatial gradient of the moving image at
    the warped sample points (from warp_with_jacobian); it chains the
    similarity gradient from warped intensities back onto the field.
    """
    if similarity == "dmi":
        sim = dmi_loss(fixed, warped_moving, cfg)
    elif similarity == "ncc":
        sim = ncc_loss(fixed, warped_moving)
    elif similarity == "mse":
        sim = mse_loss(fixed, warped_moving)
    else:
        raise ValueError(f"unknown similarity {similarity!r} (expected dmi, ncc, or mse)")
    if warp_jacobian is None:
        raise ValueError("total_loss requires the warp jacobian to differentiate the field")
    if warp_jacobian.shape != field.vectors.shape:
        raise ValueError("warp_jacobian shape must match the field")
    smooth = smoothness_loss(field)
    value = sim.value + lam * smooth.value
    grad = sim.grad[..., None] * warp_jacobian + lam * smooth.grad
    return LossValueGrad(value, grad)
