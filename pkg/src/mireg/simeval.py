"""Synthetic EPI-style distortion generation and evaluation metrics.

The simulator produces smooth, band-limited, single-axis displacement fields
(the geometry of susceptibility-induced EPI distortion: voxels shift along
the phase-encoding axis only).  Evaluation MI is hard-binned, deliberately
distinct from the Parzen loss used for optimization.

All randomness is drawn from numpy's PCG64 generator seeded explicitly, so
every artifact here is reproducible from its seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import DisplacementField, Volume3D
from .warp import _sample

__all__ = [
    "DistortionSpec",
    "simulate_distortion",
    "invert_field",
    "make_inter_modality_pair",
    "nested_ellipsoid_phantom",
    "metric_mi",
    "metric_ncc",
    "metric_ssim",
    "mean_endpoint_error",
]

_AXES = {"x": 0, "y": 1, "z": 2}
_MAX_MODES = 64


@dataclass
class DistortionSpec:
    """Shape of a synthetic single-axis distortion field.

    smoothness_scale is the shortest spatial wavelength (in voxels) present
    in the field; max_magnitude is the exact max absolute displacement.
    """

    phase_axis: str = "y"
    max_magnitude: float = 2.0
    smoothness_scale: float = 32.0
    seed: int = 0

    def __post_init__(self):
        if self.phase_axis not in _AXES:
            raise ValueError(f"phase_axis must be one of x, y, z, got {self.phase_axis!r}")
        if self.max_magnitude < 0:
            raise ValueError("max_magnitude must be >= 0")
        if self.smoothness_scale <= 0:
            raise ValueError("smoothness_scale must be > 0")


def simulate_distortion(dims, spec: DistortionSpec) -> DisplacementField:
    """Generate a smooth band-limited random field along the phase axis.

    The nonzero component is a sum of cosine modes with per-axis frequency at
    most 1/smoothness_scale cycles per voxel (seeded random amplitudes and
    phases), rescaled so its max absolute value equals max_magnitude exactly.
    Bernstein's inequality then bounds every forward difference by
    2*pi*max_magnitude/smoothness_scale.
    """
    nx, ny, nz = (int(d) for d in dims)
    out = np.zeros((nx, ny, nz, 3))
    if spec.max_magnitude == 0.0:
        return DisplacementField(out)

    max_m = [int(n / spec.smoothness_scale) for n in (nx, ny, nz)]
    modes = [
        (mx, my, mz)
        for mx in range(-max_m[0], max_m[0] + 1)
        for my in range(-max_m[1], max_m[1] + 1)
        for mz in range(-max_m[2], max_m[2] + 1)
        if (mx, my, mz) != (0, 0, 0)
    ]
    rng = np.random.default_rng(spec.seed)
    if not modes:
        # wavelength longer than the volume: no admissible periodic mode, so
        # fall back to a constant shift of the full magnitude
        comp = np.full((nx, ny, nz), spec.max_magnitude)
    else:
        if len(modes) > _MAX_MODES:
            keep = rng.choice(len(modes), size=_MAX_MODES, replace=False)
            modes = [modes[i] for i in sorted(keep)]
        # red spectrum: energy concentrated in the lowest admissible modes,
        # like the smooth large-scale structure of susceptibility fields
        decay = np.array([1.0 / (mx * mx + my * my + mz * mz) for mx, my, mz in modes])
        amps = rng.uniform(0.25, 1.0, size=len(modes)) * rng.choice([-1.0, 1.0], size=len(modes)) * decay
        phases = rng.uniform(0.0, 2.0 * math.pi, size=len(modes))
        gx = np.arange(nx)[:, None, None] / nx
        gy = np.arange(ny)[None, :, None] / ny
        gz = np.arange(nz)[None, None, :] / nz
        comp = np.zeros((nx, ny, nz))
        for (mx, my, mz), amp, ph in zip(modes, amps, phases):
            comp += amp * np.cos(2.0 * math.pi * (mx * gx + my * gy + mz * gz) + ph)
        peak = np.abs(comp).max()
        if peak == 0.0:
            comp = np.full((nx, ny, nz), spec.max_magnitude)
        else:
            comp *= spec.max_magnitude / peak

    out[..., _AXES[spec.phase_axis]] = comp
    return DisplacementField(out)


def _sample_field(field: DisplacementField, pts: np.ndarray) -> np.ndarray:
    out = np.empty_like(pts)
    for c in range(3):
        vals, _ = _sample(np.ascontiguousarray(field.vectors[..., c]), pts)
        out[:, c] = vals
    return out


def invert_field(field: DisplacementField, max_iter: int = 200, tol: float = 1e-12) -> DisplacementField:
    """Fixed-point inverse of a displacement field on its own grid.

    Solves psi(u) = -f(u + psi(u)) with trilinear sampling of f; converges
    when the field's Lipschitz constant is below 1 (shallower than one voxel
    of displacement change per voxel), else raises.
    """
    nx, ny, nz = field.dims
    base = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
        axis=-1,
    ).astype(np.float64).reshape(-1, 3)
    f = field.vectors.reshape(-1, 3)
    psi = -f.copy()
    delta = np.inf
    for _ in range(max_iter):
        nxt = -_sample_field(field, base + psi)
        delta = np.abs(nxt - psi).max()
        psi = nxt
        if delta < tol:
            break
    if not delta < max(tol, 1e-9):
        raise ValueError(f"field inversion did not converge (last change {delta:g}); field too steep")
    return DisplacementField(psi.reshape(nx, ny, nz, 3))


def make_inter_modality_pair(
    base: Volume3D,
    seed: int,
    breakpoint_values: np.ndarray | None = None,
    noise_std: float = 0.01,
) -> tuple[Volume3D, Volume3D]:
    """Derive an aligned pseudo-T1w / pseudo-B0 pair from one base volume.

    The first volume is the base; the second is a piecewise-linear intensity
    remap of it through 4 seeded interior breakpoints (generally non-monotone,
    so the pair keeps high mutual information but loses linear correlation)
    plus seeded Gaussian noise, clipped back to [0, 1].

    breakpoint_values overrides the 6 seeded knot values (at inputs 0, the 4
    breakpoints, and 1) for tests, e.g. an identity or inverting remap.
    """
    rng = np.random.default_rng(seed)
    knots_x = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 0.95, size=4)), [1.0]])
    if breakpoint_values is None:
        knots_y = rng.uniform(0.0, 1.0, size=6)
    else:
        knots_y = np.asarray(breakpoint_values, dtype=np.float64)
        if knots_y.shape != (6,):
            raise ValueError("breakpoint_values must have 6 entries")
    remapped = np.interp(base.data, knots_x, knots_y)
    if noise_std > 0:
        remapped = remapped + rng.normal(0.0, noise_std, size=base.dims)
    b0 = np.clip(remapped, 0.0, 1.0)
    return Volume3D(base.data.copy(), base.spacing), Volume3D(b0, base.spacing)


def nested_ellipsoid_phantom(dims=(48, 48, 48), blur_sigma: float = 1.0, shading: float = 0.05) -> Volume3D:
    """Three nested ellipsoids with distinct intensities on a dark background.

    A smooth sinusoidal shading (like an MR bias field) modulates the whole
    volume so every region carries registration signal, and a slight Gaussian
    blur imitates partial-volume softening at tissue boundaries.  The shading
    amplitude stays well below the spacing of the tissue intensities, so the
    four classes remain distinct.  Intensities are in [0, 1].
    """
    nx, ny, nz = (int(d) for d in dims)
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    x = (np.arange(nx)[:, None, None] - cx) / (0.47 * nx)
    y = (np.arange(ny)[None, :, None] - cy) / (0.43 * ny)
    z = (np.arange(nz)[None, None, :] - cz) / (0.45 * nz)
    r2 = x * x + y * y + z * z
    img = np.full((nx, ny, nz), 0.10)
    img[r2 <= 1.0] = 0.36
    img[r2 <= 0.55] = 0.62
    img[r2 <= 0.2] = 0.88
    if shading > 0:
        gx = np.arange(nx)[:, None, None] / nx
        gy = np.arange(ny)[None, :, None] / ny
        gz = np.arange(nz)[None, None, :] / nz
        img = img + shading * (
            np.sin(2.0 * math.pi * (1.3 * gx + 0.41))
            + np.sin(2.0 * math.pi * (1.1 * gy + 0.13))
            + np.sin(2.0 * math.pi * (0.9 * gz + 0.77))
        ) / 3.0
    if blur_sigma > 0:
        img = ndimage.gaussian_filter(img, blur_sigma, mode="nearest")
    return Volume3D(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Evaluation metrics (hard-binned MI, global NCC, mean local SSIM)
# ---------------------------------------------------------------------------


def _quantize(data: np.ndarray, num_bins: int) -> np.ndarray:
    idx = np.floor(data * num_bins).astype(np.intp)
    return np.clip(idx, 0, num_bins - 1)


def metric_mi(a: Volume3D, b: Volume3D, num_bins: int = 32) -> float:
    """Mutual information of hard-binned intensities (natural log)."""
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    ia = _quantize(a.data.ravel(), num_bins)
    ib = _quantize(b.data.ravel(), num_bins)
    joint = np.zeros((num_bins, num_bins))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    jj = joint[nz]
    return float(np.sum(jj * np.log(jj / (np.outer(pa, pb)[nz]))))


def metric_ncc(a: Volume3D, b: Volume3D) -> float:
    """Global Pearson correlation of the two volumes' intensities."""
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    if np.ptp(a.data) == 0.0 or np.ptp(b.data) == 0.0:
        raise ValueError("ncc undefined for a constant image (zero variance)")
    x = a.data - a.data.mean()
    y = b.data - b.data.mean()
    sxx = float(np.sum(x * x))
    syy = float(np.sum(y * y))
    return float(np.sum(x * y) / math.sqrt(sxx * syy))


def metric_ssim(a: Volume3D, b: Volume3D, window: int = 7) -> float:
    """Mean local SSIM over all fully supported cubic windows.

    Uniform window, constants C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with
    dynamic range L = 1 (images are normalized).
    """
    if a.dims != b.dims:
        raise ValueError(f"image dims differ: {a.dims} vs {b.dims}")
    if min(a.dims) < window:
        raise ValueError(f"volume dims {a.dims} smaller than the {window}^3 SSIM window")
    c1 = 0.01**2
    c2 = 0.03**2
    half = window // 2
    crop = (slice(half, -half),) * 3 if half else (slice(None),) * 3

    def local_mean(img):
        return ndimage.uniform_filter(img, size=window, mode="constant")[crop]

    mu_a = local_mean(a.data)
    mu_b = local_mean(b.data)
    aa = local_mean(a.data * a.data) - mu_a * mu_a
    bb = local_mean(b.data * b.data) - mu_b * mu_b
    ab = local_mean(a.data * b.data) - mu_a * mu_b
    ssim = ((2 * mu_a * mu_b + c1) * (2 * ab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (aa + bb + c2))
    return float(ssim.mean())


def mean_endpoint_error(field: DisplacementField, reference: DisplacementField) -> float:
    """Mean Euclidean distance between two fields' vectors."""
    if field.dims != reference.dims:
        raise ValueError(f"field dims differ: {field.dims} vs {reference.dims}")
    d = field.vectors - reference.vectors
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))
