"""Trilinear resampling through a displacement field, with analytic gradients.

Coordinates are continuous voxel indices of the moving grid.  Out-of-bounds
samples clamp to the nearest edge voxel.  The spatial gradient at a cell face
uses the cell below the face (ties to the lower cell), so gradients are
deterministic everywhere even though they are discontinuous across faces.
"""

from __future__ import annotations

import numpy as np

from .volume import DisplacementField, Volume3D

__all__ = ["sample_points", "trilinear_sample", "warp", "warp_with_jacobian"]


def sample_points(m: Volume3D, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinearly sample a volume at continuous points.

    points: array (n, 3) of (x, y, z) voxel coordinates.
    Returns (values (n,), gradients (n, 3)); gradients are the analytic
    partial derivatives of the interpolant, zero where the clamp is active.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    return _sample(m.data, pts)


def _sample(data: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = pts.shape[0]
    dims = data.shape
    idx0 = []
    idx1 = []
    frac = []
    live = []  # 1 where the coordinate is in range and the axis has >1 voxel
    for ax in range(3):
        size = dims[ax]
        x = pts[:, ax]
        if size == 1:
            i0 = np.zeros(n, dtype=np.intp)
            i1 = i0
            f = np.zeros(n)
            alive = np.zeros(n)
        else:
            xc = np.clip(x, 0.0, size - 1.0)
            # lower cell at integer coordinates: cell index = ceil(x) - 1
            i0 = np.clip(np.ceil(xc).astype(np.intp) - 1, 0, size - 2)
            i1 = i0 + 1
            f = xc - i0
            alive = ((x >= 0.0) & (x <= size - 1.0)).astype(np.float64)
        idx0.append(i0)
        idx1.append(i1)
        frac.append(f)
        live.append(alive)

    x0, y0, z0 = idx0
    x1, y1, z1 = idx1
    fx, fy, fz = frac
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]

    vals = (
        c000 * gx * gy * gz
        + c100 * fx * gy * gz
        + c010 * gx * fy * gz
        + c110 * fx * fy * gz
        + c001 * gx * gy * fz
        + c101 * fx * gy * fz
        + c011 * gx * fy * fz
        + c111 * fx * fy * fz
    )

    grads = np.empty((n, 3))
    grads[:, 0] = (
        (c100 - c000) * gy * gz
        + (c110 - c010) * fy * gz
        + (c101 - c001) * gy * fz
        + (c111 - c011) * fy * fz
    ) * live[0]
    grads[:, 1] = (
        (c010 - c000) * gx * gz
        + (c110 - c100) * fx * gz
        + (c011 - c001) * gx * fz
        + (c111 - c101) * fx * fz
    ) * live[1]
    grads[:, 2] = (
        (c001 - c000) * gx * gy
        + (c101 - c100) * fx * gy
        + (c011 - c010) * gx * fy
        + (c111 - c110) * fx * fy
    ) * live[2]
    return vals, grads


def trilinear_sample(m: Volume3D, point) -> tuple[float, np.ndarray]:
    """Sample one point; returns (intensity, spatial gradient 3-vector)."""
    vals, grads = sample_points(m, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(vals[0]), grads[0]


def _warp_arrays(m: Volume3D, field: DisplacementField) -> tuple[np.ndarray, np.ndarray]:
    nx, ny, nz = field.dims
    base = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
        axis=-1,
    ).astype(np.float64)
    pts = (base + field.vectors).reshape(-1, 3)
    vals, grads = _sample(m.data, pts)
    return vals.reshape(nx, ny, nz), grads.reshape(nx, ny, nz, 3)


def warp(m: Volume3D, field: DisplacementField) -> Volume3D:
    """Resample the moving volume at grid + field; output has the field's dims."""
    warped, _ = _warp_arrays(m, field)
    return Volume3D(warped, m.spacing)


def warp_with_jacobian(m: Volume3D, field: DisplacementField) -> tuple[Volume3D, np.ndarray]:
    """Warp and also return d(warped voxel)/d(field vector) per voxel.

    The Jacobian is the moving image's spatial gradient at each sample point,
    shape (nx, ny, nz, 3); chaining a similarity gradient through the warp is
    an elementwise product with it.
    """
    warped, jac = _warp_arrays(m, field)
    return Volume3D(warped, m.spacing), jac
