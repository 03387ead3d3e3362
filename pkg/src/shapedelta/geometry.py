"""Quaternion and oriented-box geometry, grid/point samplers and Chamfer distance.

Quaternions are scalar-first ``(w, x, y, z)``.  Box extents are half-lengths:
a box with extents ``r`` spans ``[-r, +r]`` along each local axis.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)
DEFAULT_GRID_M = 4


def quat_canonical(q) -> np.ndarray:
    """Normalize ``q`` and flip it onto the ``w >= 0`` half of the double cover."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        # w == 0: make the first non-zero vector component positive
        for v in q[1:]:
            if v != 0.0:
                if v < 0.0:
                    q = -q
                break
    return q


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = np.sin(angle / 2.0)
    return quat_canonical([np.cos(angle / 2.0), *(axis * s)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@lru_cache(maxsize=16)
def unit_box_grid(grid_m: int) -> np.ndarray:
    """The 6 faces of ``[-1, 1]^3``, each sampled on an ``m x m`` grid; shape ``(6 m^2, 3)``."""
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    t = np.linspace(-1.0, 1.0, grid_m)
    u, v = np.meshgrid(t, t, indexing="ij")
    u, v = u.ravel(), v.ravel()
    ones = np.ones_like(u)
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            f = np.empty((u.size, 3))
            f[:, axis] = sign * ones
            f[:, a] = u
            f[:, b] = v
            faces.append(f)
    grid = np.concatenate(faces, axis=0)
    grid.setflags(write=False)
    return grid


def box_grid_points(center, quat, extents, grid_m: int = DEFAULT_GRID_M) -> np.ndarray:
    """Deterministic face-grid samples of one oriented box."""
    grid = unit_box_grid(grid_m)
    rot = quat_to_matrix(np.asarray(quat, dtype=float))
    return (grid * np.asarray(extents, dtype=float)) @ rot.T + np.asarray(center, dtype=float)


def chamfer_distance(a, b) -> float:
    """Symmetric squared-distance Chamfer: mean nearest sq. distance a->b plus b->a."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    if len(a) * len(b) <= 250_000:
        diff = a[:, None, :] - b[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        return float(d.min(axis=1).mean() + d.min(axis=0).mean())
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da * da) + np.mean(db * db))


def batched_grid_chamfer(xs: np.ndarray, ys: np.ndarray, exact: bool = True) -> np.ndarray:
    """All-pairs Chamfer between point sets ``xs (n, p, 3)`` and ``ys (m, q, 3)`` -> ``(n, m)``.

    ``exact=False`` expands the squared norm into a matrix product: several
    times faster, but identical boxes score ~1e-17 instead of exactly 0.
    """
    n, p, _ = xs.shape
    m, q, _ = ys.shape
    x, y = xs.reshape(n * p, 3), ys.reshape(m * q, 3)
    if exact:
        diff = x[:, None, :] - y[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        d = np.einsum("ij,ij->i", x, x)[:, None] + np.einsum("ij,ij->i", y, y)[None, :] - 2.0 * (x @ y.T)
        np.maximum(d, 0.0, out=d)
    d = d.reshape(n, p, m, q)
    return d.min(axis=3).mean(axis=1) + d.min(axis=1).mean(axis=2)


def box_surface_area(extents) -> float:
    rx, ry, rz = extents
    return 8.0 * (rx * ry + ry * rz + rx * rz)


def sample_box_surface(center, quat, extents, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform random points on the surface of one oriented box."""
    r = np.asarray(extents, dtype=float)
    # face areas for the +-x, +-y, +-z face pairs
    areas = 4.0 * np.array([r[1] * r[2], r[0] * r[2], r[0] * r[1]])
    areas = np.repeat(areas, 2)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("box has zero surface area")
    faces = rng.choice(6, size=n, p=areas / total)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign
    rot = quat_to_matrix(np.asarray(quat, dtype=float))
    return (pts * r) @ rot.T + np.asarray(center, dtype=float)
