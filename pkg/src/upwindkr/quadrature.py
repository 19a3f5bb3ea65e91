"""Fixed-order quadrature rules on intervals, triangles and convex polygons."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]; weights sum to one."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed (Duffy) Gauss rule on the reference triangle.

    Returns barycentric-free reference coordinates ``(s, t)`` in the triangle
    with vertices (0,0), (1,0), (0,1) and weights normalised to sum to one.
    With ``order`` points per direction the rule integrates polynomials of
    total degree ``2*order - 2`` exactly.
    """
    g, w = gauss_legendre(order)
    s, t = np.meshgrid(g, g, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    pts = np.column_stack([(s * (1.0 - t)).ravel(), t.ravel()])
    wts = (ws * wt * (1.0 - t)).ravel() * 2.0
    return pts, wts


def polygon_rule(polygon: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on a convex polygon via its centroid fan.

    Weights are normalised so that they sum to one, i.e. the rule computes
    averages over the polygon.
    """
    poly = np.asarray(polygon, dtype=float)
    centre = poly.mean(axis=0)
    ref, wref = triangle_rule(order)
    pts, wts = [], []
    nv = len(poly)
    for k in range(nv):
        a, b = poly[k], poly[(k + 1) % nv]
        e1, e2 = a - centre, b - centre
        area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0])
        pts.append(centre + np.outer(ref[:, 0], e1) + np.outer(ref[:, 1], e2))
        wts.append(area * wref)
    w = np.concatenate(wts)
    return np.concatenate(pts), w / w.sum()


def batched_polygon_rule(polygons: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`polygon_rule` for ``(n_cells, n_vertices, 2)`` arrays.

    Returns points of shape ``(n_cells, n_points, 2)`` and normalised weights
    of shape ``(n_cells, n_points)``.
    """
    polys = np.asarray(polygons, dtype=float)
    ref, wref = triangle_rule(order)
    centre = polys.mean(axis=1)
    nv = polys.shape[1]
    pts, wts = [], []
    for k in range(nv):
        e1 = polys[:, k] - centre
        e2 = polys[:, (k + 1) % nv] - centre
        area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        p = (centre[:, None, :] + ref[None, :, 0:1] * e1[:, None, :]
             + ref[None, :, 1:2] * e2[:, None, :])
        pts.append(p)
        wts.append(area[:, None] * wref[None, :])
    w = np.concatenate(wts, axis=1)
    return np.concatenate(pts, axis=1), w / w.sum(axis=1, keepdims=True)
