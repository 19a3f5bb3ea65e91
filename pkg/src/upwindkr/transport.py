"""Exact discrete optimal transport with the logarithmic cost ``log(|x - y| / r + 1)``.

Transport problems between atomic measures are solved by a primal network
simplex on the complete bipartite graph, augmented with an artificial root
node.  Leaving arcs follow Cunningham's strongly-feasible-tree rule, so
degenerate pivots cannot cycle; entering arcs are chosen by (block) Dantzig
pricing with ties resolved towards the lowest arc index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.spatial.distance import cdist

from .fields import CellField
from .mesh import Tessellation

DEFAULT_COST_CAP = 4_000_000
MIN_RADIUS = 1e-12
DROP_RTOL = 1e-15


class TransportError(ValueError):
    pass


@dataclass(eq=False)
class DiscreteMeasure:
    """Nonnegative atomic measure; atoms at identical locations are merged."""

    points: np.ndarray
    masses: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        m = np.asarray(self.masses, dtype=float).ravel()
        if pts.ndim == 1:
            pts = pts[:, None]
        if len(pts) != len(m):
            raise TransportError("points and masses differ in length")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise TransportError("masses must be finite and nonnegative")
        if len(m):
            uniq, inv = np.unique(pts, axis=0, return_inverse=True)
            if len(uniq) < len(pts):
                pts, m = uniq, np.bincount(inv.ravel(), weights=m, minlength=len(uniq))
        self.points, self.masses = pts, m

    @property
    def total(self) -> float:
        return math.fsum(self.masses)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.points.ndim == 2 else 1

    def __len__(self):
        return len(self.masses)

    @classmethod
    def empty(cls, dim: int) -> "DiscreteMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        return DiscreteMeasure(np.vstack([self.points, other.points]),
                               np.concatenate([self.masses, other.masses]))

    def scaled(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, self.masses * c, dict(self.meta))


@dataclass(eq=False)
class KRResult:
    """Optimal transport between two atomic measures.

    ``plan`` has columns (source atom, sink atom, mass).  Potentials satisfy
    ``zeta[i] - eta[j] <= cost[i, j]`` with equality on basic arcs.
    """

    value: float
    r: Optional[float]
    plan_src: np.ndarray
    plan_dst: np.ndarray
    plan_mass: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray
    gap: float
    stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def dual_value(self) -> float:
        return self.stats.get("dual_value", self.value)

    def write_plan_csv(self, path, plus: DiscreteMeasure, minus: DiscreteMeasure) -> None:
        d = plus.dim if len(plus) else minus.dim
        header = [f"src_x{k}" for k in range(d)] + [f"dst_x{k}" for k in range(d)] + ["mass", "cost"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, j, mass in zip(self.plan_src, self.plan_dst, self.plan_mass):
                x, y = plus.points[i], minus.points[j]
                dist = float(np.linalg.norm(x - y))
                c = math.log1p(dist / self.r) if self.r else dist
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y]
                           + [repr(float(mass)), repr(c)])


# ---------------------------------------------------------------------------
# network simplex kernel


@numba.njit(cache=True, nogil=True)
def _arc_ends(e, m, n):
    ereal = m * n
    if e < ereal:
        return e // n, m + e % n
    v = e - ereal
    if v < m:
        return v, m + n
    return m + n, v


@numba.njit(cache=True, nogil=True)
def _arc_cost(e, C, m, n, big):
    if e < m * n:
        return C[e // n, e % n]
    return big


@numba.njit(cache=True, nogil=True)
def _rebuild_tree(tree, C, m, n, big, parent, pred, up, depth, pi, adj_ptr, adj_arc, stack):
    nn = m + n + 1
    root = m + n
    for v in range(nn + 1):
        adj_ptr[v] = 0
    for t in range(len(tree)):
        s, d = _arc_ends(tree[t], m, n)
        adj_ptr[s + 1] += 1
        adj_ptr[d + 1] += 1
    for v in range(nn):
        adj_ptr[v + 1] += adj_ptr[v]
    fill = adj_ptr[:nn].copy()
    for t in range(len(tree)):
        e = tree[t]
        s, d = _arc_ends(e, m, n)
        adj_arc[fill[s]] = e
        fill[s] += 1
        adj_arc[fill[d]] = e
        fill[d] += 1
    for v in range(nn):
        parent[v] = -2
    parent[root] = -1
    depth[root] = 0
    pi[root] = 0.0
    top = 0
    stack[0] = root
    top = 1
    while top > 0:
        top -= 1
        v = stack[top]
        for p in range(adj_ptr[v], adj_ptr[v + 1]):
            e = adj_arc[p]
            s, d = _arc_ends(e, m, n)
            w = d if s == v else s
            if parent[w] != -2:
                continue
            parent[w] = v
            pred[w] = e
            depth[w] = depth[v] + 1
            c = _arc_cost(e, C, m, n, big)
            if s == w:
                up[w] = True
                pi[w] = pi[v] + c
            else:
                up[w] = False
                pi[w] = pi[v] - c
            stack[top] = w
            top += 1


@numba.njit(cache=True, nogil=True)
def _network_simplex(C, a, b, eps, max_pivots, block):
    m, n = C.shape
    N = m + n
    ereal = m * n
    E = ereal + N
    big = 1.0
    for i in range(m):
        for j in range(n):
            if C[i, j] + 1.0 > big:
                big = C[i, j] + 1.0
    flow = np.zeros(E)
    tree = np.empty(N, np.int64)
    for v in range(N):
        tree[v] = ereal + v
        flow[ereal + v] = a[v] if v < m else b[v - m]
    parent = np.empty(N + 1, np.int64)
    pred = np.empty(N + 1, np.int64)
    up = np.zeros(N + 1, np.bool_)
    depth = np.empty(N + 1, np.int64)
    pi = np.empty(N + 1)
    adj_ptr = np.empty(N + 2, np.int64)
    adj_arc = np.empty(2 * N, np.int64)
    stack = np.empty(N + 1, np.int64)
    pivots = 0
    degenerate = 0
    start = 0
    status = 0
    while True:
        _rebuild_tree(tree, C, m, n, big, parent, pred, up, depth, pi, adj_ptr, adj_arc, stack)
        # block pricing; real arcs are scanned row-major without divisions
        best = -eps
        enter = -1
        scanned = 0
        e = start
        while scanned < E:
            cnt = 0
            while cnt < block and scanned < E:
                if e < ereal:
                    i = e // n
                    j = e - i * n
                    stop = min(ereal, e + (block - cnt), e + (E - scanned), (i + 1) * n)
                    pii = pi[i]
                    while e < stop:
                        rc = C[i, j] - pii + pi[m + j]
                        if rc < best:
                            best = rc
                            enter = e
                        e += 1
                        j += 1
                        cnt += 1
                        scanned += 1
                else:
                    s, d = _arc_ends(e, m, n)
                    rc = big - pi[s] + pi[d]
                    if rc < best:
                        best = rc
                        enter = e
                    cnt += 1
                    scanned += 1
                    e += 1
                if e == E:
                    e = 0
            if enter >= 0:
                break
        if enter < 0:
            break
        if block < E:
            start = e
        if pivots >= max_pivots:
            status = 1
            break
        k, l = _arc_ends(enter, m, n)
        u = k
        v = l
        while u != v:
            if depth[u] > depth[v]:
                u = parent[u]
            elif depth[v] > depth[u]:
                v = parent[v]
            else:
                u = parent[u]
                v = parent[v]
        join = u
        delta = np.inf
        u_out = -1
        u = k
        while u != join:
            if up[u] and flow[pred[u]] < delta:
                delta = flow[pred[u]]
                u_out = u
            u = parent[u]
        u = l
        while u != join:
            if (not up[u]) and flow[pred[u]] <= delta:
                delta = flow[pred[u]]
                u_out = u
            u = parent[u]
        if u_out < 0:
            status = 2
            break
        if delta > 0:
            u = k
            while u != join:
                if up[u]:
                    flow[pred[u]] -= delta
                else:
                    flow[pred[u]] += delta
                u = parent[u]
            u = l
            while u != join:
                if up[u]:
                    flow[pred[u]] += delta
                else:
                    flow[pred[u]] -= delta
                u = parent[u]
            flow[enter] += delta
        else:
            degenerate += 1
        leave = pred[u_out]
        for t in range(N):
            if tree[t] == leave:
                tree[t] = enter
                break
        pivots += 1
    _rebuild_tree(tree, C, m, n, big, parent, pred, up, depth, pi, adj_ptr, adj_arc, stack)
    return flow, pi, tree, pivots, degenerate, status


def solve_transport(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray,
                    max_pivots: Optional[int] = None) -> dict:
    """Exact min-cost transportation plan for a dense cost matrix.

    Returns a dict with ``flow`` (m x n), potentials ``zeta`` (rows) and
    ``eta`` (columns), the basic real arcs, and solver statistics.
    """
    C = np.ascontiguousarray(cost, dtype=float)
    a = np.ascontiguousarray(supply, dtype=float)
    b = np.ascontiguousarray(demand, dtype=float)
    m, n = C.shape
    if len(a) != m or len(b) != n:
        raise TransportError("cost matrix shape does not match marginals")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise TransportError("costs must be finite and nonnegative")
    E = m * n + m + n
    scale = max(1.0, float(C.max()))
    eps = 4.0 * np.finfo(float).eps * (m + n + 1) * scale
    block = E if E <= 20_000 else min(E, max(4 * int(math.sqrt(E)), 20_000))
    if max_pivots is None:
        max_pivots = 100 * E + 10_000
    flow, pi, tree, pivots, degenerate, status = _network_simplex(C, a, b, eps, max_pivots, block)
    if status == 1:
        raise TransportError(f"network simplex hit the pivot cap ({max_pivots})")
    if status == 2:
        raise TransportError("network simplex found an unbounded cycle")
    art = flow[m * n:]
    total = max(a.sum(), b.sum(), 1e-300)
    if art.max(initial=0.0) > 1e-9 * total:
        raise TransportError("transport problem is infeasible (unbalanced marginals)")
    basic = tree[tree < m * n]
    return {
        "flow": flow[: m * n].reshape(m, n),
        "zeta": pi[:m].copy(),
        "eta": pi[m: m + n].copy(),
        "basic": np.column_stack([basic // n, basic % n]),
        "pivots": int(pivots),
        "degenerate_pivots": int(degenerate),
        "eps": eps,
    }


# ---------------------------------------------------------------------------
# public operations


def log_cost(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    return np.log1p(cdist(x, y) / r)


def _transport(plus: DiscreteMeasure, minus: DiscreteMeasure, cost_fn, r, cap) -> KRResult:
    if len(plus) == 0 or len(minus) == 0:
        if max(plus.total if len(plus) else 0.0, minus.total if len(minus) else 0.0) > 0:
            raise TransportError("cannot transport mass to or from an empty measure")
        return KRResult(0.0, r, np.zeros(0, int), np.zeros(0, int), np.zeros(0),
                        np.zeros(len(plus)), np.zeros(len(minus)), 0.0,
                        stats={"pivots": 0, "dual_value": 0.0})
    ta, tb = plus.total, minus.total
    if abs(ta - tb) > 1e-10 * max(ta, tb):
        raise TransportError(f"unbalanced measures: totals {ta!r} and {tb!r}")
    if len(plus) * len(minus) > cap:
        raise TransportError(
            f"{len(plus)} x {len(minus)} cost entries exceed the cap of {cap}; "
            "reduce the measures with coarsen()"
        )
    C = cost_fn(plus.points, minus.points)
    sol = solve_transport(C, plus.masses, minus.masses)
    flow = sol["flow"]
    src, dst = np.nonzero(flow > 0)
    mass = flow[src, dst]
    value = math.fsum(mass * C[src, dst])
    zeta, eta = sol["zeta"], sol["eta"]
    dual = math.fsum(plus.masses * zeta) - math.fsum(minus.masses * eta)
    bi, bj = sol["basic"][:, 0], sol["basic"][:, 1]
    slack = float(np.max(np.abs(zeta[bi] - eta[bj] - C[bi, bj]), initial=0.0))
    feas = float(np.max(zeta[:, None] - eta[None, :] - C))
    stats = {
        "pivots": sol["pivots"],
        "degenerate_pivots": sol["degenerate_pivots"],
        "slackness": slack,
        "dual_infeasibility": max(feas, 0.0),
        "dual_value": dual,
        "basic": sol["basic"],
        "size": (len(plus), len(minus)),
    }
    return KRResult(value, r, src, dst, mass, zeta, eta, abs(value - dual), stats=stats)


def kr_distance(plus: DiscreteMeasure, minus: DiscreteMeasure, r: float,
                cap: int = DEFAULT_COST_CAP) -> KRResult:
    """``D_r`` between two atomic measures of equal total mass."""
    if not r >= MIN_RADIUS:
        raise TransportError(f"r must be at least {MIN_RADIUS}, got {r!r}")
    res = _transport(plus, minus, lambda x, y: log_cost(x, y, r), r, cap)
    res.meta.update(plus.meta.get("bias", {}))
    return res


def w1_distance(plus: DiscreteMeasure, minus: DiscreteMeasure,
                cap: int = DEFAULT_COST_CAP) -> float:
    """1-Wasserstein distance (linear cost) between equal-mass atomic measures."""
    return _transport(plus, minus, cdist, None, cap).value


def w1_result(plus: DiscreteMeasure, minus: DiscreteMeasure,
              cap: int = DEFAULT_COST_CAP) -> KRResult:
    return _transport(plus, minus, cdist, None, cap)


def coarsen(measure: DiscreteMeasure, cell_size: float,
            origin: Optional[np.ndarray] = None) -> DiscreteMeasure:
    """Aggregate atoms into grid bins, replacing each bin by its barycentre.

    ``meta['max_shift']`` bounds how far any unit of mass moved (the bin
    diameter); the change in ``D_r`` is at most ``log(max_shift / r + 1)``
    times the total mass.
    """
    if not cell_size > 0:
        raise TransportError("cell_size must be positive")
    if len(measure) == 0:
        return measure
    pts, m = measure.points, measure.masses
    o = np.zeros(pts.shape[1]) if origin is None else np.asarray(origin, float)
    keys = np.floor((pts - o) / cell_size).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    mass = np.bincount(inv, weights=m, minlength=len(uniq))
    bary = np.column_stack([
        np.bincount(inv, weights=m * pts[:, k], minlength=len(uniq)) for k in range(pts.shape[1])
    ])
    counts = np.bincount(inv, minlength=len(uniq))
    keep = mass > 0
    safe = np.where(mass > 0, mass, 1.0)
    bary = bary / safe[:, None]
    # single atoms keep their exact position
    single = counts == 1
    if np.any(single):
        first = np.full(len(uniq), -1)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        bary[single] = pts[first[single]]
    out = DiscreteMeasure(bary[keep], mass[keep])
    shift = cell_size * math.sqrt(pts.shape[1]) if len(uniq) < len(pts) else 0.0
    out.meta = dict(measure.meta)
    out.meta["max_shift"] = max(shift, measure.meta.get("max_shift", 0.0))
    return out


def coarsening_bias(measure: DiscreteMeasure, r: float) -> float:
    """Upper bound on the ``D_r`` change caused by :func:`coarsen`."""
    return math.log1p(measure.meta.get("max_shift", 0.0) / r) * measure.total


def _split(points: np.ndarray, masses: np.ndarray) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    total = np.abs(masses).sum()
    keep = np.abs(masses) >= DROP_RTOL * total if total > 0 else np.zeros(len(masses), bool)
    pos = keep & (masses > 0)
    neg = keep & (masses < 0)
    return (DiscreteMeasure(points[pos], masses[pos]),
            DiscreteMeasure(points[neg], -masses[neg]))


def measure_from_field(mesh: Tessellation, field: CellField) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Positive and negative parts of ``sum_K rho_K |K| delta_{x_K}``."""
    return _split(np.asarray(mesh.centroids, float), field.values * mesh.volumes)


def signed_atoms_difference(points1, masses1, points2, masses2,
                            balance_tol: float = 1e-8) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """``(mu1 - mu2)^+`` and ``(mu1 - mu2)^-`` for signed atomic measures.

    Atoms at identical locations cancel.  A residual imbalance up to
    ``balance_tol`` times the total variation is removed by rescaling the
    lighter side; its size is stored in ``meta['imbalance']``.
    """
    p1 = np.asarray(points1, float).reshape(len(masses1), -1)
    p2 = np.asarray(points2, float).reshape(len(masses2), -1)
    m1 = np.asarray(masses1, float)
    m2 = np.asarray(masses2, float)
    tv = math.fsum(np.abs(m1)) + math.fsum(np.abs(m2))
    imbalance = math.fsum(m1) - math.fsum(m2)
    if abs(imbalance) > balance_tol * max(tv, 1e-300):
        raise TransportError(
            f"mass imbalance {imbalance:.3e} exceeds {balance_tol:g} x total variation {tv:.3e}"
        )
    pts = np.vstack([p1, p2])
    ms = np.concatenate([m1, -m2])
    if len(ms):
        uniq, inv = np.unique(pts, axis=0, return_inverse=True)
        pts, ms = uniq, np.bincount(inv.ravel(), weights=ms, minlength=len(uniq))
    plus, minus = _split(pts, ms)
    tp, tm = plus.total, minus.total
    if len(plus) and len(minus) and tp != tm:
        if tp < tm:
            plus = plus.scaled(tm / tp)
        else:
            minus = minus.scaled(tp / tm)
    elif (len(plus) == 0) != (len(minus) == 0):
        plus, minus = DiscreteMeasure.empty(pts.shape[1]), DiscreteMeasure.empty(pts.shape[1])
    for mu in (plus, minus):
        mu.meta["imbalance"] = imbalance
    return plus, minus


def signed_difference(mesh1: Tessellation, field1: CellField, mesh2: Tessellation,
                      field2: CellField, balance_tol: float = 1e-8
                      ) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Centroid atomisation of ``field1 - field2`` split into its two parts."""
    return signed_atoms_difference(mesh1.centroids, field1.values * mesh1.volumes,
                                   mesh2.centroids, field2.values * mesh2.volumes,
                                   balance_tol)
