"""Unstructured tessellations of intervals and rectangles.

A :class:`Tessellation` stores every face exactly once, oriented from its
owner cell towards its neighbour.  Quantities attached to a face (normal,
flux) therefore change sign when read from the neighbour side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

BOUNDARY = -1


class MeshError(ValueError):
    """Raised for invalid mesh input or a tessellation violating its invariants."""


@dataclass(frozen=True, eq=False)
class Tessellation:
    """Polyhedral partition of a bounded domain in one or two dimensions.

    Attributes:
        dim: spatial dimension, 1 or 2.
        volumes: cell volumes ``|K|``, shape ``(nc,)``.
        centroids: cell barycentres, shape ``(nc, dim)``.
        diameters: cell diameters, shape ``(nc,)``.
        face_areas: face measures ``|K|L|`` (1 for points in 1D), shape ``(nf,)``.
        face_normals: unit normals pointing from owner to neighbour (or
            outwards on the boundary), shape ``(nf, dim)``.
        face_owner: owner cell of each face.
        face_neighbor: neighbour cell, or ``BOUNDARY``.
        face_vertices: endpoints of each face, shape ``(nf, dim, dim)``; in 1D
            the single point.  ``None`` for meshes read from text files.
        vertices: mesh nodes, shape ``(nv, dim)``; may be ``None``.
        cell_nodes: node indices per cell in counter-clockwise order.
        bounds: axis-aligned bounding box, shape ``(dim, 2)``.
    """

    dim: int
    volumes: np.ndarray
    centroids: np.ndarray
    diameters: np.ndarray
    face_areas: np.ndarray
    face_normals: np.ndarray
    face_owner: np.ndarray
    face_neighbor: np.ndarray
    face_vertices: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = None
    cell_nodes: Optional[np.ndarray] = None
    bounds: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("volumes", "centroids", "diameters", "face_areas",
                     "face_normals", "face_owner", "face_neighbor",
                     "face_vertices", "vertices", "cell_nodes", "bounds"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return len(self.volumes)

    @property
    def n_faces(self) -> int:
        return len(self.face_areas)

    @property
    def h(self) -> float:
        """Mesh size: the largest cell diameter."""
        return float(self.diameters.max())

    @property
    def interior(self) -> np.ndarray:
        """Boolean mask of interior faces."""
        return self.face_neighbor != BOUNDARY

    @property
    def domain_volume(self) -> float:
        if self.bounds is None:
            return float(self.volumes.sum())
        return float(np.prod(self.bounds[:, 1] - self.bounds[:, 0]))

    @property
    def perimeters(self) -> np.ndarray:
        """``|dK|`` per cell, boundary faces included."""
        if "perimeters" not in self._cache:
            per = np.zeros(self.n_cells)
            np.add.at(per, self.face_owner, self.face_areas)
            inner = self.interior
            np.add.at(per, self.face_neighbor[inner], self.face_areas[inner])
            self._cache["perimeters"] = per
        return self._cache["perimeters"]

    @property
    def cell_faces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR incidence ``(indptr, face ids, orientation sign)`` per cell.

        The sign is +1 when the cell owns the face and -1 when it is the
        neighbour, so ``sign * normal`` is always the outward normal.
        """
        if "cell_faces" not in self._cache:
            inner = np.flatnonzero(self.interior)
            cells = np.concatenate([self.face_owner, self.face_neighbor[inner]])
            faces = np.concatenate([np.arange(self.n_faces), inner])
            signs = np.concatenate([np.ones(self.n_faces), -np.ones(len(inner))])
            order = np.lexsort((faces, cells))
            counts = np.bincount(cells, minlength=self.n_cells)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._cache["cell_faces"] = (indptr, faces[order], signs[order])
        return self._cache["cell_faces"]

    def closure_residual(self) -> np.ndarray:
        """Per cell ``|sum_faces |K|L| nu_KL|`` (Euclidean norm)."""
        acc = np.zeros((self.n_cells, self.dim))
        weighted = self.face_areas[:, None] * self.face_normals
        np.add.at(acc, self.face_owner, weighted)
        inner = self.interior
        np.add.at(acc, self.face_neighbor[inner], -weighted[inner])
        return np.linalg.norm(acc, axis=1)

    def adjacency(self) -> list[set]:
        nbrs = [set() for _ in range(self.n_cells)]
        for f in np.flatnonzero(self.interior):
            k, l = int(self.face_owner[f]), int(self.face_neighbor[f])
            nbrs[k].add(l)
            nbrs[l].add(k)
        return nbrs

    def cell_polygons(self) -> np.ndarray:
        """Vertex coordinates per cell, shape ``(nc, nv, dim)``."""
        if self.vertices is None or self.cell_nodes is None:
            raise MeshError("mesh carries no vertex geometry")
        return self.vertices[self.cell_nodes]

    def validate(self, volume_rtol: float = 1e-10, closure_rtol: float = 1e-10) -> None:
        """Check the structural invariants; raise :class:`MeshError` on failure."""
        if self.dim not in (1, 2):
            raise MeshError(f"unsupported dimension {self.dim}")
        if np.any(~np.isfinite(self.volumes)) or np.any(self.volumes <= 0):
            bad = int(np.flatnonzero(~(self.volumes > 0))[0])
            raise MeshError(f"cell {bad} has non-positive volume")
        if np.any(self.face_areas <= 0):
            bad = int(np.flatnonzero(self.face_areas <= 0)[0])
            raise MeshError(f"face {bad} has non-positive area")
        norms = np.linalg.norm(self.face_normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise MeshError(f"face {bad} normal is not a unit vector")
        nc = self.n_cells
        if np.any((self.face_owner < 0) | (self.face_owner >= nc)):
            raise MeshError("face owner out of range")
        inner = self.interior
        nb = self.face_neighbor[inner]
        if np.any((nb < 0) | (nb >= nc)):
            raise MeshError("face neighbour out of range")
        if np.any(nb == self.face_owner[inner]):
            bad = int(np.flatnonzero(inner)[np.flatnonzero(nb == self.face_owner[inner])[0]])
            raise MeshError(f"interior face {bad} references the same cell twice")
        pairs = np.sort(np.column_stack([self.face_owner[inner], nb]), axis=1)
        if len(pairs) and len(np.unique(pairs, axis=0)) != len(pairs):
            raise MeshError("duplicate interior faces")
        if self.bounds is not None:
            total = self.volumes.sum()
            dom = self.domain_volume
            if abs(total - dom) > volume_rtol * dom:
                raise MeshError(f"cell volumes sum to {total!r}, domain volume is {dom!r}")
        res = self.closure_residual()
        tol = closure_rtol * self.perimeters
        if np.any(res > tol):
            bad = int(np.argmax(res - tol))
            raise MeshError(f"cell {bad} boundary does not close (residual {res[bad]:.3e})")


@dataclass(frozen=True)
class RegularityReport:
    h: float
    isoperimetric: float
    volume_ratio: float
    face_ratio: float


def regularity_report(mesh: Tessellation) -> RegularityReport:
    """Computable proxies for the mesh regularity constants.

    ``isoperimetric`` is ``max_K h |dK| / |K|``; ``volume_ratio`` is the
    smallest over the largest cell volume; ``face_ratio`` is
    ``min |K|L| / h**(d-1)``.
    """
    h = mesh.h
    iso = float(np.max(h * mesh.perimeters / mesh.volumes))
    vr = float(mesh.volumes.min() / mesh.volumes.max())
    fr = float(mesh.face_areas.min() / h ** (mesh.dim - 1))
    return RegularityReport(h=h, isoperimetric=iso, volume_ratio=vr, face_ratio=fr)


def build_interval_mesh(a: float, b: float, sizes: Sequence[float]) -> Tessellation:
    """Consecutive intervals of the given lengths covering ``[a, b]``.

    Face ``k`` sits at node ``x_k``; interior faces are owned by the cell on
    their left, so their normal is +1.
    """
    sizes = np.asarray(sizes, dtype=float)
    if not a < b:
        raise MeshError(f"need a < b, got a={a!r}, b={b!r}")
    if sizes.ndim != 1 or len(sizes) == 0:
        raise MeshError("sizes must be a non-empty list")
    if np.any(~(sizes > 0)):
        raise MeshError("cell sizes must be positive")
    if abs(sizes.sum() - (b - a)) > 1e-12 * max(1.0, abs(b - a)):
        raise MeshError(f"sizes sum to {sizes.sum()!r}, expected {b - a!r}")
    n = len(sizes)
    nodes = a + np.concatenate([[0.0], np.cumsum(sizes)])
    nodes[-1] = b
    owner = np.concatenate([[0], np.arange(n)])
    neighbor = np.concatenate([[BOUNDARY], np.arange(1, n), [BOUNDARY]])
    normals = np.ones((n + 1, 1))
    normals[0, 0] = -1.0
    return Tessellation(
        dim=1,
        volumes=np.diff(nodes),
        centroids=(0.5 * (nodes[:-1] + nodes[1:]))[:, None],
        diameters=np.diff(nodes),
        face_areas=np.ones(n + 1),
        face_normals=normals,
        face_owner=owner,
        face_neighbor=neighbor,
        face_vertices=nodes[:, None, None].copy(),
        vertices=nodes[:, None].copy(),
        cell_nodes=np.column_stack([np.arange(n), np.arange(1, n + 1)]),
        bounds=np.array([[a, b]], dtype=float),
    )


def uniform_interval_mesh(a: float, b: float, n: int) -> Tessellation:
    return build_interval_mesh(a, b, np.full(n, (b - a) / n))


def _polygon_geometry(polys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y = polys[..., 0], polys[..., 1]
    xn, yn = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum(axis=1)
    cx = ((x + xn) * cross).sum(axis=1) / (6.0 * area)
    cy = ((y + yn) * cross).sum(axis=1) / (6.0 * area)
    diff = polys[:, :, None, :] - polys[:, None, :, :]
    diam = np.sqrt((diff ** 2).sum(axis=-1)).max(axis=(1, 2))
    return area, np.column_stack([cx, cy]), diam


def _check_convex(polys: np.ndarray) -> None:
    edges = np.roll(polys, -1, axis=1) - polys
    nxt = np.roll(edges, -1, axis=1)
    turn = edges[..., 0] * nxt[..., 1] - edges[..., 1] * nxt[..., 0]
    bad = np.flatnonzero(np.any(turn <= 0, axis=1))
    if len(bad):
        c = int(bad[0])
        raise MeshError(
            f"cell {c} is non-convex or inverted after perturbation "
            f"(vertices {polys[c].tolist()})"
        )


def build_perturbed_quad_mesh(
    domain: Sequence[Sequence[float]],
    nx: int,
    ny: int,
    perturbation: float = 0.0,
    seed: int = 0,
) -> Tessellation:
    """Logically Cartesian quadrilateral mesh with jittered interior nodes.

    Args:
        domain: ``((x0, x1), (y0, y1))``.
        nx, ny: cells per direction.
        perturbation: interior nodes move by at most ``perturbation *
            min(dx, dy)`` (uniformly in a disc); boundary nodes stay fixed.
        seed: RNG seed; identical inputs give bit-identical meshes.
    """
    (x0, x1), (y0, y1) = domain
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    if not (0.0 <= perturbation < 0.3):
        raise MeshError(f"perturbation must lie in [0, 0.3), got {perturbation!r}")
    if not (x0 < x1 and y0 < y1):
        raise MeshError("degenerate domain")
    dx, dy = (x1 - x0) / nx, (y1 - y0) / ny
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    if perturbation > 0 and nx > 1 and ny > 1:
        rng = np.random.default_rng(seed)
        jj, ii = np.meshgrid(np.arange(1, ny), np.arange(1, nx), indexing="ij")
        idx = (jj * (nx + 1) + ii).ravel()
        amp = perturbation * min(dx, dy)
        rad = amp * np.sqrt(rng.random(len(idx)))
        ang = 2.0 * np.pi * rng.random(len(idx))
        verts[idx, 0] += rad * np.cos(ang)
        verts[idx, 1] += rad * np.sin(ang)

    def vid(i, j):
        return j * (nx + 1) + i

    jc, ic = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ic, jc = ic.ravel(), jc.ravel()
    cell_nodes = np.column_stack([vid(ic, jc), vid(ic + 1, jc), vid(ic + 1, jc + 1), vid(ic, jc + 1)])
    polys = verts[cell_nodes]
    _check_convex(polys)
    area, centroid, diam = _polygon_geometry(polys)

    def cid(i, j):
        return j * nx + i

    p_list, q_list, own_list, nb_list = [], [], [], []
    # vertical faces
    jv, iv = np.meshgrid(np.arange(ny), np.arange(nx + 1), indexing="ij")
    iv, jv = iv.ravel(), jv.ravel()
    left = iv >= 1
    p = np.where(left, vid(iv, jv), vid(iv, jv + 1))
    q = np.where(left, vid(iv, jv + 1), vid(iv, jv))
    own = np.where(left, cid(iv - 1, jv), cid(iv, jv))
    nb = np.where(left & (iv < nx), cid(iv, jv), BOUNDARY)
    p_list.append(p); q_list.append(q); own_list.append(own); nb_list.append(nb)
    # horizontal faces
    jh, ih = np.meshgrid(np.arange(ny + 1), np.arange(nx), indexing="ij")
    ih, jh = ih.ravel(), jh.ravel()
    below = jh >= 1
    p = np.where(below, vid(ih + 1, jh), vid(ih, jh))
    q = np.where(below, vid(ih, jh), vid(ih + 1, jh))
    own = np.where(below, cid(ih, jh - 1), cid(ih, jh))
    nb = np.where(below & (jh < ny), cid(ih, jh), BOUNDARY)
    p_list.append(p); q_list.append(q); own_list.append(own); nb_list.append(nb)

    p = np.concatenate(p_list)
    q = np.concatenate(q_list)
    tangent = verts[q] - verts[p]
    length = np.linalg.norm(tangent, axis=1)
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / length[:, None]
    return Tessellation(
        dim=2,
        volumes=area,
        centroids=centroid,
        diameters=diam,
        face_areas=length,
        face_normals=normals,
        face_owner=np.concatenate(own_list),
        face_neighbor=np.concatenate(nb_list),
        face_vertices=np.stack([verts[p], verts[q]], axis=1),
        vertices=verts,
        cell_nodes=cell_nodes,
        bounds=np.array([[x0, x1], [y0, y1]], dtype=float),
    )


def write_mesh(mesh: Tessellation, path) -> None:
    """Write the plain-text exchange format (cells, then faces)."""
    lines = [f"{mesh.dim} {mesh.n_cells} {mesh.n_faces} {mesh.h!r}"]
    for k in range(mesh.n_cells):
        cen = " ".join(repr(float(c)) for c in mesh.centroids[k])
        lines.append(f"{k} {float(mesh.volumes[k])!r} {cen} {float(mesh.diameters[k])!r}")
    for f in range(mesh.n_faces):
        nrm = " ".join(repr(float(c)) for c in mesh.face_normals[f])
        lines.append(
            f"{f} {float(mesh.face_areas[f])!r} {nrm} "
            f"{int(mesh.face_owner[f])} {int(mesh.face_neighbor[f])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Tessellation:
    """Read the plain-text exchange format; geometry beyond faces is absent."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise MeshError("empty mesh file")
    try:
        dim, nc, nf = int(rows[0][0]), int(rows[0][1]), int(rows[0][2])
        cells = np.array([[float(v) for v in r] for r in rows[1:1 + nc]])
        faces = np.array([[float(v) for v in r] for r in rows[1 + nc:1 + nc + nf]])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file: {exc}") from exc
    if cells.shape != (nc, dim + 3) or faces.shape != (nf, dim + 4):
        raise MeshError("mesh file row counts or widths do not match header")
    if not np.array_equal(cells[:, 0], np.arange(nc)) or not np.array_equal(faces[:, 0], np.arange(nf)):
        raise MeshError("cell and face ids must be consecutive from 0")
    return Tessellation(
        dim=dim,
        volumes=cells[:, 1].copy(),
        centroids=cells[:, 2:2 + dim].copy(),
        diameters=cells[:, 2 + dim].copy(),
        face_areas=faces[:, 1].copy(),
        face_normals=faces[:, 2:2 + dim].copy(),
        face_owner=faces[:, 2 + dim].astype(int),
        face_neighbor=faces[:, 3 + dim].astype(int),
    )


def locate_points(mesh: Tessellation, points: np.ndarray, candidates: int = 9) -> np.ndarray:
    """Index of the cell containing each point, ``-1`` outside the mesh.

    Points on a shared face are assigned to one of the adjacent cells.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
    if mesh.dim == 1:
        left = mesh.vertices[mesh.cell_nodes[:, 0], 0]
        right = mesh.vertices[mesh.cell_nodes[:, 1], 0]
        order = np.argsort(left)
        idx = np.searchsorted(left[order], pts[:, 0], side="right") - 1
        idx = np.clip(idx, 0, mesh.n_cells - 1)
        cell = order[idx]
        inside = (pts[:, 0] >= left[cell] - 1e-14) & (pts[:, 0] <= right[cell] + 1e-14)
        return np.where(inside, cell, -1)
    from scipy.spatial import cKDTree

    polys = mesh.cell_polygons()
    k = min(candidates, mesh.n_cells)
    _, near = cKDTree(mesh.centroids).query(pts, k=k)
    near = near.reshape(len(pts), k)
    out = np.full(len(pts), -1)
    for c in range(k):
        todo = out < 0
        if not np.any(todo):
            break
        cell = near[todo, c]
        p = polys[cell]
        q = np.roll(p, -1, axis=1)
        x = pts[todo][:, None, :]
        cross = (q[..., 0] - p[..., 0]) * (x[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (x[..., 0] - p[..., 0])
        tol = 1e-12 * mesh.h ** 2
        hit = np.all(cross >= -tol, axis=1)
        sub = out[todo]
        sub[hit] = cell[hit]
        out[todo] = sub
    return out
