"""Reference solutions from characteristics and the superposition principle.

The density at time ``t`` is represented as a cloud of weighted particles:
samples of the initial datum pushed forward by the flow, plus source
particles emitted at midpoint times ``s`` and pushed forward over ``[s, t]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .fields import CellField, FieldError, ScalarData, VelocityField, cell_quadrature
from .mesh import Tessellation
from .solver import SchemeConfig, Trajectory, run

logger = logging.getLogger(__name__)

DEFAULT_ODE_TOL = 1e-10
DEFAULT_PARTICLES_PER_CELL = 4
DEFAULT_SOURCE_NODES = 64
SINGULAR_NUDGE = 1e-12


class ReferenceError(RuntimeError):
    pass


@dataclass(eq=False)
class ParticleCloud:
    """Weighted particles; ``emission_time`` is 0 for initial-datum particles."""

    positions: np.ndarray
    masses: np.ndarray
    emission_time: np.ndarray
    from_source: np.ndarray
    time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.masses)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.dim)] + ["mass", "emission_time"])
            for x, m, s in zip(self.positions, self.masses, self.emission_time):
                w.writerow([repr(float(v)) for v in x] + [repr(float(m)), repr(float(s))])

    @classmethod
    def read_csv(cls, path) -> "ParticleCloud":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        s = data[:, -1]
        return cls(data[:, :-2], data[:, -2], s, s > 0)


def _domain_box(u: VelocityField, bounds: Optional[np.ndarray]) -> Optional[np.ndarray]:
    box = bounds if bounds is not None else u.bounds
    return None if box is None else np.asarray(box, float)


def flow_map(u: VelocityField, x, s: float, t: float, ode_tol: float = DEFAULT_ODE_TOL,
             bounds: Optional[np.ndarray] = None, method: str = "DOP853") -> np.ndarray:
    """Positions ``Phi_{t,s}(x)`` of the Lagrangian flow, vectorised over points.

    Points leaving the domain box by less than ``1e-6 diam`` are projected
    back; larger excursions raise :class:`ReferenceError`.
    """
    if t < s:
        raise ReferenceError("flow_map integrates forward only (s <= t)")
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts).reshape(-1, u.dim)
    if t == s or len(pts) == 0:
        return pts[0].copy() if single else pts.copy()
    k, d = pts.shape

    def rhs(tau, y):
        return np.asarray(u.evaluate(tau, y.reshape(k, d)), float).ravel()

    scale = max(1.0, float(np.abs(pts).max()))
    sol = solve_ivp(rhs, (s, t), pts.ravel(), method=method, rtol=ode_tol,
                    atol=ode_tol * scale)
    if not sol.success:
        raise ReferenceError(f"ODE integration failed: {sol.message}")
    out = sol.y[:, -1].reshape(k, d)
    box = _domain_box(u, bounds)
    if box is not None:
        diam = float(np.linalg.norm(box[:, 1] - box[:, 0]))
        excess = np.maximum(box[:, 0] - out, out - box[:, 1]).max()
        if excess > 1e-6 * diam:
            raise ReferenceError(
                f"trajectory left the domain by {excess:.3e} (non-tangential field or "
                "integrator failure)"
            )
        out = np.clip(out, box[:, 0], box[:, 1])
    return out[0] if single else out


def _nudge_singular(u: VelocityField, pts: np.ndarray) -> np.ndarray:
    # the Sobolev-only test field is not Lipschitz at the origin
    if u.regularity == "sobolev_only":
        at_zero = np.all(pts == 0.0, axis=1)
        if np.any(at_zero):
            pts = pts.copy()
            pts[at_zero, 0] = SINGULAR_NUDGE
    return pts


def _seed(sampling_mesh: Tessellation, particles_per_cell: int):
    if sampling_mesh.dim == 1:
        order = particles_per_cell
    else:
        order = int(round(math.sqrt(particles_per_cell / 4)))
        if 4 * order * order != particles_per_cell:
            raise ReferenceError("2D seeding needs particles_per_cell = 4 k^2 (k = 1, 2, ...)")
    pts, wts = cell_quadrature(sampling_mesh, order)
    w = (wts * sampling_mesh.volumes[:, None]).ravel()
    owner = np.repeat(np.arange(sampling_mesh.n_cells), wts.shape[1])
    return pts.reshape(-1, sampling_mesh.dim), w, owner


def _match_cell_masses(g, mesh: Tessellation, m: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """Correct particle masses so each cell carries its exact integral, when known."""
    exact = getattr(g, "exact_average", None)
    target = exact(mesh) if exact is not None else None
    if target is None:
        return m
    target = np.asarray(target, float) * mesh.volumes
    have = np.bincount(owner, weights=m, minlength=mesh.n_cells)
    count = np.bincount(owner, minlength=mesh.n_cells)
    # rescale where the sample sum is usable, otherwise spread the defect evenly
    scalable = (have != 0) & ((target == 0) | (np.sign(have) == np.sign(target)))
    factor = np.where(scalable, target / np.where(have != 0, have, 1.0), 1.0)
    shift = np.where(scalable, 0.0, (target - have) / count)
    return m * factor[owner] + shift[owner]


def _image_diameters(u: VelocityField, mesh: Tessellation, cells: np.ndarray, s: float,
                     t: float, ode_tol: float) -> np.ndarray:
    """Diameter of the advected vertex set of each listed cell."""
    if len(cells) == 0:
        return np.zeros(0)
    if mesh.dim == 1:
        verts = mesh.vertices[mesh.cell_nodes[cells]]
    else:
        verts = mesh.cell_polygons()[cells]
    k, nv, d = verts.shape
    img = flow_map(u, _nudge_singular(u, verts.reshape(-1, d)), s, t, ode_tol).reshape(k, nv, d)
    diff = img[:, :, None, :] - img[:, None, :, :]
    return np.sqrt((diff ** 2).sum(-1)).max(axis=(1, 2))


def reference_solution(u: VelocityField, data: ScalarData, t: float,
                       sampling_mesh: Tessellation,
                       particles_per_cell: int = DEFAULT_PARTICLES_PER_CELL,
                       source_time_nodes: int = DEFAULT_SOURCE_NODES,
                       ode_tol: float = DEFAULT_ODE_TOL) -> ParticleCloud:
    """Particle approximation of ``rho(t) = phi_t # rho^0 + int_0^t Phi_{t,s} # f_s ds``.

    ``source_time_nodes`` is the number of midpoint emission times per unit
    time.  Each batch of emitted masses is balanced to zero total, matching the
    mean correction applied to discrete sources.
    """
    if t < 0:
        raise ReferenceError("t must be nonnegative")
    x, w, owner = _seed(sampling_mesh, particles_per_cell)
    x = _nudge_singular(u, x)
    m0 = np.asarray(data.initial(x), float) * w
    m0 = _match_cell_masses(data.initial, sampling_mesh, m0, owner)
    keep = m0 != 0
    # W1 bound: every particle stands for mass spread over (the image of) its cell
    cell_tv = np.bincount(owner, weights=np.abs(m0), minlength=sampling_mesh.n_cells)
    support = np.flatnonzero(cell_tv)
    diam = np.zeros(sampling_mesh.n_cells)
    diam[support] = _image_diameters(u, sampling_mesh, support, 0.0, t, ode_tol)
    w1_bound = float(cell_tv @ diam)
    pos = [flow_map(u, x[keep], 0.0, t, ode_tol)]
    mass = [m0[keep]]
    emit = [np.zeros(keep.sum())]
    if data.source is not None and t > 0:
        ns = max(1, int(math.ceil(source_time_nodes * t)))
        ds = t / ns
        dom = sampling_mesh.volumes.sum()
        for k in range(ns):
            s = (k + 0.5) * ds
            f = np.asarray(data.source(s, x), float) * w
            imbalance = math.fsum(f)
            f = f - imbalance * w / dom
            nz = f != 0
            if not np.any(nz):
                continue
            pos.append(flow_map(u, x[nz], s, t, ode_tol))
            mass.append(f[nz] * ds)
            emit.append(np.full(nz.sum(), s))
            src_tv = np.bincount(owner, weights=np.abs(f) * ds, minlength=sampling_mesh.n_cells)
            cells = np.flatnonzero(src_tv)
            w1_bound += float(src_tv[cells] @ _image_diameters(u, sampling_mesh, cells, s, t, ode_tol))
            # midpoint rule in emission time: each particle is at most u_sup ds / 2 off
            w1_bound += float(src_tv.sum()) * u.sup_norm * ds / 2
    emit_all = np.concatenate(emit)
    cloud = ParticleCloud(np.vstack(pos), np.concatenate(mass), emit_all, emit_all > 0, t)
    cloud.meta.update({
        "sampling_h": sampling_mesh.h,
        "particles_per_cell": particles_per_cell,
        "ode_tol": ode_tol,
        "w1_bound": w1_bound,
        "source_dt": (t / max(1, int(math.ceil(source_time_nodes * t)))) if data.source is not None else 0.0,
    })
    return cloud


def fine_grid_reference(mesh_fine: Tessellation, u: VelocityField, data: ScalarData,
                        delta_fine: float, t: float, *, q: float = 2.0, kappa: float = 2.0,
                        h_coarsest: Optional[float] = None,
                        delta_coarsest: Optional[float] = None,
                        tol: float = 1e-12) -> CellField:
    """The scheme itself on a much finer grid, used as a surrogate reference.

    The result carries an ``O(sqrt(h_fine))`` bias, recorded in ``meta``.
    """
    if h_coarsest is not None and mesh_fine.h > h_coarsest / 16 * (1 + 1e-9):
        raise ReferenceError("fine-grid reference needs h_fine <= h_coarsest / 16")
    if delta_coarsest is not None and delta_fine > delta_coarsest / 16 * (1 + 1e-9):
        raise ReferenceError("fine-grid reference needs delta_fine <= delta_coarsest / 16")
    n = int(round(t / delta_fine))
    if t > 0 and abs(n * delta_fine - t) > 1e-9 * t:
        raise ReferenceError("t must be a multiple of delta_fine")
    if n == 0:
        from .fields import cell_average
        out = cell_average(mesh_fine, data.initial)
    else:
        traj = run(mesh_fine, u, data, SchemeConfig(delta=delta_fine, T=n * delta_fine,
                                                    q=q, kappa=kappa, tol=tol))
        out = traj.snapshots[-1]
    out.meta["reference"] = "fine-grid"
    out.meta["bias_scale"] = math.sqrt(mesh_fine.h)
    return out


def advected_area(u: VelocityField, polygon: np.ndarray, s: float, t: float,
                  refine: int = 2048, ode_tol: float = DEFAULT_ODE_TOL) -> tuple[float, float]:
    """Area of a polygon before and after advection, tracking a refined boundary."""
    poly = np.asarray(polygon, float)
    nxt = np.roll(poly, -1, axis=0)
    frac = np.arange(refine)[:, None, None] / refine
    pts = (poly[None] + frac * (nxt - poly)[None]).transpose(1, 0, 2).reshape(-1, 2)

    def shoelace(p):
        q = np.roll(p, -1, axis=0)
        return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))

    return shoelace(pts), shoelace(flow_map(u, pts, s, t, ode_tol))
