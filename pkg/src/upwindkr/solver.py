"""Implicit upwind finite-volume time stepping for the continuity equation.

Each step solves ``(I + delta B) rho^{n+1} = rho^n + delta f^n`` where ``B`` is
the upwind transport operator.  The matrix is an M-matrix whose
volume-weighted column sums equal one, so the scheme is conservative and
monotone.  The baseline linear solver is symmetric Gauss-Seidel.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
import scipy.sparse as sps

from .fields import (
    CellField,
    FieldError,
    FluxData,
    ScalarData,
    VelocityField,
    _sampled_div_minus,
    cell_average,
    discrete_divergence,
    face_velocity,
    source_average,
)
from .mesh import Tessellation

logger = logging.getLogger(__name__)

DENSE_ORACLE_MAX_CELLS = 64
SAMPLES_PER_UNIT_TIME = 10_000


class SolverError(RuntimeError):
    """The linear solver failed to reach its tolerance within the iteration cap."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SchemeConfig:
    """Time step, horizon and solver settings for one run.

    ``kappa`` is the stability slack in the time step restriction; 1 is
    admissible only for divergence-free fields.
    """

    delta: float
    T: float
    q: float = 2.0
    kappa: float = 2.0
    tol: float = 1e-12
    max_iter: int = 20_000
    quad_order: int = 3
    time_order: int = 2
    solver: str = "gauss-seidel"

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not self.T >= self.delta * (1 - 1e-12):
            raise ConfigError("T must be at least delta")
        if not self.kappa >= 1:
            raise ConfigError("kappa must be >= 1")
        if not self.q > 1:
            raise ConfigError("q must exceed 1")
        if self.solver not in ("gauss-seidel", "dense"):
            raise ConfigError(f"unknown solver {self.solver!r}")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.T / self.delta + 1e-9))


@dataclass(eq=False)
class ImplicitSystem:
    """Sparse operator ``A = I + delta B`` in CSR form."""

    matrix: sps.csr_matrix
    delta: float

    def rhs(self, state: CellField, source: Optional[CellField]) -> np.ndarray:
        b = state.values.copy()
        if source is not None:
            b += self.delta * source.values
        return b

    def residual(self, x: np.ndarray, b: np.ndarray) -> float:
        return float(np.max(np.abs(self.matrix @ x - b))) if len(b) else 0.0


@dataclass(eq=False)
class Trajectory:
    """Snapshots ``rho^0 .. rho^N`` with per-step fluxes, sources and solver logs."""

    mesh: Tessellation
    config: SchemeConfig
    snapshots: list
    fluxes: list
    sources: list
    iterations: np.ndarray
    residuals: np.ndarray
    masses: np.ndarray
    div_minus: np.ndarray
    velocity_sup: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.snapshots) - 1

    @property
    def times(self) -> np.ndarray:
        return self.config.delta * np.arange(len(self.snapshots))

    def values(self) -> np.ndarray:
        """All snapshots stacked, shape ``(N + 1, n_cells)``."""
        return np.stack([s.values for s in self.snapshots])

    def at_time(self, t: float) -> CellField:
        """Piecewise-constant-in-time solution: ``rho^n`` on ``[t^n, t^{n+1})``."""
        n = int(math.floor(t / self.config.delta + 1e-9))
        return self.snapshots[min(max(n, 0), self.n_steps)]

    def interpolate(self, t: float) -> CellField:
        """Piecewise-linear-in-time solution."""
        d = self.config.delta
        n = min(int(math.floor(t / d + 1e-9)), self.n_steps - 1) if self.n_steps else 0
        if self.n_steps == 0:
            return self.snapshots[0]
        s = min(max((t - n * d) / d, 0.0), 1.0)
        return CellField(self.mesh, (1 - s) * self.snapshots[n].values
                         + s * self.snapshots[n + 1].values)

    def compressibility(self) -> float:
        """``Lambda_{delta,h} = exp(delta * sum_n ||(div u)^n_h)^-||_inf)``."""
        return float(math.exp(self.config.delta * self.div_minus.sum()))

    def mass_drift(self) -> np.ndarray:
        """Per-step relative mass drift after removing the source contribution."""
        d = self.config.delta
        src = np.array([s.mass() for s in self.sources])
        vol = self.mesh.volumes
        scale = np.array([vol @ (1.0 + np.abs(s.values)) for s in self.snapshots[:-1]])
        return np.abs(np.diff(self.masses) - d * src) / scale

    def write_snapshots_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "cell_id", "value"])
            for n, snap in enumerate(self.snapshots):
                t = repr(n * self.config.delta)
                for k, v in enumerate(snap.values):
                    w.writerow([n, t, k, repr(float(v))])

    def write_mass_audit_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mass", "residual", "iters"])
            w.writerow([0, repr(float(self.masses[0])), repr(0.0), 0])
            for n in range(self.n_steps):
                w.writerow([n + 1, repr(float(self.masses[n + 1])),
                            repr(float(self.residuals[n])), int(self.iterations[n])])


def max_timestep(u: VelocityField, q: float, kappa: float, T: float,
                 samples_per_unit_time: int = SAMPLES_PER_UNIT_TIME) -> float:
    """Largest ``delta = T / N`` such that every window of length delta satisfies
    ``(q-1)/q * int_I ||(div u)^-||_inf dt <= (kappa-1)/kappa``.

    Window integrals use upper Riemann sums on a uniform sampling grid.
    """
    if not kappa >= 1 or not q > 1:
        raise ConfigError("need kappa >= 1 and q > 1")
    if u.divergence_free:
        return T
    if u.divergence is None and u.div_minus_sup is None:
        raise FieldError(f"velocity field {u.name!r} has no analytic divergence")
    n_grid = max(int(math.ceil(T * samples_per_unit_time)), 1)
    ts = np.linspace(0.0, T, n_grid + 1)
    g = _sampled_div_minus(u, ts)
    upper = np.maximum(g[:-1], g[1:]) * np.diff(ts)
    if not np.any(upper > 0):
        return T
    bound = (kappa - 1.0) / kappa * q / (q - 1.0)
    if bound <= 0:
        raise ConfigError(
            "kappa = 1 requires a divergence-free field; "
            f"{u.name!r} has a negative divergence part"
        )
    cum = np.concatenate([[0.0], np.cumsum(upper)])
    dt = T / n_grid

    def worst_window(delta):
        w = min(max(int(math.ceil(delta / dt - 1e-9)), 1), n_grid)
        return float(np.max(cum[w:] - cum[:-w]))

    n = 1
    while worst_window(T / n) > bound * (1 + 1e-12):
        n += 1
        if n > 10 * n_grid:
            raise ConfigError("no admissible time step found")
    return T / n


def assemble_step(mesh: Tessellation, flux: FluxData, delta: float) -> ImplicitSystem:
    """Assemble ``A`` with ``a_KK = 1 + delta/|K| sum |K|L| u_KL^+`` and
    ``a_KL = -delta/|K| |K|L| u_KL^-``; sparsity is structurally symmetric."""
    inner = np.flatnonzero(mesh.interior)
    k = mesh.face_owner[inner]
    l = mesh.face_neighbor[inner]
    area = mesh.face_areas[inner]
    u = flux.values[inner]
    up, um = np.maximum(u, 0.0), np.maximum(-u, 0.0)
    vol = mesh.volumes
    diag = np.ones(mesh.n_cells)
    np.add.at(diag, k, delta * area * up / vol[k])
    np.add.at(diag, l, delta * area * um / vol[l])
    rows = np.concatenate([np.arange(mesh.n_cells), k, l])
    cols = np.concatenate([np.arange(mesh.n_cells), l, k])
    vals = np.concatenate([diag, -delta * area * um / vol[k], -delta * area * up / vol[l]])
    mat = sps.coo_matrix((vals, (rows, cols)), shape=(mesh.n_cells,) * 2).tocsr()
    mat.sort_indices()
    return ImplicitSystem(matrix=mat, delta=delta)


@numba.njit(cache=True, nogil=True)
def _sgs_solve(indptr, indices, data, b, x, tol, max_iter):
    n = len(b)
    diag = np.empty(n)
    for i in range(n):
        diag[i] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                diag[i] += data[p]
    res = np.inf
    it = 0
    while it < max_iter:
        res = 0.0
        for i in range(n):
            acc = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                acc -= data[p] * x[indices[p]]
            r = abs(acc)
            if r > res:
                res = r
        if res <= tol:
            break
        for i in range(n):
            acc = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j != i:
                    acc -= data[p] * x[j]
            x[i] = acc / diag[i]
        for i in range(n - 1, -1, -1):
            acc = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j != i:
                    acc -= data[p] * x[j]
            x[i] = acc / diag[i]
        it += 1
    return it, res


def gauss_seidel(system: ImplicitSystem, b: np.ndarray, x0: np.ndarray,
                 tol: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Symmetric Gauss-Seidel sweeps until ``||A x - b||_inf <= tol``."""
    m = system.matrix
    x = np.array(x0, dtype=float, copy=True)
    it, res = _sgs_solve(m.indptr, m.indices, m.data, np.asarray(b, float), x, tol, max_iter)
    return x, int(it), float(res)


def dense_solve(system: ImplicitSystem, b: np.ndarray) -> np.ndarray:
    n = system.matrix.shape[0]
    if n > DENSE_ORACLE_MAX_CELLS:
        raise ConfigError(f"dense oracle limited to {DENSE_ORACLE_MAX_CELLS} cells, got {n}")
    return np.linalg.solve(system.matrix.toarray(), b)


def implicit_step(state: CellField, system: ImplicitSystem, source: Optional[CellField],
                  delta: float, tol: float = 1e-12, max_iter: int = 20_000,
                  method: str = "gauss-seidel") -> CellField:
    """Advance one step.  ``meta`` of the result holds ``iters`` and ``residual``."""
    if abs(delta - system.delta) > 1e-14 * delta:
        raise ConfigError("system was assembled with a different time step")
    b = system.rhs(state, source)
    thresh = tol * (1.0 + float(np.max(np.abs(state.values), initial=0.0)))
    if method == "dense":
        x = dense_solve(system, b)
        it, res = 0, system.residual(x, b)
    else:
        x, it, res = gauss_seidel(system, b, state.values, thresh, max_iter)
    if not res <= thresh:
        raise SolverError(
            f"linear solve stopped after {it} iterations with residual {res:.3e} "
            f"(target {thresh:.3e})"
        )
    return CellField(state.mesh, x, meta={"iters": it, "residual": res})


def run(mesh: Tessellation, u: VelocityField, data: ScalarData, config: SchemeConfig,
        check_timestep: bool = True, initial: Optional[CellField] = None,
        source_transform: Optional[Callable[[CellField], CellField]] = None) -> Trajectory:
    """Run the implicit upwind scheme from ``t = 0`` to ``N delta <= T``.

    ``initial`` replaces the cell averages of ``data.initial``;
    ``source_transform`` is applied to every discrete source ``f^n_h`` (used
    for the positive/negative split runs of signed data).
    """
    if check_timestep:
        dmax = max_timestep(u, config.q, config.kappa, config.T)
        if config.delta > dmax * (1 + 1e-12):
            raise ConfigError(f"delta = {config.delta!r} exceeds delta_max = {dmax!r}")
    d = config.delta
    rho = cell_average(mesh, data.initial, config.quad_order) if initial is None else initial
    snaps, fluxes, sources = [rho], [], []
    iters, resid, div_minus = [], [], []
    masses = [rho.mass()]
    cached = None
    for n in range(config.n_steps):
        if u.time_dependent or cached is None:
            flux = face_velocity(mesh, u, n, d, config.quad_order, config.time_order)
            system = assemble_step(mesh, flux, d)
            dm = float(np.max(np.maximum(-discrete_divergence(mesh, flux).values, 0.0)))
            cached = (flux, system, dm)
        flux, system, dm = cached
        if data.source is not None and (data.source_time_dependent or n == 0):
            src = source_average(mesh, data, n, d, config.quad_order, config.time_order)
        elif data.source is None:
            src = CellField(mesh, np.zeros(mesh.n_cells))
        if source_transform is not None and (data.source_time_dependent or n == 0 or data.source is None):
            src = source_transform(src)
        rho = implicit_step(rho, system, src, d, config.tol, config.max_iter, config.solver)
        snaps.append(rho)
        fluxes.append(flux)
        sources.append(src)
        iters.append(rho.meta["iters"])
        resid.append(rho.meta["residual"])
        div_minus.append(dm)
        masses.append(rho.mass())
    traj = Trajectory(
        mesh=mesh, config=config, snapshots=snaps, fluxes=fluxes, sources=sources,
        iterations=np.array(iters, dtype=int), residuals=np.array(resid),
        masses=np.array(masses), div_minus=np.array(div_minus),
        velocity_sup=u.sup_norm,
    )
    drift = traj.mass_drift() if config.n_steps else np.zeros(0)
    if len(drift) and drift.max() > 10 * config.tol:
        warnings.warn(f"mass drift {drift.max():.2e} exceeds 10 * tol", RuntimeWarning)
    return traj
