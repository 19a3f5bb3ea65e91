"""Quantitative functionals of discrete trajectories and the q-mean.

Face sums ``sum_K sum_{L ~ K}`` run over ordered neighbour pairs, so every
interior face contributes twice.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .fields import CellField, ScalarData, VelocityField
from .mesh import Tessellation
from .quadrature import gauss_legendre
from .solver import SchemeConfig, Trajectory, run

TAYLOR_SWITCH = 1e-8
CERTIFICATE_SLACK = 1e-8


class DiagnosticsError(ValueError):
    pass


def lq_norm(field: CellField, q: float) -> float:
    """Discrete ``(sum |K| |rho_K|^q)^(1/q)``; ``q = inf`` gives ``max |rho_K|``."""
    v = np.abs(field.values)
    if math.isinf(q):
        return float(v.max(initial=0.0))
    if q < 1:
        raise DiagnosticsError(f"q must be >= 1, got {q}")
    return float((field.mesh.volumes @ v ** q) ** (1.0 / q))


def _check_mean_args(a, b, q):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DiagnosticsError("q-mean needs positive arguments")
    if np.any(~(q > 1)):
        raise DiagnosticsError("q-mean needs q > 1")
    return np.broadcast_arrays(a, b, q)


def q_mean(a, b, q):
    """``theta_q(a, b) = (q-1)/q (a^q - b^q) / (a^(q-1) - b^(q-1))``.

    Written as ``m (q-1)/q expm1(q L) / expm1((q-1) L)`` with ``m = min(a, b)``
    and ``L = log(max(a, b) / m)`` to avoid cancellation; for ``|a - b| < 1e-8 (a + b)`` the symmetric
    expansion ``m + (q-2) (a-b)^2 / (12 m)`` about the midpoint ``m`` is used.
    """
    a, b, q = _check_mean_args(a, b, q)
    scalar = a.ndim == 0
    a, b, q = np.atleast_1d(a), np.atleast_1d(b), np.atleast_1d(q)
    out = np.empty(a.shape)
    d = a - b
    near = np.abs(d) < TAYLOR_SWITCH * (a + b)
    m = 0.5 * (a + b)
    out[near] = m[near] + (q[near] - 2.0) * d[near] ** 2 / (12.0 * m[near])
    far = ~near
    if np.any(far):
        # expand about the smaller argument so that L > 0 and the result is symmetric
        lo = np.minimum(a, b)[far]
        L = np.log1p(np.abs(d[far]) / lo)
        qf = q[far]
        out[far] = lo * (qf - 1.0) / qf * np.expm1(qf * L) / np.expm1((qf - 1.0) * L)
    return float(out[0]) if scalar else out


def q_mean_integral(a, b, q, quad_points: int = 32, levels: int = 40):
    """``int_0^1 ((1-s) a^(q-1) + s b^(q-1))^(1/(q-1)) ds`` by composite Gauss quadrature.

    Panels are graded geometrically towards the endpoint with the smaller
    base value, where the integrand is least regular when ``a/b`` is extreme.
    """
    a, b, q = _check_mean_args(a, b, q)
    g, w = gauss_legendre(quad_points)
    edges = np.concatenate([[0.0], 2.0 ** -np.arange(levels, -1, -1)])
    lo, hi = edges[:-1], edges[1:]
    t = (lo[:, None] + (hi - lo)[:, None] * g).ravel()
    wt = ((hi - lo)[:, None] * w).ravel()
    # t is the distance from the endpoint holding min(a, b)
    small = np.minimum(a, b)[..., None]
    large = np.maximum(a, b)[..., None]
    p = q[..., None] - 1.0
    base = (1.0 - t) * small ** p + t * large ** p
    val = (base ** (1.0 / p) * wt).sum(axis=-1)
    val = np.where(a == b, a, val)
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------------------
# trajectory functionals


def _face_arrays(traj: Trajectory):
    mesh = traj.mesh
    inner = np.flatnonzero(mesh.interior)
    return inner, mesh.face_owner[inner], mesh.face_neighbor[inner], mesh.face_areas[inner]


def source_lq_l1(traj: Trajectory, q: float) -> float:
    """``||f_{delta,h}||_{L^1(L^q)} = delta sum_n ||f^n||_{L^q}``."""
    return traj.config.delta * math.fsum(lq_norm(s, q) for s in traj.sources)


def div_minus_l1(traj: Trajectory) -> float:
    """``||(div u)^-_{delta,h}||_{L^1(L^inf)}``."""
    return traj.config.delta * math.fsum(traj.div_minus)


@dataclass(frozen=True)
class EnergyReport:
    temporal: float
    spatial: float
    qbar: float
    bound: float
    compressibility: float

    @property
    def ratio(self) -> float:
        """Empirical constant ``(temporal + spatial) / bound``."""
        lhs = self.temporal + self.spatial
        return lhs / self.bound if self.bound > 0 else (0.0 if lhs == 0 else math.inf)


def _qbar_weight(mean, diff, qbar):
    # mean^(qbar-2) * diff^2 with the 0 * inf case resolved to 0
    out = np.zeros_like(diff)
    nz = diff != 0
    out[nz] = mean[nz] ** (qbar - 2.0) * diff[nz] ** 2
    return out


def energy_report(traj: Trajectory, qbar: float, kappa: Optional[float] = None) -> EnergyReport:
    q = traj.config.q
    if not (1.0 < qbar <= min(q, 2.0)):
        raise DiagnosticsError(f"qbar must lie in (1, min(q, 2)] = (1, {min(q, 2.0)}], got {qbar}")
    kappa = traj.config.kappa if kappa is None else kappa
    vals = traj.values()
    if np.any(vals < -1e-9 * (1 + np.abs(vals).max())):
        raise DiagnosticsError("energy estimate requires a nonnegative trajectory")
    vals = np.maximum(vals, 0.0)
    vol = traj.mesh.volumes
    inner, own, nb, area = _face_arrays(traj)
    temporal = 0.0
    spatial = 0.0
    for n in range(traj.n_steps):
        new, old = vals[n + 1], vals[n]
        temporal += float(vol @ _qbar_weight(0.5 * (new + old), new - old, qbar))
        uf = np.abs(traj.fluxes[n].values[inner])
        w = _qbar_weight(0.5 * (new[own] + new[nb]), new[own] - new[nb], qbar)
        spatial += 2.0 * traj.config.delta * float((area * uf) @ w)
    lam = traj.compressibility()
    data = lq_norm(traj.snapshots[0], qbar) + source_lq_l1(traj, qbar)
    bound = lam ** (kappa * (qbar - 1.0)) * (1.0 + div_minus_l1(traj)) * data ** qbar
    return EnergyReport(temporal, spatial, qbar, bound, lam)


@dataclass(frozen=True)
class WeakBVReport:
    temporal: float
    spatial: float
    temporal_scale: float
    spatial_scale: float

    @property
    def temporal_normalized(self) -> float:
        """``temporal * sqrt(delta / T)``."""
        return self.temporal / self.temporal_scale if self.temporal_scale else math.nan

    @property
    def spatial_normalized(self) -> float:
        """``spatial * sqrt(h / (T ||u||))``."""
        return self.spatial / self.spatial_scale if self.spatial_scale else math.nan


def weak_bv_report(traj: Trajectory) -> WeakBVReport:
    vals = traj.values()
    vol = traj.mesh.volumes
    inner, own, nb, area = _face_arrays(traj)
    d = traj.config.delta
    temporal = float(np.sum(np.abs(np.diff(vals, axis=0)) @ vol))
    spatial = 0.0
    for n in range(traj.n_steps):
        new = vals[n + 1]
        uf = np.abs(traj.fluxes[n].values[inner])
        spatial += 2.0 * d * float((area * uf) @ np.abs(new[own] - new[nb]))
    T = traj.n_steps * d
    h = traj.mesh.h
    return WeakBVReport(temporal, spatial, math.sqrt(T / d) if d > 0 else 0.0,
                        math.sqrt(T * traj.velocity_sup / h))


@dataclass(frozen=True)
class StabilityCertificate:
    holds: bool
    margin: float
    lhs: float
    rhs: float
    compressibility: float
    q: float
    kappa: float
    gronwall_excess: float


def gronwall_excess(traj: Trajectory, q: float) -> float:
    """Largest violation of the per-step bound
    ``||rho^{n+1}|| (1 - (q-1)/q lambda^n) <= ||rho^n|| + delta ||f^n||``
    with ``lambda^n = delta ||(div u)^n_h)^-||_inf`` (negative when it holds)."""
    d = traj.config.delta
    norms = [lq_norm(s, q) for s in traj.snapshots]
    worst = -math.inf
    for n in range(traj.n_steps):
        lam = d * traj.div_minus[n]
        lhs = norms[n + 1] * (1.0 - (q - 1.0) / q * lam)
        rhs = norms[n] + d * lq_norm(traj.sources[n], q)
        worst = max(worst, (lhs - rhs) / max(1.0, rhs))
    return worst if traj.n_steps else 0.0


def stability_certificate(traj: Trajectory, q: Optional[float] = None,
                          kappa: Optional[float] = None) -> StabilityCertificate:
    """Check ``||rho||_{L^inf(L^q)} <= Lambda^(kappa (1 - 1/q)) (||rho^0|| + ||f||_{L^1(L^q)})``.

    The trajectory must come from nonnegative data; signed data is handled by
    :func:`split_certificates`.
    """
    q = traj.config.q if q is None else q
    kappa = traj.config.kappa if kappa is None else kappa
    vals = traj.values()
    if np.any(vals < -1e-9 * (1 + np.abs(vals).max())):
        raise DiagnosticsError("stability certificate requires a nonnegative trajectory; "
                               "use split_certificates for signed data")
    lam = traj.compressibility()
    lhs = max(lq_norm(s, q) for s in traj.snapshots)
    rhs = lam ** (kappa * (1.0 - 1.0 / q)) * (lq_norm(traj.snapshots[0], q) + source_lq_l1(traj, q))
    margin = rhs - lhs
    holds = lhs <= rhs + CERTIFICATE_SLACK * max(1.0, rhs)
    return StabilityCertificate(bool(holds), margin, lhs, rhs, lam, q, kappa,
                                gronwall_excess(traj, q))


def split_runs(mesh: Tessellation, u: VelocityField, data: ScalarData,
               config: SchemeConfig) -> tuple[Trajectory, Trajectory]:
    """Solve separately from the positive and negative parts of the discrete data.

    Both parts are taken after discretisation: ``(rho^0_h)^+`` and
    ``(f^n_h)^+`` drive the first run, the negative parts the second.
    """
    from .fields import cell_average

    rho0 = cell_average(mesh, data.initial, config.quad_order)
    plus = run(mesh, u, data, config, initial=rho0.positive_part(),
               source_transform=CellField.positive_part)
    minus = run(mesh, u, data, config, initial=rho0.negative_part(),
                source_transform=CellField.negative_part)
    return plus, minus


def split_certificates(mesh: Tessellation, u: VelocityField, data: ScalarData,
                       config: SchemeConfig, q: Optional[float] = None,
                       kappa: Optional[float] = None) -> tuple[StabilityCertificate, StabilityCertificate]:
    plus, minus = split_runs(mesh, u, data, config)
    return stability_certificate(plus, q, kappa), stability_certificate(minus, q, kappa)


def report_row(run_id: str, *, energy: Optional[EnergyReport] = None,
               bv: Optional[WeakBVReport] = None,
               certificate: Optional[StabilityCertificate] = None) -> dict:
    """Flat dict for CSV serialisation, keyed by ``run_id``."""
    row: dict = {"run_id": run_id}
    if energy is not None:
        row.update({f"energy_{k}": v for k, v in asdict(energy).items()})
        row["energy_ratio"] = energy.ratio
    if bv is not None:
        row.update({f"bv_{k}": v for k, v in asdict(bv).items()})
        row["bv_temporal_normalized"] = bv.temporal_normalized
        row["bv_spatial_normalized"] = bv.spatial_normalized
    if certificate is not None:
        row.update({f"stability_{k}": v for k, v in asdict(certificate).items()})
    return row
