"""Analytic test fields and their finite-volume discretisation.

Velocity evaluators take ``(t, x)`` with ``x`` of shape ``(n, d)`` and
return ``(n, d)``; scalar evaluators return ``(n,)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .mesh import Tessellation
from .quadrature import batched_polygon_rule, gauss_legendre

logger = logging.getLogger(__name__)

DEFAULT_SPACE_ORDER = 3
DEFAULT_TIME_ORDER = 2


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class VelocityField:
    """Bounded velocity field, tangential on the domain boundary.

    ``div_minus_sup`` optionally returns ``||(div u)^-(t, .)||_inf`` exactly;
    without it the sup is estimated by sampling ``divergence`` on a grid over
    ``bounds``.
    """

    evaluate: Callable[[float, np.ndarray], np.ndarray]
    dim: int
    sup_norm: float
    divergence: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    div_minus_sup: Optional[Callable[[float], float]] = None
    divergence_free: bool = False
    time_dependent: bool = False
    regularity: str = "lipschitz"
    sobolev_p: float = math.inf
    bounds: Optional[np.ndarray] = None
    stream_function: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __call__(self, t, x):
        return self.evaluate(t, np.atleast_2d(x))

    def sup_div_minus(self, t: float, n_grid: int = 401) -> float:
        if self.divergence_free:
            return 0.0
        if self.div_minus_sup is not None:
            return float(self.div_minus_sup(t))
        if self.divergence is None:
            raise FieldError(f"velocity field {self.name!r} has no analytic divergence")
        if self.bounds is None:
            raise FieldError("cannot sample divergence without domain bounds")
        axes = [np.linspace(lo, hi, n_grid if self.dim == 1 else 101) for lo, hi in self.bounds]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        return float(np.max(np.maximum(-self.divergence(t, grid), 0.0)))


@dataclass(frozen=True)
class ScalarData:
    """Initial datum, balanced source, and the integrability exponent ``q``."""

    initial: Callable[[np.ndarray], np.ndarray]
    source: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    q: float = 2.0
    source_time_dependent: bool = False
    name: str = ""

    @property
    def p(self) -> float:
        return self.q / (self.q - 1.0)


@dataclass(eq=False)
class CellField:
    """One value per cell of ``mesh``."""

    mesh: Tessellation
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_cells,):
            raise FieldError(
                f"expected {self.mesh.n_cells} cell values, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FieldError("cell field contains non-finite values")

    def mass(self) -> float:
        return float(self.mesh.volumes @ self.values)

    def positive_part(self) -> "CellField":
        return CellField(self.mesh, np.maximum(self.values, 0.0))

    def negative_part(self) -> "CellField":
        return CellField(self.mesh, np.maximum(-self.values, 0.0))

    def __add__(self, other):
        return CellField(self.mesh, self.values + _vals(other))

    def __sub__(self, other):
        return CellField(self.mesh, self.values - _vals(other))

    def __mul__(self, c):
        return CellField(self.mesh, self.values * c)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, CellField) else x


@dataclass(eq=False)
class FluxData:
    """Averaged normal velocities ``u_KL`` stored in owner orientation."""

    mesh: Tessellation
    step: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_faces,):
            raise FieldError("flux must have one value per face")
        if np.any(self.values[~self.mesh.interior] != 0.0):
            raise FieldError("boundary faces must carry zero flux")

    def seen_from(self, face: int, cell: int) -> float:
        """Flux through ``face`` out of ``cell``; negated on the neighbour side."""
        if cell == self.mesh.face_owner[face]:
            return float(self.values[face])
        if cell == self.mesh.face_neighbor[face]:
            return -float(self.values[face])
        raise FieldError(f"cell {cell} is not adjacent to face {face}")


# ---------------------------------------------------------------------------
# discretisation maps


def cell_quadrature(mesh: Tessellation, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Points ``(nc, npts, d)`` and per-cell averaging weights ``(nc, npts)``."""
    if order < 1:
        raise FieldError("quadrature order must be >= 1")
    if mesh.dim == 1:
        g, w = gauss_legendre(order)
        left = mesh.vertices[mesh.cell_nodes[:, 0], 0]
        pts = left[:, None] + mesh.volumes[:, None] * g[None, :]
        return pts[..., None], np.broadcast_to(w, pts.shape).copy()
    return batched_polygon_rule(mesh.cell_polygons(), order)


def _finite(vals, what):
    if not np.all(np.isfinite(vals)):
        raise FieldError(f"{what} evaluator returned non-finite values")
    return vals


def cell_average(mesh: Tessellation, g: Callable[[np.ndarray], np.ndarray],
                 quad_order: int = DEFAULT_SPACE_ORDER) -> CellField:
    """Cell averages of a point function by fixed-order quadrature.

    Densities that know their exact cell averages (see :class:`Density`) use
    those instead.
    """
    exact = getattr(g, "exact_average", None)
    if exact is not None:
        vals = exact(mesh)
        if vals is not None:
            return CellField(mesh, _finite(np.asarray(vals, float), "point function"))
    pts, wts = cell_quadrature(mesh, quad_order)
    vals = _finite(np.asarray(g(pts.reshape(-1, mesh.dim)), dtype=float), "point function")
    return CellField(mesh, (vals.reshape(wts.shape) * wts).sum(axis=1))


def source_average(mesh: Tessellation, data: ScalarData, n: int, delta: float,
                   quad_order: int = DEFAULT_SPACE_ORDER,
                   time_order: int = DEFAULT_TIME_ORDER,
                   mean_correct: bool = True) -> CellField:
    """Space-time average of the source over ``[n delta, (n+1) delta) x K``.

    The raw imbalance ``sum |K| f_K`` is stored in ``meta['imbalance']``; with
    ``mean_correct`` the volume-weighted mean is removed afterwards.
    """
    if not delta > 0:
        raise FieldError("time step must be positive")
    if data.source is None:
        return CellField(mesh, np.zeros(mesh.n_cells), meta={"imbalance": 0.0})
    exact = None
    if not data.source_time_dependent and hasattr(data.source, "exact_average"):
        exact = data.source.exact_average(mesh)
    if exact is not None:
        vals = _finite(np.asarray(exact, float), "source")
    else:
        pts, wts = cell_quadrature(mesh, quad_order)
        flat = pts.reshape(-1, mesh.dim)
        if data.source_time_dependent:
            tg, tw = gauss_legendre(time_order)
            acc = np.zeros(flat.shape[0])
            for tau, wt in zip(tg, tw):
                acc += wt * _finite(np.asarray(data.source((n + tau) * delta, flat), float),
                                    "source")
        else:
            acc = _finite(np.asarray(data.source(n * delta, flat), float), "source")
        vals = (acc.reshape(wts.shape) * wts).sum(axis=1)
    vol = mesh.volumes
    imbalance = float(vol @ vals)
    scale = float(vol @ np.abs(vals))
    if scale > 0 and abs(imbalance) > 1e-8 * scale:
        logger.warning("source step %d is unbalanced: sum |K| f_K = %.3e", n, imbalance)
    if mean_correct:
        vals = vals - imbalance / vol.sum()
    return CellField(mesh, vals, meta={"imbalance": imbalance})


def face_velocity(mesh: Tessellation, u: VelocityField, n: int, delta: float,
                  quad_order: int = DEFAULT_SPACE_ORDER,
                  time_order: int = DEFAULT_TIME_ORDER,
                  use_stream_function: bool = True) -> FluxData:
    """Space-time averaged normal velocity on every face; zero on the boundary.

    For steady planar fields that carry a stream function the face average is
    evaluated exactly as a difference of stream-function values, which makes
    the discrete divergence vanish to rounding.
    """
    if not delta > 0:
        raise FieldError("time step must be positive")
    inner = np.flatnonzero(mesh.interior)
    if (use_stream_function and mesh.dim == 2 and u.stream_function is not None
            and not u.time_dependent):
        a = mesh.face_vertices[inner, 0, :]
        b = mesh.face_vertices[inner, 1, :]
        vals = np.zeros(mesh.n_faces)
        vals[inner] = (u.stream_function(a) - u.stream_function(b)) / mesh.face_areas[inner]
        return FluxData(mesh, n, _finite(vals, "velocity"))
    normals = mesh.face_normals[inner]
    if mesh.dim == 1:
        pts = mesh.face_vertices[inner, 0, :][:, None, :]
        sw = np.ones((len(inner), 1))
    else:
        g, w = gauss_legendre(quad_order)
        a = mesh.face_vertices[inner, 0, :]
        b = mesh.face_vertices[inner, 1, :]
        pts = a[:, None, :] + g[None, :, None] * (b - a)[:, None, :]
        sw = np.broadcast_to(w, pts.shape[:2])
    flat = pts.reshape(-1, mesh.dim)
    if u.time_dependent:
        tg, tw = gauss_legendre(time_order)
        times = [((n + tau) * delta, wt) for tau, wt in zip(tg, tw)]
    else:
        times = [(n * delta, 1.0)]
    acc = np.zeros(flat.shape[0])
    for t, wt in times:
        vel = _finite(np.asarray(u.evaluate(t, flat), float), "velocity")
        acc += wt * np.einsum("ij,ij->i", vel, np.repeat(normals, pts.shape[1], axis=0))
    vals = np.zeros(mesh.n_faces)
    vals[inner] = (acc.reshape(sw.shape) * sw).sum(axis=1)
    return FluxData(mesh, n, vals)


def discrete_divergence(mesh: Tessellation, flux: FluxData) -> CellField:
    """``sum_L |K|L| u_KL / |K|`` per cell."""
    weighted = mesh.face_areas * flux.values
    acc = np.zeros(mesh.n_cells)
    np.add.at(acc, mesh.face_owner, weighted)
    inner = mesh.interior
    np.add.at(acc, mesh.face_neighbor[inner], -weighted[inner])
    return CellField(mesh, acc / mesh.volumes)


def div_minus_budget(u: VelocityField, interval: tuple[float, float], samples: int) -> float:
    """Upper Riemann estimate of ``int_I ||(div u)^-||_inf dt``."""
    if samples < 2:
        raise FieldError("need at least two samples")
    if u.divergence_free:
        return 0.0
    if u.divergence is None and u.div_minus_sup is None:
        raise FieldError(f"velocity field {u.name!r} has no analytic divergence")
    t0, t1 = interval
    ts = np.linspace(t0, t1, samples)
    g = _sampled_div_minus(u, ts)
    upper = np.maximum(g[:-1], g[1:])
    return float(np.sum(upper * np.diff(ts)))


def _sampled_div_minus(u: VelocityField, ts: np.ndarray) -> np.ndarray:
    if not u.time_dependent:
        return np.full(len(ts), u.sup_div_minus(float(ts[0])))
    return np.array([u.sup_div_minus(float(t)) for t in ts])


def continuous_lq_norm(mesh: Tessellation, g: Callable[[np.ndarray], np.ndarray],
                       q: float, quad_order: int = 8) -> float:
    """``||g||_{L^q}`` over the meshed domain by high-order cell quadrature."""
    pts, wts = cell_quadrature(mesh, quad_order)
    vals = np.abs(np.asarray(g(pts.reshape(-1, mesh.dim)), float)).reshape(wts.shape)
    if math.isinf(q):
        return float(vals.max())
    return float((mesh.volumes @ (wts * vals ** q).sum(axis=1)) ** (1.0 / q))


# ---------------------------------------------------------------------------
# built-in analytic fields


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep_integral(s):
    # int_0^s of the quintic smoothstep, valid for s in [0, 1]
    return s ** 4 * (2.5 - 3.0 * s + s * s)


def rigid_rotation(angular_speed: float = 1.0) -> VelocityField:
    """``u = w (-y, x)``; not tangential on rectangles, used for unit tests."""

    def ev(t, x):
        return angular_speed * np.column_stack([-x[:, 1], x[:, 0]])

    return VelocityField(
        evaluate=ev, dim=2, sup_norm=math.inf,
        divergence=lambda t, x: np.zeros(len(x)), divergence_free=True,
        stream_function=lambda x: 0.5 * angular_speed * (x[:, 0] ** 2 + x[:, 1] ** 2),
        name="rigid_rotation",
    )


def rotation2d(inner: float = 0.35, outer: float = 0.5) -> VelocityField:
    """Rigid rotation about the origin, radially cut off between ``inner`` and ``outer``.

    ``u = chi(r) (-y, x)`` with a quintic smoothstep cutoff.  The field is
    divergence-free and vanishes for ``r >= outer``, hence tangential on
    ``[-1/2, 1/2]^2``.  Points with ``r`` fixed rotate at angular speed
    ``chi(r)``.
    """
    if not 0 < inner < outer:
        raise FieldError("need 0 < inner < outer")
    width = outer - inner

    def chi(r):
        return 1.0 - _smoothstep((r - inner) / width)

    def ev(t, x):
        r = np.hypot(x[:, 0], x[:, 1])
        c = chi(r)
        return np.column_stack([-c * x[:, 1], c * x[:, 0]])

    def psi(x):
        r = np.hypot(x[:, 0], x[:, 1])
        rc = np.minimum(r, inner)
        out = 0.5 * rc ** 2
        # int_inner^r s (1 - S((s - inner)/width)) ds, by parts in s
        s = np.clip((r - inner) / width, 0.0, 1.0)
        ring = 0.5 * (np.minimum(r, outer) ** 2 - inner ** 2)
        corr = width * (inner * _smoothstep_integral(s) + width * _s_moment(s))
        return out + np.where(r > inner, ring - corr, 0.0)

    rr = np.linspace(0.0, outer, 200001)
    sup = float(np.max(rr * chi(rr)))
    return VelocityField(
        evaluate=ev, dim=2, sup_norm=sup,
        divergence=lambda t, x: np.zeros(len(x)), divergence_free=True,
        bounds=np.array([[-0.5, 0.5], [-0.5, 0.5]]),
        stream_function=psi, name=f"rotation2d:inner={inner},outer={outer}",
    )


def _s_moment(s):
    # int_0^s sigma * S(sigma) d sigma for the quintic smoothstep
    return s ** 5 * (2.0 - 2.5 * s + (6.0 / 7.0) * s * s)


def rotation_angle_speed(x: np.ndarray, inner: float = 0.35, outer: float = 0.5) -> np.ndarray:
    r = np.hypot(x[:, 0], x[:, 1])
    return 1.0 - _smoothstep((r - inner) / (outer - inner))


def sobolev1d(alpha: float = 0.6, p: float = 2.0) -> VelocityField:
    """``u(x) = sign(x) |x|^alpha (1 - x^2)`` on (-1, 1): W^{1,p} but not Lipschitz."""
    if not (1.0 / p < alpha < 1.0):
        raise FieldError(f"alpha must lie in (1/p, 1) = ({1.0 / p}, 1)")

    def ev(t, x):
        s = x[:, 0]
        return (np.sign(s) * np.abs(s) ** alpha * (1.0 - s * s))[:, None]

    def div(t, x):
        a = np.abs(x[:, 0])
        with np.errstate(divide="ignore"):
            return alpha * a ** (alpha - 1.0) * (1.0 - a * a) - 2.0 * a ** (alpha + 1.0)

    xs = np.linspace(0.0, 1.0, 100001)
    sup = float(np.max(xs ** alpha * (1.0 - xs * xs)))
    dm = float(np.max(np.maximum(-div(0.0, xs[1:, None]), 0.0)))
    return VelocityField(
        evaluate=ev, dim=1, sup_norm=sup, divergence=div,
        div_minus_sup=lambda t: dm, regularity="sobolev_only", sobolev_p=p,
        bounds=np.array([[-1.0, 1.0]]), name=f"sobolev1d:alpha={alpha}",
    )


def logistic1d(rate: float = 1.0) -> VelocityField:
    """``u(x) = rate x (1 - x)`` on (0, 1); compressive near x = 1."""

    def ev(t, x):
        s = x[:, 0]
        return (rate * s * (1.0 - s))[:, None]

    def div(t, x):
        return rate * (1.0 - 2.0 * x[:, 0])

    return VelocityField(
        evaluate=ev, dim=1, sup_norm=rate / 4.0, divergence=div,
        div_minus_sup=lambda t: abs(rate), bounds=np.array([[0.0, 1.0]]),
        name=f"logistic1d:rate={rate}",
    )


def plateau1d(speed: float = 1.0, a: float = 0.0, b: float = 1.0, ramp: float = 0.1) -> VelocityField:
    """Constant ``speed`` on ``[a + ramp, b - ramp]``, smoothly ramped to zero at a, b."""
    if not (ramp > 0 and a + 2 * ramp <= b):
        raise FieldError("ramp too wide for the interval")

    def shape(s):
        return _smoothstep((s - a) / ramp) * _smoothstep((b - s) / ramp)

    def dshape(s):
        def ds(z):
            z = np.clip(z, 0.0, 1.0)
            return 30.0 * z * z * (1.0 - z) ** 2
        return (ds((s - a) / ramp) * _smoothstep((b - s) / ramp)
                - _smoothstep((s - a) / ramp) * ds((b - s) / ramp)) / ramp

    xs = np.linspace(a, b, 100001)
    dm = float(np.max(np.maximum(-speed * dshape(xs), 0.0)))
    return VelocityField(
        evaluate=lambda t, x: (speed * shape(x[:, 0]))[:, None], dim=1,
        sup_norm=abs(speed), divergence=lambda t, x: speed * dshape(x[:, 0]),
        div_minus_sup=lambda t: dm, bounds=np.array([[a, b]]),
        name=f"plateau1d:speed={speed},a={a},b={b},ramp={ramp}",
    )


def zero_velocity(dim: int = 1) -> VelocityField:
    return VelocityField(
        evaluate=lambda t, x: np.zeros_like(x, dtype=float), dim=dim, sup_norm=0.0,
        divergence=lambda t, x: np.zeros(len(x)), divergence_free=True, name="zero",
    )


def _parse_id(spec: str) -> tuple[str, dict]:
    name, _, rest = spec.partition(":")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise FieldError(f"malformed field option {item!r} in {spec!r}")
        kwargs[key.strip()] = float(val)
    return name.strip(), kwargs


_VELOCITIES = {
    "rotation2d": rotation2d,
    "rigid_rotation": rigid_rotation,
    "sobolev1d": sobolev1d,
    "logistic1d": logistic1d,
    "compressive1d": logistic1d,
    "plateau1d": plateau1d,
    "zero1d": lambda: zero_velocity(1),
    "zero2d": lambda: zero_velocity(2),
}


def velocity_field(spec: str) -> VelocityField:
    """Build a velocity field from an id such as ``sobolev1d:alpha=0.6``."""
    name, kwargs = _parse_id(spec)
    try:
        return _VELOCITIES[name](**kwargs)
    except KeyError:
        raise FieldError(f"unknown velocity field {name!r}") from None
    except TypeError as exc:
        raise FieldError(f"bad options for {name!r}: {exc}") from None


class Density:
    """Point function with optional exact cell averages.

    ``exact`` maps a mesh to its exact cell averages (or ``None`` when the
    mesh type is not supported); :func:`cell_average` prefers it over
    quadrature so that discrete and exact masses agree.
    """

    def __init__(self, fn, exact=None, name: str = ""):
        self.fn = fn
        self.exact = exact
        self.name = name

    def __call__(self, x):
        return self.fn(x)

    def exact_average(self, mesh: Tessellation) -> Optional[np.ndarray]:
        return None if self.exact is None else self.exact(mesh)


def _interval_ends(mesh: Tessellation):
    return (mesh.vertices[mesh.cell_nodes[:, 0], 0], mesh.vertices[mesh.cell_nodes[:, 1], 0])


def _only_1d(fn):
    def exact(mesh):
        if mesh.dim != 1:
            return None
        lo, hi = _interval_ends(mesh)
        return fn(lo, hi) / (hi - lo)
    return exact


def _sign_sine_primitive(x, eps):
    # int_0^x sign(sin(2 pi s / eps)) ds, a triangle wave of period eps
    tau = np.mod(x, eps)
    return np.where(tau <= eps / 2, tau, eps - tau)


def _disk_polygon_area(polys: np.ndarray, centre, radius: float) -> np.ndarray:
    """Exact area of ``polygon ∩ disk`` for ccw convex polygons ``(n, nv, 2)``."""
    p = polys - np.asarray(centre, float)
    q = np.roll(p, -1, axis=1)
    d = q - p
    A = (d ** 2).sum(-1)
    B = 2 * (p * d).sum(-1)
    C = (p ** 2).sum(-1) - radius ** 2
    disc = B * B - 4 * A * C
    sq = np.sqrt(np.maximum(disc, 0.0))
    safe = np.where(A > 0, A, 1.0)
    t1 = np.clip((-B - sq) / (2 * safe), 0.0, 1.0)
    t2 = np.clip((-B + sq) / (2 * safe), 0.0, 1.0)
    miss = disc <= 0
    t1 = np.where(miss, 1.0, t1)
    t2 = np.where(miss, 1.0, t2)

    def at(t):
        return p + t[..., None] * d

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    def sector(u, v):
        return 0.5 * radius ** 2 * np.arctan2(cross(u, v), (u * v).sum(-1))

    a, b = at(t1), at(t2)
    area = sector(p, a) + 0.5 * cross(a, b) + sector(b, q)
    # round-off can leave cells far from the disk at -1e-19
    return np.maximum(area.sum(axis=1), 0.0)


def _blob2d(cx=0.2, cy=0.0, radius=0.12, height=1.0):
    def g(x):
        r2 = ((x[:, 0] - cx) ** 2 + (x[:, 1] - cy) ** 2) / radius ** 2
        return height * np.maximum(1.0 - r2, 0.0) ** 4
    return Density(g, name="blob2d")


def _disk2d(cx=0.2, cy=0.0, radius=0.1, height=1.0):
    def g(x):
        r2 = (x[:, 0] - cx) ** 2 + (x[:, 1] - cy) ** 2
        return np.where(r2 <= radius ** 2, height, 0.0)

    def exact(mesh):
        if mesh.dim != 2:
            return None
        return height * _disk_polygon_area(mesh.cell_polygons(), (cx, cy), radius) / mesh.volumes
    return Density(g, exact, "disk2d")


def _indicator1d(a=0.0, b=0.5, height=1.0):
    def g(x):
        s = x[:, 0]
        return np.where((s >= a) & (s < b), height, 0.0)

    def integral(lo, hi):
        return height * np.maximum(np.minimum(hi, b) - np.maximum(lo, a), 0.0)
    return Density(g, _only_1d(integral), "indicator1d")


def _oscillating1d(eps=0.125, a=-math.inf, b=math.inf):
    def g(x):
        s = x[:, 0]
        return np.where((s >= a) & (s < b), np.sign(np.sin(2.0 * np.pi * s / eps)), 0.0)

    def integral(lo, hi):
        l, r = np.maximum(lo, a), np.minimum(hi, b)
        val = _sign_sine_primitive(r, eps) - _sign_sine_primitive(l, eps)
        return np.where(r > l, val, 0.0)
    return Density(g, _only_1d(integral), "oscillating1d")


def _oscwindow1d(eps=0.125, a=0.25, b=0.75, amp=1.0):
    # nonnegative window whose fine structure is an eps-periodic sign pattern
    def g(x):
        s = x[:, 0]
        osc = np.sign(np.sin(2.0 * np.pi * (s - a) / eps))
        return np.where((s >= a) & (s < b), 1.0 + amp * osc, 0.0)

    def integral(lo, hi):
        l, r = np.maximum(lo, a), np.minimum(hi, b)
        val = (r - l) + amp * (_sign_sine_primitive(r - a, eps) - _sign_sine_primitive(l - a, eps))
        return np.where(r > l, val, 0.0)
    return Density(g, _only_1d(integral), "oscwindow1d")


def _cosine1d(mean=2.0, amp=1.0, k=2.0):
    def integral(lo, hi):
        if k == 0:
            return (mean + amp) * (hi - lo)
        w = k * np.pi
        return mean * (hi - lo) + amp * (np.sin(w * hi) - np.sin(w * lo)) / w
    return Density(lambda x: mean + amp * np.cos(k * np.pi * x[:, 0]), _only_1d(integral),
                   "cosine1d")


def _constant(c=1.0):
    return Density(lambda x: np.full(len(x), c), lambda mesh: np.full(mesh.n_cells, c),
                   "constant")


_DENSITIES = {
    "zero": lambda: _constant(0.0),
    "constant": _constant,
    "blob2d": _blob2d,
    "disk2d": _disk2d,
    "indicator1d": _indicator1d,
    "oscillating1d": _oscillating1d,
    "oscwindow1d": _oscwindow1d,
    "cosine1d": _cosine1d,
    "smooth1d": lambda mean=1.0, amp=0.5: _cosine1d(mean, amp, 1.0),
}


def density(spec: str) -> Callable[[np.ndarray], np.ndarray]:
    """Point function from an id such as ``oscillating1d:eps=0.01``."""
    name, kwargs = _parse_id(spec)
    try:
        return _DENSITIES[name](**kwargs)
    except KeyError:
        raise FieldError(f"unknown density {name!r}") from None
    except TypeError as exc:
        raise FieldError(f"bad options for {name!r}: {exc}") from None


class SteadySource:
    """Time-independent source ``f(t, x) = g(x)``; keeps ``g``'s exact averages."""

    def __init__(self, g):
        self.g = g

    def __call__(self, t, x):
        return self.g(x)

    def exact_average(self, mesh: Tessellation) -> Optional[np.ndarray]:
        exact = getattr(self.g, "exact_average", None)
        return None if exact is None else exact(mesh)


def scalar_data(initial: str, source: Optional[str] = None, q: float = 2.0) -> ScalarData:
    """Initial datum and time-independent source from string ids."""
    src = None
    if source and source != "zero":
        src = SteadySource(density(source))
    return ScalarData(initial=density(initial), source=src, q=q, name=initial)


def warn_missing_divergence(u: VelocityField) -> None:
    warnings.warn(f"velocity field {u.name!r} declares zero divergence; using delta_max = T",
                  stacklevel=3)
