"""Embedded-surface geometry and the tube-coordinate metric.

A chart is a doubly periodic map sigma(x1, x2) into 3-space supplying two
closed-form derivative levels.  The unit normal and its first derivatives
are then computed exactly from cross products of the tangent vectors, so
curvature quantities inherit the accuracy of the chart derivatives.

Conventions: the Weingarten matrix ``L_mat`` is expressed in the coordinate
basis, ``L_mat = -G^{-1} [<sigma_i, dnu/dx_j>]``; its eigenvalues are the
principal curvatures.  The curvature potential ``K = s - h**2`` is
orientation independent, the mean curvature is not.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateChartError,
    OutOfTubeError,
    SymmetryViolationError,
)

__all__ = [
    "SurfaceChart",
    "FlatChart",
    "Torus",
    "PerturbedTorus",
    "CallableChart",
    "CurvatureData",
    "TubeSlice",
    "TubeMetric",
    "OrderFit",
    "first_fundamental_form",
    "shape_operator",
    "curvature_potential",
    "tube_metric",
    "density_factors",
    "k_factor_derivatives",
    "expansion_order_fit",
    "smoothstep",
    "make_chart",
]


def _cross(a, b):
    return np.cross(a, b, axis=-1)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def smoothstep(t):
    """Quintic smoothstep: 0 for t <= 0, 1 for t >= 1, C^2 in between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


class SurfaceChart:
    """Doubly periodic parametrization of a compact surface in 3-space.

    Subclasses provide ``point``, ``d1`` (first derivatives, shape
    ``(..., 2, 3)``) and ``d2`` (second derivatives, shape ``(..., 2, 2, 3)``).
    ``orientation`` fixes the sign of the normal relative to the raw cross
    product d1[0] x d1[1]; built-in surfaces use the outward normal.
    """

    periods = (2.0 * np.pi, 2.0 * np.pi)
    orientation = 1.0
    closed = True  # embedding itself periodic (False for the flat test chart)

    def point(self, x1, x2):
        raise NotImplementedError

    def d1(self, x1, x2):
        raise NotImplementedError

    def d2(self, x1, x2):
        raise NotImplementedError

    def normal(self, x1, x2):
        d = self.d1(x1, x2)
        n = _cross(d[..., 0, :], d[..., 1, :])
        return self.orientation * n / np.linalg.norm(n, axis=-1, keepdims=True)

    def normal_d1(self, x1, x2):
        """Exact derivatives of the unit normal, shape ``(..., 2, 3)``."""
        d = self.d1(x1, x2)
        dd = self.d2(x1, x2)
        s1, s2 = d[..., 0, :], d[..., 1, :]
        n = _cross(s1, s2)
        nn = np.linalg.norm(n, axis=-1, keepdims=True)
        out = []
        for j in range(2):
            dn = _cross(dd[..., 0, j, :], s2) + _cross(s1, dd[..., 1, j, :])
            proj = _dot(n, dn)[..., None] / nn**2
            out.append(self.orientation * (dn / nn - n * proj / nn))
        return np.stack(out, axis=-2)

    # -- validation -------------------------------------------------------

    def validation_grid(self, n=48):
        p1, p2 = self.periods
        x1 = np.linspace(0.0, p1, n, endpoint=False)
        x2 = np.linspace(0.0, p2, n, endpoint=False)
        return np.meshgrid(x1, x2, indexing="ij")

    def validate(self, n=48, tol=1e-12):
        """Check chart invariants on an n-by-n lattice; raise on failure."""
        X1, X2 = self.validation_grid(n)
        d = self.d1(X1, X2)
        nu = self.normal(X1, X2)
        if np.max(np.abs(np.linalg.norm(nu, axis=-1) - 1.0)) > tol:
            raise DegenerateChartError("unit normal is not normalized")
        for i in range(2):
            ortho = np.abs(_dot(d[..., i, :], nu))
            scale = np.linalg.norm(d[..., i, :], axis=-1)
            if np.max(ortho / np.maximum(scale, 1e-300)) > 1e-10:
                raise DegenerateChartError(
                    "tangent vectors are not orthogonal to the normal"
                )
        G = first_fundamental_form(self, (X1, X2))
        ev = np.linalg.eigvalsh(G)
        if np.min(ev) <= 0.0:
            raise DegenerateChartError("first fundamental form is not SPD")
        # periodicity of sigma (closed surfaces), derivatives and normal
        p1, p2 = self.periods
        for dx1, dx2 in ((p1, 0.0), (0.0, p2)):
            fns = (self.d1, self.normal) + ((self.point,) if self.closed else ())
            for f in fns:
                if np.max(np.abs(f(X1 + dx1, X2 + dx2) - f(X1, X2))) > 1e-9:
                    raise DegenerateChartError("chart is not periodic")
        return True

    def tube(self, n=48):
        """Tube-metric helper for this chart (cached)."""
        cached = getattr(self, "_tube", None)
        if cached is None or cached._nvalidate != n:
            cached = TubeMetric(self, n=n)
            self._tube = cached
        return cached


class FlatChart(SurfaceChart):
    """sigma(x) = (x1, x2, 0): flat 2-torus test chart; normal (0, 0, 1).

    The embedding map itself is not periodic, but every geometric quantity
    the operators consume (derivatives, normal, metric) is.
    """

    closed = False

    def __init__(self, periods=(2.0 * np.pi, 2.0 * np.pi)):
        self.periods = tuple(float(p) for p in periods)

    def point(self, x1, x2):
        x1, x2 = np.broadcast_arrays(x1, x2)
        return np.stack([x1, x2, np.zeros_like(x1)], axis=-1).astype(float)

    def d1(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        out = np.zeros(x1.shape + (2, 3))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out

    def d2(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        return np.zeros(x1.shape + (2, 2, 3))


class _SurfaceOfRevolution(SurfaceChart):
    """Torus-like surface with polar profile rho(theta) about a ring of
    radius R: sigma = ((R + rho cos t) cos p, (R + rho cos t) sin p, rho sin t)
    with x1 = theta, x2 = phi.  Outward normal."""

    orientation = -1.0  # raw sigma_1 x sigma_2 points inward

    def __init__(self, R):
        self.R = float(R)

    def _profile(self, t):
        raise NotImplementedError

    def _planar(self, t):
        rho, drho, ddrho = self._profile(t)
        ct, st = np.cos(t), np.sin(t)
        a = self.R + rho * ct
        z = rho * st
        da = drho * ct - rho * st
        dz = drho * st + rho * ct
        dda = ddrho * ct - 2.0 * drho * st - rho * ct
        ddz = ddrho * st + 2.0 * drho * ct - rho * st
        return a, z, da, dz, dda, ddz

    def point(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        a, z, *_ = self._planar(x1)
        return np.stack([a * np.cos(x2), a * np.sin(x2), z], axis=-1)

    def d1(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        a, z, da, dz, *_ = self._planar(x1)
        cp, sp = np.cos(x2), np.sin(x2)
        st = np.stack
        s_t = st([da * cp, da * sp, dz], axis=-1)
        s_p = st([-a * sp, a * cp, np.zeros_like(a)], axis=-1)
        return st([s_t, s_p], axis=-2)

    def d2(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        a, z, da, dz, dda, ddz = self._planar(x1)
        cp, sp = np.cos(x2), np.sin(x2)
        zero = np.zeros_like(a)
        s_tt = np.stack([dda * cp, dda * sp, ddz], axis=-1)
        s_tp = np.stack([-da * sp, da * cp, zero], axis=-1)
        s_pp = np.stack([-a * cp, -a * sp, zero], axis=-1)
        row1 = np.stack([s_tt, s_tp], axis=-2)
        row2 = np.stack([s_tp, s_pp], axis=-2)
        return np.stack([row1, row2], axis=-3)


class Torus(_SurfaceOfRevolution):
    """Round torus with ring radius R and tube radius r (R > r > 0)."""

    def __init__(self, R=2.0, r=1.0):
        if not R > r > 0:
            raise ValueError("torus requires R > r > 0")
        super().__init__(R)
        self.r = float(r)

    def _profile(self, t):
        t = np.asarray(t, float)
        one = np.ones_like(t)
        return self.r * one, 0.0 * one, 0.0 * one


class PerturbedTorus(_SurfaceOfRevolution):
    """Torus with radial bump rho(theta) = r (1 + eps cos 2 theta)."""

    def __init__(self, R=2.0, r=1.0, eps=0.1):
        if not R > r > 0:
            raise ValueError("requires R > r > 0")
        if not 0.0 <= eps <= 0.2:
            raise ValueError("eps must lie in [0, 0.2]")
        super().__init__(R)
        self.r = float(r)
        self.eps = float(eps)

    def _profile(self, t):
        t = np.asarray(t, float)
        c2, s2 = np.cos(2.0 * t), np.sin(2.0 * t)
        rho = self.r * (1.0 + self.eps * c2)
        drho = -2.0 * self.r * self.eps * s2
        ddrho = -4.0 * self.r * self.eps * c2
        return rho, drho, ddrho


class CallableChart(SurfaceChart):
    """User chart from a plain sigma(x1, x2) -> (3,) callable.

    Derivatives fall back to 4th-order centered differences with step
    period/1e4; user must declare the orientation of the induced normal.
    """

    def __init__(self, sigma, periods, orientation=1.0):
        self._sigma = sigma
        self.periods = tuple(float(p) for p in periods)
        self.orientation = float(orientation)
        self._h = min(self.periods) * 1e-4

    def point(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, float), x2)
        pts = self._sigma(x1, x2)
        return np.asarray(pts, float)

    def _fd(self, f, x1, x2, axis):
        h = self._h
        e1 = h if axis == 0 else 0.0
        e2 = h if axis == 1 else 0.0
        return (
            -f(x1 + 2 * e1, x2 + 2 * e2)
            + 8.0 * f(x1 + e1, x2 + e2)
            - 8.0 * f(x1 - e1, x2 - e2)
            + f(x1 - 2 * e1, x2 - 2 * e2)
        ) / (12.0 * h)

    def d1(self, x1, x2):
        return np.stack(
            [self._fd(self.point, x1, x2, j) for j in range(2)], axis=-2
        )

    def d2(self, x1, x2):
        cols = []
        for i in range(2):
            fi = lambda a, b, i=i: self._fd(self.point, a, b, i)
            cols.append(np.stack([self._fd(fi, x1, x2, j) for j in range(2)], axis=-2))
        return np.stack(cols, axis=-3)


# ---------------------------------------------------------------------------
# curvature


@dataclass
class CurvatureData:
    """Pointwise curvature record; arrays broadcast over grid points."""

    G: np.ndarray       # first fundamental form, (..., 2, 2)
    L_mat: np.ndarray   # Weingarten matrix in the coordinate basis
    kappa1: np.ndarray  # principal curvatures, kappa1 <= kappa2
    kappa2: np.ndarray
    s: np.ndarray       # Gaussian curvature, det L
    h: np.ndarray       # mean curvature, tr L / 2
    K: np.ndarray       # curvature potential, s - h**2 <= 0


def _as_points(x):
    x = np.asarray(x, float)
    if x.shape[-1] != 2:
        raise ValueError("x must have a trailing dimension of size 2")
    return x[..., 0], x[..., 1]


def first_fundamental_form(chart, x):
    """Matrix [<sigma_i, sigma_j>] at x; raises on degenerate charts."""
    if isinstance(x, tuple):
        x1, x2 = x
    else:
        x1, x2 = _as_points(x)
    d = chart.d1(x1, x2)
    G = np.einsum("...ik,...jk->...ij", d, d)
    ev = np.linalg.eigvalsh(G)
    tr = G[..., 0, 0] + G[..., 1, 1]
    if np.any(ev[..., 0] < 1e-12 * tr):
        raise DegenerateChartError("singular parametrization")
    return G

def shape_operator(chart, x):
    """Weingarten matrix, principal curvatures and curvature scalars at x."""
    if isinstance(x, tuple):
        x1, x2 = x
    else:
        x1, x2 = _as_points(x)
    G = first_fundamental_form(chart, (x1, x2))
    d = chart.d1(x1, x2)
    dn = chart.normal_d1(x1, x2)
    N = np.einsum("...ik,...jk->...ij", d, dn)  # [<sigma_i, dnu_j>]
    L = -np.linalg.solve(G, N)
    ev = np.linalg.eigvals(L)
    scale = np.maximum(np.abs(ev).max(axis=-1), 1.0)
    if np.any(np.abs(ev.imag).max(axis=-1) > 1e-10 * scale):
        raise SymmetryViolationError(
            "shape operator has complex eigenvalues; check normal/derivatives"
        )
    ev = np.sort(ev.real, axis=-1)
    s = np.linalg.det(L)
    h = 0.5 * (L[..., 0, 0] + L[..., 1, 1])
    return CurvatureData(
        G=G, L_mat=L, kappa1=ev[..., 0], kappa2=ev[..., 1], s=s, h=h, K=s - h * h
    )


def curvature_potential(chart, x):
    """K = s - h**2 = -((kappa1 - kappa2)/2)**2 <= 0."""
    return shape_operator(chart, x).K


# ---------------------------------------------------------------------------
# tube metric


@dataclass
class TubeSlice:
    """Tube metric at one (x, y): tangential correction C, block metric G, det g."""

    C: np.ndarray  # (..., 2, 2)
    G: np.ndarray  # (..., 3, 3) block diag(G_Sigma + C, 1)
    g: np.ndarray  # det G


class TubeMetric:
    """Metric data of the normal tube around a chart.

    ``reach_bound`` is the largest Y0 such that ``|y| ||G^-1 S|| < 1`` for
    all |y| < Y0 over the validation lattice, with S = [<sigma_i, L sigma_j>].
    Raw evaluators error outside the reach; the ``extended_*`` evaluators
    interpolate the correction C to zero over [taper_lo, taper_hi]*reach and
    are valid for every y (complete extension used by the operators).
    """

    TAPER = (0.4, 0.8)

    def __init__(self, chart, n=48):
        self.chart = chart
        self._nvalidate = n
        X1, X2 = chart.validation_grid(n)
        curv = shape_operator(chart, (X1, X2))
        norms = np.linalg.norm(curv.L_mat, ord=2, axis=(-2, -1))
        m = float(np.max(norms))
        self.reach_bound = np.inf if m == 0.0 else 1.0 / m

    def _SGM(self, x1, x2):
        curv = shape_operator(self.chart, (x1, x2))
        S = curv.G @ curv.L_mat  # [<sigma_i, L sigma_j>], symmetric
        return S, curv.G, curv.L_mat

    def correction(self, x1, x2, y):
        """C(x, y) = -2 y S + y^2 S G^-1 S (raw, no taper)."""
        S, G, M = self._SGM(x1, x2)
        y = np.asarray(y, float)[..., None, None]
        return -2.0 * y * S + y * y * (S @ np.linalg.solve(G, S))

    def eta(self, y):
        """Taper profile: 1 inside TAPER[0]*reach, 0 outside TAPER[1]*reach."""
        if not np.isfinite(self.reach_bound):
            return np.ones_like(np.asarray(y, float))
        lo, hi = (t * self.reach_bound for t in self.TAPER)
        return 1.0 - smoothstep((np.abs(np.asarray(y, float)) - lo) / (hi - lo))

    def slice(self, x1, x2, y, extended=False):
        y = np.asarray(y, float)
        if not extended and np.any(np.abs(y) >= self.reach_bound):
            raise OutOfTubeError(
                f"|y| >= reach bound {self.reach_bound:.6g}; metric may degenerate"
            )
        S, G, _ = self._SGM(x1, x2)
        yy = y[..., None, None]
        C = -2.0 * yy * S + yy * yy * (S @ np.linalg.solve(G, S))
        if extended:
            C = C * self.eta(y)[..., None, None]
        shape = np.broadcast_shapes(G.shape[:-2], y.shape)
        G3 = np.zeros(shape + (3, 3))
        G3[..., :2, :2] = G + C
        G3[..., 2, 2] = 1.0
        g = np.linalg.det(G + C)
        return TubeSlice(C=C, G=G3, g=g)

    def det_ratio_quarter(self, x1, x2, y, extended=True):
        """m-factor [g(x,0)/g(x,y)]**(1/4); y may broadcast over x."""
        S, G, _ = self._SGM(x1, x2)
        yy = np.asarray(y, float)[..., None, None]
        C = -2.0 * yy * S + yy * yy * (S @ np.linalg.solve(G, S))
        if extended:
            C = C * self.eta(y)[..., None, None]
        else:
            if np.any(np.abs(y) >= self.reach_bound):
                raise OutOfTubeError("|y| >= reach bound")
        g0 = np.linalg.det(G)
        g = np.linalg.det(G + C)
        return (g0 / g) ** 0.25


def tube_metric(chart, x, y):
    """Raw tube-metric slice (C, G, g) at (x, y); errors outside the reach."""
    if isinstance(x, tuple):
        x1, x2 = x
    else:
        x1, x2 = _as_points(x)
    return chart.tube().slice(x1, x2, y, extended=False)


def density_factors(chart, x, y, lam, extended=False):
    """Density factor m = [g(x,0)/g(x,y/lam)]**(1/4) and k = log m."""
    if isinstance(x, tuple):
        x1, x2 = x
    else:
        x1, x2 = _as_points(x)
    tm = chart.tube()
    u = np.asarray(y, float) / float(lam)
    m = tm.det_ratio_quarter(x1, x2, u, extended=extended)
    return m, np.log(m)


def k_factor_derivatives(chart, x, y, lam, h_fd=None, extended=True):
    """Centered-difference d/dy and d2/dy2 of k_lambda = log m_lambda.

    The default step is 1e-4 times the reach bound, in the scaled variable y.
    """
    if isinstance(x, tuple):
        x1, x2 = x
    else:
        x1, x2 = _as_points(x)
    tm = chart.tube()
    if h_fd is None:
        h_fd = 1e-4 * (tm.reach_bound if np.isfinite(tm.reach_bound) else 1.0)
    lam = float(lam)

    def k(yv):
        return np.log(tm.det_ratio_quarter(x1, x2, np.asarray(yv, float) / lam,
                                           extended=extended))

    y = np.asarray(y, float)
    kp, k0, km = k(y + h_fd), k(y), k(y - h_fd)
    dk = (kp - km) / (2.0 * h_fd)
    d2k = (kp - 2.0 * k0 + km) / (h_fd * h_fd)
    return dk, d2k


# ---------------------------------------------------------------------------
# expansion-order fitting


@dataclass
class OrderFit:
    """Result of a log-log remainder fit on a geometric ladder."""

    slope: float | None
    identically_zero: bool
    values: np.ndarray
    ys: np.ndarray

    def within(self, claimed_order, tol):
        if self.identically_zero:
            return True
        return abs(self.slope - claimed_order) <= tol


def expansion_order_fit(sampler, claimed_order=None, y0=0.5, levels=7,
                        zero_floor=1e-14):
    """Least-squares slope of log|sampler(y)| on the ladder y0 * 2**-k.

    Reports ``identically_zero`` when every sample is below ``zero_floor``.
    ``claimed_order`` is carried along for the caller's bookkeeping only.
    """
    ys = y0 * 2.0 ** (-np.arange(levels, dtype=float))
    vals = np.array([abs(float(sampler(y))) for y in ys])
    if np.all(vals < zero_floor):
        return OrderFit(slope=None, identically_zero=True, values=vals, ys=ys)
    mask = vals > 0.0
    slope = float(np.polyfit(np.log(ys[mask]), np.log(vals[mask]), 1)[0])
    return OrderFit(slope=slope, identically_zero=False, values=vals, ys=ys)


# ---------------------------------------------------------------------------
# construction from config


def make_chart(kind, R=2.0, r=1.0, eps=0.1, periods=(2.0 * np.pi, 2.0 * np.pi)):
    """Build and validate a chart from config keys."""
    if kind == "torus":
        chart = Torus(R=R, r=r)
    elif kind == "perturbed_torus":
        chart = PerturbedTorus(R=R, r=r, eps=eps)
    elif kind == "flat":
        chart = FlatChart(periods=periods)
    else:
        raise ValueError(f"unknown surface kind {kind!r}")
    chart.validate()
    return chart
