"""Potentials in tube coordinates: magnetic covector A, electric V, confining W.

All components are functions of (x1, x2, y) with x periodic.  The gauge
function gamma(x, y) = int_0^y A3(x, s) ds removes the normal component of
A; the gauged tangential potential follows Taylor's theorem,
A_H'(x, y) = A_H(x, y) - int_0^y dA3/dx (x, s) ds.

Built-in potentials carry closed-form normal derivatives of W at y = 0;
user-defined W falls back to high-order centered differencing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import HypothesisViolationError, IntegrationError
from .geometry import expansion_order_fit

__all__ = [
    "PotentialSet",
    "NormalTaylor",
    "GaugeData",
    "gauge_transform",
    "normal_taylor",
    "hypothesis_audit",
    "HypothesisAudit",
    "build_potentials",
]


def _zeros(x1, x2, y):
    return np.zeros(np.broadcast_shapes(np.shape(x1), np.shape(x2), np.shape(y)))


def fornberg_weights(m, stencil):
    """Finite-difference weights for the m-th derivative at 0 on the stencil."""
    import math

    stencil = np.asarray(stencil, float)
    n = len(stencil)
    A = np.vander(stencil, n, increasing=True).T  # A[k, j] = stencil[j]**k
    b = np.zeros(n)
    b[m] = float(math.factorial(m))
    return np.linalg.solve(A, b)


class PotentialSet:
    """Covector components A1, A2, A3, scalar V and confining W on the tube.

    Parameters are callables f(x1, x2, y), vectorized over numpy arrays.
    ``dx_A3`` returns the pair (dA3/dx1, dA3/dx2); ``w_derivs(order)`` returns
    a callable (x1, x2) -> d^order W/dy^order at y = 0 for order <= 4.  When
    the closed forms are unavailable they are replaced by 6th-order centered
    differences with step ``fd_step``.
    """

    def __init__(self, A1=None, A2=None, A3=None, V=None, W=None,
                 dx_A3=None, w_derivs=None, dx_W=None, fd_step=1e-3,
                 label=""):
        self.A1 = A1 or _zeros
        self.A2 = A2 or _zeros
        self.A3 = A3 or _zeros
        self.V = V or _zeros
        self.W = W or _zeros
        self._dx_A3 = dx_A3
        self._w_derivs = w_derivs
        self._dx_W = dx_W
        self.fd_step = float(fd_step)
        self.label = label

    def A_H(self, x1, x2, y):
        """Tangential pair (A1, A2), shape (..., 2)."""
        return np.stack(np.broadcast_arrays(self.A1(x1, x2, y),
                                            self.A2(x1, x2, y)), axis=-1)

    def dx_A3(self, x1, x2, y):
        if self._dx_A3 is not None:
            return self._dx_A3(x1, x2, y)
        h = self.fd_step

        def d(axis):
            e1 = h if axis == 0 else 0.0
            e2 = h if axis == 1 else 0.0
            return (
                -self.A3(x1 + 2 * e1, x2 + 2 * e2, y)
                + 8.0 * self.A3(x1 + e1, x2 + e2, y)
                - 8.0 * self.A3(x1 - e1, x2 - e2, y)
                + self.A3(x1 - 2 * e1, x2 - 2 * e2, y)
            ) / (12.0 * h)

        return d(0), d(1)

    def w_deriv(self, order):
        """d^order W / dy^order at y = 0 as a callable of (x1, x2)."""
        if self._w_derivs is not None:
            return self._w_derivs(order)
        # 6th-order centered stencil, 9 points covers orders up to 4
        h = self.fd_step
        offsets = np.arange(-4, 5)
        wts = fornberg_weights(order, offsets)

        def fd(x1, x2):
            acc = 0.0
            for o, c in zip(offsets, wts):
                if c != 0.0:
                    acc = acc + c * self.W(x1, x2, o * h)
            return acc / h**order

        return fd


# ---------------------------------------------------------------------------
# built-in library


def _w_library(spec):
    kind = spec.get("kind", "y2")
    if kind == "y2":
        W = lambda x1, x2, y: np.broadcast_to(
            np.asarray(y, float) ** 2, np.broadcast_shapes(np.shape(x1), np.shape(x2), np.shape(y))
        ).copy()
        derivs = {2: lambda x1, x2: 2.0}
    elif kind == "y2_y4":
        W = lambda x1, x2, y: np.broadcast_to(
            np.asarray(y, float) ** 2 + np.asarray(y, float) ** 4,
            np.broadcast_shapes(np.shape(x1), np.shape(x2), np.shape(y))).copy()
        derivs = {2: lambda x1, x2: 2.0, 4: lambda x1, x2: 24.0}
    elif kind == "y2_y6_bump":
        c = float(spec.get("c", 0.1))
        W = lambda x1, x2, y: (np.asarray(y, float) ** 2
                               + c * np.asarray(y, float) ** 6
                               * (1.0 + 0.5 * np.cos(np.asarray(x1, float)))
                               + 0.0 * np.asarray(x2, float))
        derivs = {2: lambda x1, x2: 2.0}
    elif kind == "y4":
        W = lambda x1, x2, y: np.broadcast_to(
            np.asarray(y, float) ** 4,
            np.broadcast_shapes(np.shape(x1), np.shape(x2), np.shape(y))).copy()
        derivs = {4: lambda x1, x2: 24.0}
    elif kind == "y2_sinx1_y3":
        W = lambda x1, x2, y: (np.asarray(y, float) ** 2
                               + np.sin(np.asarray(x1, float)) * np.asarray(y, float) ** 3
                               + 0.0 * np.asarray(x2, float))
        derivs = {2: lambda x1, x2: 2.0,
                  3: lambda x1, x2: 6.0 * np.sin(np.asarray(x1, float))}
    else:
        raise ValueError(f"unknown W kind {kind!r}")

    def w_derivs(order):
        fn = derivs.get(order)
        if fn is None:
            return lambda x1, x2: np.zeros(np.broadcast_shapes(np.shape(x1), np.shape(x2)))

        def call(x1, x2):
            v = fn(x1, x2)
            return np.broadcast_to(np.asarray(v, float),
                                   np.broadcast_shapes(np.shape(x1), np.shape(x2))).copy()

        return call

    return W, w_derivs, kind


def _a_library(spec):
    tang = spec.get("tangential", {"kind": "zero"})
    norm = spec.get("normal", {"kind": "zero"})
    tkind = tang.get("kind", "zero")
    if tkind == "zero":
        A1 = A2 = None
    elif tkind == "sin_x2":
        a = float(tang.get("a", 0.3))
        A1 = lambda x1, x2, y: a * np.sin(np.asarray(x2, float)) + _zeros(x1, x2, y)
        A2 = None
    elif tkind == "const":
        a1 = float(tang.get("a1", 0.3))
        a2 = float(tang.get("a2", 0.0))
        A1 = lambda x1, x2, y: a1 + _zeros(x1, x2, y)
        A2 = lambda x1, x2, y: a2 + _zeros(x1, x2, y)
    else:
        raise ValueError(f"unknown tangential A kind {tkind!r}")

    nkind = norm.get("kind", "zero")
    if nkind == "zero":
        A3, dx_A3 = None, (lambda x1, x2, y: (_zeros(x1, x2, y), _zeros(x1, x2, y)))
    elif nkind == "const":
        c = float(norm.get("c", 0.5))
        A3 = lambda x1, x2, y: c + _zeros(x1, x2, y)
        dx_A3 = lambda x1, x2, y: (_zeros(x1, x2, y), _zeros(x1, x2, y))
    elif nkind == "linear":
        c0 = float(norm.get("c0", 1.0))
        A3 = lambda x1, x2, y: c0 * np.cos(np.asarray(x1, float)) * np.asarray(y, float) + _zeros(x1, x2, y)
        dx_A3 = lambda x1, x2, y: (
            -c0 * np.sin(np.asarray(x1, float)) * np.asarray(y, float) + _zeros(x1, x2, y),
            _zeros(x1, x2, y),
        )
    else:
        raise ValueError(f"unknown normal A kind {nkind!r}")
    return A1, A2, A3, dx_A3, f"{tkind}+{nkind}"


def _v_library(spec):
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return None, kind
    if kind == "cos_x1":
        v0 = float(spec.get("v0", 0.2))
        return (lambda x1, x2, y: v0 * np.cos(np.asarray(x1, float)) + _zeros(x1, x2, y)), kind
    raise ValueError(f"unknown V kind {kind!r}")


def build_potentials(W=None, A=None, V=None):
    """Assemble a PotentialSet from config-style dicts."""
    Wfn, w_derivs, wname = _w_library(W or {"kind": "y2"})
    A1, A2, A3, dx_A3, aname = _a_library(A or {})
    Vfn, vname = _v_library(V or {})
    return PotentialSet(A1=A1, A2=A2, A3=A3, V=Vfn, W=Wfn,
                        dx_A3=dx_A3, w_derivs=w_derivs,
                        label=f"W={wname},A={aname},V={vname}")


# ---------------------------------------------------------------------------
# gauge transform


def _simpson_from_zero(f, y, rtol=1e-10, n0=8, nmax=4096):
    """Composite-Simpson integral of f over [0, y], Richardson-checked.

    ``f(s)`` must accept a scalar s and return an array over grid points.
    """
    y = float(y)
    if y == 0.0:
        return np.asarray(f(0.0)) * 0.0

    def simpson(n):
        s = np.linspace(0.0, y, n + 1)
        vals = np.stack([np.asarray(f(si), float) for si in s])
        wts = np.ones(n + 1)
        wts[1:-1:2] = 4.0
        wts[2:-1:2] = 2.0
        h = y / n
        return (h / 3.0) * np.tensordot(wts, vals, axes=(0, 0))

    n = n0
    prev = simpson(n)
    while n <= nmax:
        n *= 2
        cur = simpson(n)
        scale = 1.0 + np.max(np.abs(cur))
        if np.max(np.abs(cur - prev)) / 15.0 <= rtol * scale:
            return cur
        prev = cur
    raise IntegrationError(
        f"gauge quadrature did not converge by {nmax} panels"
    )


@dataclass
class GaugeData:
    """Gauge function gamma and gauged tangential potential."""

    pots: PotentialSet

    def gamma(self, x1, x2, y):
        """gamma(x, y) = int_0^y A3(x, s) ds; y scalar or 1-d node array."""
        ys = np.atleast_1d(np.asarray(y, float))
        cols = [_simpson_from_zero(lambda s: self.pots.A3(x1, x2, s), yi)
                for yi in ys]
        out = np.stack(cols, axis=-1)
        return out[..., 0] if np.isscalar(y) or np.ndim(y) == 0 else out

    def A_H_prime(self, x1, x2, y):
        """A_H(x, y) minus int_0^y dA3/dx(x, s) ds, shape (..., 2)."""
        ys = np.atleast_1d(np.asarray(y, float))
        cols = []
        for yi in ys:
            corr1 = _simpson_from_zero(lambda s: self.pots.dx_A3(x1, x2, s)[0], yi)
            corr2 = _simpson_from_zero(lambda s: self.pots.dx_A3(x1, x2, s)[1], yi)
            ah = self.pots.A_H(x1, x2, yi)
            cols.append(ah - np.stack([corr1, corr2], axis=-1))
        out = np.stack(cols, axis=-2)
        return out[..., 0, :] if np.isscalar(y) or np.ndim(y) == 0 else out


def gauge_transform(pots):
    """Return the gauge pair (gamma evaluator, gauged tangential potential).

    By construction gamma(x, 0) = 0, d gamma/dy = A3 (the normal component
    of A - d gamma vanishes) and the gauged tangential potential equals A_H
    on the surface.
    """
    return GaugeData(pots=pots)


# ---------------------------------------------------------------------------
# normal Taylor data of W


@dataclass
class NormalTaylor:
    """Normal Taylor data of W at y = 0: W ~ w y^2/2 + f1 y^3 + f2 y^4."""

    w: object   # callable (x1, x2)
    f1: object
    f2: object

    def F_lambda(self, x1, x2, y, lam):
        """Subleading well anharmonicity lam^-1 f1 y^3 + lam^-2 f2 y^4."""
        y = np.asarray(y, float)
        return (self.f1(x1, x2) * y**3 / lam
                + self.f2(x1, x2) * y**4 / lam**2)

    def quadratic(self, x1, x2, y):
        return 0.5 * self.w(x1, x2) * np.asarray(y, float) ** 2


def normal_taylor(pots, periods=(2.0 * np.pi, 2.0 * np.pi), n=32):
    """Extract (w, f1, f2) from W; raises if the normal Hessian degenerates."""
    w = pots.w_deriv(2)
    d3 = pots.w_deriv(3)
    d4 = pots.w_deriv(4)
    x1 = np.linspace(0.0, periods[0], n, endpoint=False)
    x2 = np.linspace(0.0, periods[1], n, endpoint=False)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    wmin = float(np.min(w(X1, X2)))
    if wmin <= 0.0:
        raise HypothesisViolationError(
            f"normal Hessian of W is not positive (min w = {wmin:.3g})"
        )
    return NormalTaylor(
        w=w,
        f1=lambda a, b: np.asarray(d3(a, b), float) / 6.0,
        f2=lambda a, b: np.asarray(d4(a, b), float) / 24.0,
    )


# ---------------------------------------------------------------------------
# hypothesis audit


@dataclass
class HypothesisAudit:
    kappa: float
    max_W_surface: float
    max_dyW_surface: float
    min_w: float
    dxW_order: float | None
    dxW_zero: bool
    max_V: float
    max_A: float
    pass_i: bool
    pass_ii: bool
    pass_iii: bool

    @property
    def passed(self):
        return self.pass_i and self.pass_ii and self.pass_iii

    def violated(self):
        out = []
        if not self.pass_i:
            out.append("(i)")
        if not self.pass_ii:
            out.append("(ii)")
        if not self.pass_iii:
            out.append("(iii)")
        return out

    def as_json(self):
        return {
            "kappa": self.kappa,
            "min_w": self.min_w,
            "dxW_order": None if self.dxW_zero else self.dxW_order,
            "pass": self.passed,
        }


def _spectral_dx_max(f, periods, n, y):
    """max_x |df/dx_j| at height y via FFT differentiation on the lattice."""
    x1 = np.linspace(0.0, periods[0], n, endpoint=False)
    x2 = np.linspace(0.0, periods[1], n, endpoint=False)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    vals = np.asarray(f(X1, X2, y), float)
    vals = np.broadcast_to(vals, X1.shape)
    k1 = 2.0 * np.pi * np.fft.fftfreq(n, d=periods[0] / n)
    k2 = 2.0 * np.pi * np.fft.fftfreq(n, d=periods[1] / n)
    F = np.fft.fft2(vals)
    d1 = np.fft.ifft2(1j * k1[:, None] * F).real
    d2 = np.fft.ifft2(1j * k2[None, :] * F).real
    return max(np.max(np.abs(d1)), np.max(np.abs(d2)))


def hypothesis_audit(pots, chart, grid=None, n=24, surface_tol=1e-10):
    """Check Theorem hypotheses (i)-(iii) on a grid; failures are report
    entries, not exceptions."""
    periods = chart.periods
    reach = chart.tube().reach_bound
    ymax = reach if np.isfinite(reach) else 1.0
    if grid is not None:
        ymax = min(ymax, grid.Y / grid.lam)
    x1 = np.linspace(0.0, periods[0], n, endpoint=False)
    x2 = np.linspace(0.0, periods[1], n, endpoint=False)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")

    # (i): largest kappa with W >= kappa y^2 on the sampled tube
    ys = np.linspace(-0.95 * ymax, 0.95 * ymax, 41)
    ys = ys[np.abs(ys) > 1e-12]
    ratios = [np.min(np.asarray(pots.W(X1, X2, yi), float) / yi**2) for yi in ys]
    kappa = float(np.min(ratios))
    pass_i = kappa > 0.0

    # (ii): W and dW/dy vanish on the surface; normal Hessian positive
    maxW0 = float(np.max(np.abs(pots.W(X1, X2, 0.0))))
    h = 1e-5 * ymax
    dyW0 = float(np.max(np.abs(
        (np.asarray(pots.W(X1, X2, h), float) - np.asarray(pots.W(X1, X2, -h), float))
        / (2.0 * h))))
    min_w = float(np.min(np.asarray(pots.w_deriv(2)(X1, X2), float)))
    pass_ii = maxW0 <= surface_tol and dyW0 <= surface_tol and min_w > 0.0

    # (iii): tangential derivatives vanish to high order in y
    fit = expansion_order_fit(
        lambda y: _spectral_dx_max(pots.W, periods, n, y),
        claimed_order=5, y0=0.5 * ymax,
    )
    pass_iii = fit.identically_zero or fit.slope >= 4.5

    # boundedness report for V and A
    Y3 = ys[None, None, :]
    max_V = float(np.max(np.abs(pots.V(X1[..., None], X2[..., None], Y3))))
    max_A = max(
        float(np.max(np.abs(pots.A1(X1[..., None], X2[..., None], Y3)))),
        float(np.max(np.abs(pots.A2(X1[..., None], X2[..., None], Y3)))),
        float(np.max(np.abs(pots.A3(X1[..., None], X2[..., None], Y3)))),
    )

    return HypothesisAudit(
        kappa=kappa,
        max_W_surface=maxW0,
        max_dyW_surface=dyW0,
        min_w=min_w,
        dxW_order=fit.slope,
        dxW_zero=fit.identically_zero,
        max_V=max_V,
        max_A=max_A,
        pass_i=pass_i,
        pass_ii=pass_ii,
        pass_iii=pass_iii,
    )
