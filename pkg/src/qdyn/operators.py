"""Discrete Hamiltonians on the tensor grid (x1, x2, y).

Discretization: Fourier pseudospectral first derivatives in the periodic x
directions, second-order differences in y with Dirichlet walls at |y| = Y.
Every operator is assembled from its sesquilinear form, so Hermiticity in
the weighted inner product is structural, not approximate.

Two grids appear: the scaled grid carries the fixed-space inner product
with weight sqrt(g(x, 0)); the unscaled grid (y' = y/lambda, index-matched)
carries the full tube weight sqrt(g(x, y')).  The tangential metric
correction is evaluated through the tapered complete extension of the tube
metric, so assemblies stay valid when Y/lambda exceeds the raw reach.
"""

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import LinearOperator, eigsh

from .errors import (
    AuditFailure,
    DomainTooSmallError,
    GridMismatchError,
    OutOfTubeError,
    ParameterError,
    SpectralFailureError,
)
from .geometry import first_fundamental_form, shape_operator

__all__ = [
    "GridSpec",
    "Grid",
    "UnscaledGrid",
    "WaveFunction",
    "DiscreteOperator",
    "SurfaceHamiltonian",
    "NormalOscillator",
    "EffectiveHamiltonian",
    "ScaledHamiltonian",
    "UnscaledHamiltonian",
    "KineticBound",
    "Remainder",
    "assemble_effective",
    "assemble_scaled",
    "assemble_unscaled",
    "assemble_kinetic_bound",
    "apply_transforms",
    "inverse_transforms",
    "remainder",
    "hermiticity_defect",
    "operator_norm_estimate",
    "lowest_eigenvalues",
    "dump_operator",
    "random_smooth_state",
]

_FFT_WORKERS = 1


def _fft2(a):
    return sfft.fft2(a, axes=(0, 1), workers=_FFT_WORKERS)


def _ifft2(a):
    return sfft.ifft2(a, axes=(0, 1), workers=_FFT_WORKERS)


# ---------------------------------------------------------------------------
# grids and wavefunctions


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid parameters: periodic x nodes, Dirichlet y nodes."""

    n1: int = 24
    n2: int = 24
    ny: int = 96
    Y: float = 8.0
    lam: float = 1.0

    def __post_init__(self):
        if self.n1 % 2 or self.n2 % 2:
            raise ParameterError("n1 and n2 must be even")
        if self.Y <= 0 or self.lam < 1.0:
            raise ParameterError("requires Y > 0 and lam >= 1")

    def bind(self, chart, extended=True):
        """Attach to a chart, building node sets and weight fields.

        With ``extended=False`` the raw tube metric is used and the scaled
        domain must satisfy Y/lam < reach/2; the default tapered extension
        is valid for every Y.
        """
        reach = chart.tube().reach_bound
        if not extended and self.Y / self.lam >= 0.5 * reach:
            raise OutOfTubeError(
                f"Y/lam = {self.Y / self.lam:.3g} exceeds half the reach "
                f"bound {reach:.3g}; enable the metric extension or shrink Y"
            )
        return Grid(self, chart, extended=extended)


class Grid:
    """GridSpec bound to a chart: nodes, spacings, spectral multipliers."""

    def __init__(self, spec, chart, extended=True):
        self.spec = spec
        self.chart = chart
        self.extended = extended
        p1, p2 = chart.periods
        self.d1 = p1 / spec.n1
        self.d2 = p2 / spec.n2
        self.dy = 2.0 * spec.Y / (spec.ny + 1)
        self.x1 = self.d1 * np.arange(spec.n1)
        self.x2 = self.d2 * np.arange(spec.n2)
        self.y = -spec.Y + self.dy * np.arange(1, spec.ny + 1)
        self.X1, self.X2 = np.meshgrid(self.x1, self.x2, indexing="ij")
        # multipliers of i d/dx_j on Fourier modes (-k); the DFT symbol is
        # real, so the assembled forms stay Hermitian including at Nyquist
        self.k1 = -2.0 * np.pi * np.fft.fftfreq(spec.n1, d=self.d1)
        self.k2 = -2.0 * np.pi * np.fft.fftfreq(spec.n2, d=self.d2)
        G = first_fundamental_form(chart, (self.X1, self.X2))
        self.g_sigma = np.linalg.det(G)
        self.sqrt_g_inf = np.sqrt(self.g_sigma)
        # fixed-space weight sqrt(g(x,0)), broadcast over y
        self.weight = self.sqrt_g_inf[..., None]
        self.cell = self.d1 * self.d2 * self.dy

    @property
    def shape(self):
        return (self.spec.n1, self.spec.n2, self.spec.ny)

    @property
    def lam(self):
        return self.spec.lam

    def scaled_heights(self):
        """Unscaled heights y/lam the metric is evaluated at."""
        return self.y / self.spec.lam

    def unscaled(self):
        return UnscaledGrid(self)

    def inner(self, u, v):
        return complex(np.vdot(u, (self.weight * v)) * self.cell)

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u).real, 0.0)))


class UnscaledGrid:
    """Index-matched unscaled grid: y' = y/lam, weight sqrt(g(x, y'))."""

    def __init__(self, grid):
        self.base = grid
        self.chart = grid.chart
        spec = grid.spec
        self.spec = spec
        self.d1, self.d2 = grid.d1, grid.d2
        self.x1, self.x2 = grid.x1, grid.x2
        self.X1, self.X2 = grid.X1, grid.X2
        self.k1, self.k2 = grid.k1, grid.k2
        self.dy = grid.dy / spec.lam
        self.y = grid.y / spec.lam
        tm = grid.chart.tube()
        sl = tm.slice(self.X1[..., None], self.X2[..., None],
                      self.y[None, None, :], extended=grid.extended)
        self.metric = sl
        self.weight = np.sqrt(sl.g)
        self.cell = self.d1 * self.d2 * self.dy
        self.g_sigma = grid.g_sigma

    @property
    def shape(self):
        return self.base.shape

    @property
    def lam(self):
        return self.spec.lam

    def inner(self, u, v):
        return complex(np.vdot(u, (self.weight * v)) * self.cell)

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u).real, 0.0)))


@dataclass
class WaveFunction:
    """Complex field on a grid with the weighted inner product."""

    values: np.ndarray
    grid: object

    def copy(self):
        return WaveFunction(self.values.copy(), self.grid)

    def norm(self):
        return self.grid.norm(self.values)

    def inner(self, other):
        if other.grid.shape != self.grid.shape:
            raise GridMismatchError("wavefunctions live on different grids")
        return self.grid.inner(self.values, other.values)

    def normalized(self):
        return WaveFunction(self.values / self.norm(), self.grid)


# ---------------------------------------------------------------------------
# operator base


class DiscreteOperator:
    """Hermitian action on grid arrays, tagged by kind."""

    kind = "generic"

    def __init__(self, grid):
        self.grid = grid
        self.lam = grid.lam if hasattr(grid, "lam") else 1.0

    def apply(self, values):
        raise NotImplementedError

    def __call__(self, psi):
        if psi.grid.shape != self.grid.shape:
            raise GridMismatchError("operator and wavefunction grids differ")
        return WaveFunction(self.apply(psi.values), psi.grid)

    def expectation(self, values):
        return self.grid.inner(values, self.apply(values)).real

    @property
    def dim(self):
        return int(np.prod(self.grid.shape))

    def standardized(self):
        """Similar operator, Hermitian in the plain l2 product (for Lanczos)."""
        s = np.sqrt(np.broadcast_to(self.grid.weight, self.grid.shape)).ravel()
        shape = self.grid.shape

        def mv(th):
            psi = (th / s).reshape(shape)
            return (s * self.apply(psi.astype(complex)).ravel())

        n = self.dim
        return LinearOperator((n, n), matvec=mv, dtype=complex)

    def dense(self, max_dim=4096):
        n = self.dim
        if n > max_dim:
            raise ParameterError(f"dense assembly refused for dim {n} > {max_dim}")
        cols = np.empty((n, n), dtype=complex)
        e = np.zeros(self.grid.shape, dtype=complex)
        flat = e.ravel()
        for j in range(n):
            flat[j] = 1.0
            cols[:, j] = self.apply(e).ravel()
            flat[j] = 0.0
        return cols


class _XGrid:
    """Surface-only grid wrapper so x-operators can live on (n1, n2)."""

    def __init__(self, grid):
        self.base = grid
        self.chart = grid.chart
        self.k1, self.k2 = grid.k1, grid.k2
        self.d1, self.d2 = grid.d1, grid.d2
        self.X1, self.X2 = grid.X1, grid.X2
        self.weight = grid.sqrt_g_inf
        self.cell = grid.d1 * grid.d2
        self.shape = (grid.spec.n1, grid.spec.n2)
        self.lam = grid.spec.lam

    def inner(self, u, v):
        return complex(np.vdot(u, (self.weight * v)) * self.cell)

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u).real, 0.0)))


class _YGrid:
    """Normal-only grid wrapper for the oscillator factor."""

    def __init__(self, grid):
        self.base = grid
        self.y = grid.y
        self.dy = grid.dy
        self.weight = np.ones(1)
        self.cell = grid.dy
        self.shape = (grid.spec.ny,)
        self.lam = grid.spec.lam

    def inner(self, u, v):
        return complex(np.vdot(u, v) * self.cell)

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u).real, 0.0)))


def _tangential_sup(Gi, k1, k2, A1=None, A2=None):
    """Upper bound on the tangential form (D+A)* Gi (D+A) over the grid."""
    tr = Gi[..., 0, 0] + Gi[..., 1, 1]
    det = Gi[..., 0, 0] * Gi[..., 1, 1] - Gi[..., 0, 1] ** 2
    eigmax = 0.5 * (tr + np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
    kmax = np.hypot(np.max(np.abs(k1)), np.max(np.abs(k2)))
    amax = 0.0
    if A1 is not None:
        amax = np.max(np.hypot(np.abs(A1), np.abs(A2) if A2 is not None else 0.0))
    return float(np.max(eigmax)) * (kmax + amax) ** 2


# ---------------------------------------------------------------------------
# tangential kinetic core


class _TangentialKinetic:
    """(D_x + A)* Q (D_x + A) assembled from the form.

    Q is the 2x2 field weight * metric-inverse; ``wdiag`` the diagonal
    weight the result is divided by.  Fields may be (n1, n2) or
    (n1, n2, ny); derivative transforms act on axes (0, 1).
    """

    def __init__(self, k1, k2, Q11, Q12, Q22, A1, A2, inv_w):
        self.Q11, self.Q12, self.Q22 = Q11, Q12, Q22
        self.A1, self.A2 = A1, A2
        self.inv_w = inv_w
        self.k1 = k1
        self.k2 = k2

    def _mults(self, ndim):
        k1 = self.k1.reshape((-1,) + (1,) * (ndim - 1))
        k2 = self.k2.reshape((1, -1) + (1,) * (ndim - 2))
        return k1, k2

    def _field(self, f, ndim):
        if f is None:
            return None
        if f.ndim < ndim:
            return f[..., None]
        return f

    def apply(self, psi):
        nd = psi.ndim
        k1, k2 = self._mults(nd)
        A1 = self._field(self.A1, nd)
        A2 = self._field(self.A2, nd)
        ph = _fft2(psi)
        u1 = _ifft2(k1 * ph)
        u2 = _ifft2(k2 * ph)
        if A1 is not None:
            u1 += A1 * psi
        if A2 is not None:
            u2 += A2 * psi
        Q11 = self._field(self.Q11, nd)
        Q12 = self._field(self.Q12, nd)
        Q22 = self._field(self.Q22, nd)
        v1 = Q11 * u1 + Q12 * u2
        v2 = Q12 * u1 + Q22 * u2
        w = _ifft2(k1 * _fft2(v1) + k2 * _fft2(v2))
        if A1 is not None:
            w += A1 * v1
        if A2 is not None:
            w += A2 * v2
        return self._field(self.inv_w, nd) * w


# ---------------------------------------------------------------------------
# concrete operators


class SurfaceHamiltonian(DiscreteOperator):
    """Magnetic Schrodinger operator on the surface with potential V + K."""

    kind = "H_sigma"

    def __init__(self, grid, pots):
        xg = _XGrid(grid)
        super().__init__(xg)
        X1, X2 = xg.X1, xg.X2
        curv = shape_operator(grid.chart, (X1, X2))
        Gi = np.linalg.inv(curv.G)
        sq = grid.sqrt_g_inf
        A = pots.A_H(X1, X2, 0.0)
        self.scalar = (np.broadcast_to(np.asarray(pots.V(X1, X2, 0.0), float), X1.shape)
                       + curv.K)
        self._kin = _TangentialKinetic(
            xg.k1, xg.k2,
            sq * Gi[..., 0, 0], sq * Gi[..., 0, 1], sq * Gi[..., 1, 1],
            A[..., 0], A[..., 1], 1.0 / sq,
        )
        self._tang_bound = _tangential_sup(Gi, xg.k1, xg.k2, A[..., 0], A[..., 1])

    def apply(self, values):
        out = self._kin.apply(values)
        nd = values.ndim
        scal = self.scalar if nd == 2 else self.scalar[..., None]
        out += scal * values
        return out

    def spectral_bounds(self):
        return (float(np.min(self.scalar)),
                float(np.max(self.scalar)) + self._tang_bound)


class NormalOscillator(DiscreteOperator):
    """Oscillator factor D_y* D_y + lam^2 W(x, y/lam) on the y-grid.

    The potential is a vector when W is x-independent, else a full grid
    field (in which case the Kronecker-sum structure only approximately
    commutes with the surface factor).
    """

    kind = "H_osc"

    def __init__(self, grid, pots, x_independent=None):
        yg = _YGrid(grid)
        super().__init__(yg)
        lam = grid.spec.lam
        self._full_grid = grid
        y = grid.y
        u = y / lam
        pot_full = lam**2 * np.asarray(
            pots.W(grid.X1[..., None], grid.X2[..., None], u[None, None, :]), float)
        pot_full = np.broadcast_to(pot_full, grid.shape)
        vec = pot_full[0, 0]
        if x_independent is None:
            x_independent = bool(np.max(np.abs(pot_full - vec)) <= 1e-13 * (1.0 + np.max(np.abs(vec))))
        self.x_independent = x_independent
        self.pot = vec.copy() if x_independent else pot_full.copy()
        self.idy2 = 1.0 / grid.dy**2

    def _kinetic(self, psi):
        out = np.empty_like(psi)
        out[..., 1:-1] = 2.0 * psi[..., 1:-1] - psi[..., :-2] - psi[..., 2:]
        out[..., 0] = 2.0 * psi[..., 0] - psi[..., 1]
        out[..., -1] = 2.0 * psi[..., -1] - psi[..., -2]
        out *= self.idy2
        return out

    def apply(self, values):
        # values: (ny,) or (n1, n2, ny); x-dependent potential needs the latter
        out = self._kinetic(values)
        if self.x_independent or values.ndim == 3:
            out += self.pot * values
        else:
            raise GridMismatchError("x-dependent oscillator needs full-grid input")
        return out

    def spectral_bounds(self):
        return float(np.min(self.pot)), float(np.max(self.pot)) + 4.0 * self.idy2

    def dense_matrix(self):
        if not self.x_independent:
            raise ParameterError("dense oscillator matrix requires x-independent W")
        n = self.pot.size
        d = 2.0 * self.idy2 + self.pot
        e = -self.idy2 * np.ones(n - 1)
        return d, e

    def ground_state(self):
        """(energy, node-normalized ground state) of the 1-d oscillator."""
        d, e = self.dense_matrix()
        vals, vecs = eigh_tridiagonal(d, e, select="i", select_range=(0, 0))
        chi = vecs[:, 0]
        chi = chi / np.sqrt(np.sum(np.abs(chi) ** 2) * self._full_grid.dy)
        if chi[np.argmax(np.abs(chi))] < 0:
            chi = -chi
        return float(vals[0]), chi

    def wall_tail_mass(self):
        _, chi = self.ground_state()
        return float((chi[0] ** 2 + chi[-1] ** 2) * self._full_grid.dy)


class EffectiveHamiltonian(DiscreteOperator):
    """Surface factor plus lam^2 times the normal oscillator."""

    kind = "L0"

    def __init__(self, grid, h_surface, h_osc):
        super().__init__(grid)
        self.h_surface = h_surface
        self.h_osc = h_osc
        self.lam = grid.spec.lam

    def apply(self, values):
        out = self.h_surface.apply(values)
        out += self.lam**2 * self.h_osc.apply(values)
        return out

    def spectral_bounds(self):
        lo_s, hi_s = self.h_surface.spectral_bounds()
        lo_o, hi_o = self.h_osc.spectral_bounds()
        lam2 = self.lam**2
        return lo_s + lam2 * lo_o, hi_s + lam2 * hi_o


class ScaledHamiltonian(DiscreteOperator):
    """Full scaled tube Hamiltonian on the fixed space.

    Assembled as the gauged tangential kinetic form with the corrected
    metric, the scalar density terms from the log-density k, and the
    lam^2-weighted normal block.
    """

    kind = "L_lambda"

    def __init__(self, grid, pots, gauge):
        super().__init__(grid)
        spec = grid.spec
        lam = spec.lam
        X1, X2 = grid.X1, grid.X2
        u = grid.scaled_heights()
        tm = grid.chart.tube()

        sl = tm.slice(X1[..., None], X2[..., None], u[None, None, :],
                      extended=grid.extended)
        Gfull = sl.G[..., :2, :2]
        Gi = np.linalg.inv(Gfull)
        sq = grid.sqrt_g_inf[..., None]

        Ap = gauge.A_H_prime(X1, X2, u)  # (n1, n2, ny, 2)
        A1 = np.ascontiguousarray(Ap[..., 0])
        A2 = np.ascontiguousarray(Ap[..., 1])

        self._kin = _TangentialKinetic(
            grid.k1, grid.k2,
            sq * Gi[..., 0, 0], sq * Gi[..., 0, 1], sq * Gi[..., 1, 1],
            A1, A2, 1.0 / sq,
        )
        self._A1, self._A2 = A1, A2
        self._Q11 = np.ascontiguousarray(sq * Gi[..., 0, 0])
        self._Q12 = np.ascontiguousarray(sq * Gi[..., 0, 1])
        self._Q22 = np.ascontiguousarray(sq * Gi[..., 1, 1])
        self._inv_w2 = 1.0 / grid.sqrt_g_inf
        self._mk1 = grid.k1.reshape(-1, 1, 1)
        self._mk2 = grid.k2.reshape(1, -1, 1)
        self._ones2 = np.ones_like(self._inv_w2)
        # similarity transform diag(g^(1/4)) for the l2-Hermitian form
        self._s2 = np.sqrt(grid.sqrt_g_inf)
        self._inv_s2 = 1.0 / self._s2

        # log-density field and its derivatives
        def k_of(uvals):
            m = tm.det_ratio_quarter(X1[..., None], X2[..., None],
                                     uvals[None, None, :], extended=grid.extended)
            return np.log(m)

        h_fd = 1e-4 * (tm.reach_bound if np.isfinite(tm.reach_bound) else 1.0)
        hl = h_fd / lam
        k0 = k_of(u)
        kp = k_of(u + hl)
        km = k_of(u - hl)
        dk = (kp - km) / (2.0 * h_fd)       # d/dy of k_lambda(x, y)
        d2k = (kp - 2.0 * k0 + km) / h_fd**2
        ky = dk * dk - d2k

        def ddx(f, axis):
            k = grid.k1 if axis == 0 else grid.k2
            shape = (-1, 1, 1) if axis == 0 else (1, -1, 1)
            # multiplier of i d/dx is -k, so d/dx carries i k
            return np.real(sfft.ifft(1j * (-k).reshape(shape)
                                     * sfft.fft(f, axis=axis), axis=axis))

        kx1 = ddx(k0, 0)
        kx2 = ddx(k0, 1)
        # quadratic gradient term dk' Gi dk
        kq = (Gi[..., 0, 0] * kx1 * kx1 + 2.0 * Gi[..., 0, 1] * kx1 * kx2
              + Gi[..., 1, 1] * kx2 * kx2)
        # divergence-type scalar -(1/sq) sum_j d_j [ sq (Gi grad k)_j ]
        F1 = sq * (Gi[..., 0, 0] * kx1 + Gi[..., 0, 1] * kx2)
        F2 = sq * (Gi[..., 0, 1] * kx1 + Gi[..., 1, 1] * kx2)
        kdiv = -(ddx(F1, 0) + ddx(F2, 1)) / sq

        V = np.broadcast_to(np.asarray(
            pots.V(X1[..., None], X2[..., None], u[None, None, :]), float), grid.shape)
        W = np.broadcast_to(np.asarray(
            pots.W(X1[..., None], X2[..., None], u[None, None, :]), float), grid.shape)

        self.k_scalar = ky            # (dk)^2 - d2k, tends to K near y = 0
        self.scalar = np.ascontiguousarray(V + kq + kdiv + lam**2 * ky + lam**4 * W)
        self.c_y = lam**2 / grid.dy**2
        self._tang_bound = _tangential_sup(Gi, grid.k1, grid.k2, A1, A2)

    def _apply_core(self, psi, smul):
        from ._kernels import scaled_mid, scaled_post

        ph = _fft2(psi)
        u1 = _ifft2(self._mk1 * ph)
        u2 = _ifft2(self._mk2 * ph)
        v1 = np.empty_like(psi)
        v2 = np.empty_like(psi)
        acc = np.empty_like(psi)
        scaled_mid(psi, u1, u2, self._A1, self._A2,
                   self._Q11, self._Q12, self._Q22,
                   self._inv_w2, self.scalar, self.c_y, v1, v2, acc)
        w = _ifft2(self._mk1 * _fft2(v1) + self._mk2 * _fft2(v2))
        out = np.empty_like(psi)
        scaled_post(w, self._inv_w2, acc, out, smul)
        return out

    def apply(self, values):
        return self._apply_core(np.ascontiguousarray(values), self._ones2)

    def apply_sym(self, theta):
        """Similarity-transformed action g^(1/4) H g^(-1/4), l2-Hermitian."""
        return self._apply_core(self._inv_s2[..., None] * theta, self._s2)

    def spectral_bounds(self):
        """Rigorous interval containing the spectrum (quadratic-form bounds)."""
        lo = float(np.min(self.scalar))
        hi = float(np.max(self.scalar)) + 4.0 * self.c_y + self._tang_bound
        return lo, hi


class UnscaledHamiltonian(DiscreteOperator):
    """Tube Hamiltonian with confinement lam^4 W on the unscaled grid.

    Hermitian with respect to the full tube weight sqrt(g(x, y')).  The
    normal kinetic term is a staggered covariant difference with midpoint
    weights, so the normal component A3 of the magnetic potential is
    supported without gauging.
    """

    kind = "H_unscaled"

    def __init__(self, ugrid, pots):
        super().__init__(ugrid)
        grid = ugrid.base
        spec = grid.spec
        lam = spec.lam
        X1, X2 = ugrid.X1, ugrid.X2
        yp = ugrid.y

        Gfull = ugrid.metric.G[..., :2, :2]
        Gi = np.linalg.inv(Gfull)
        sq = ugrid.weight  # sqrt(g), (n1, n2, ny)
        A1 = np.broadcast_to(np.asarray(
            pots.A1(X1[..., None], X2[..., None], yp[None, None, :]), float), grid.shape)
        A2 = np.broadcast_to(np.asarray(
            pots.A2(X1[..., None], X2[..., None], yp[None, None, :]), float), grid.shape)
        self._kin = _TangentialKinetic(
            ugrid.k1, ugrid.k2,
            sq * Gi[..., 0, 0], sq * Gi[..., 0, 1], sq * Gi[..., 1, 1],
            A1, A2, 1.0 / sq,
        )

        V = np.broadcast_to(np.asarray(
            pots.V(X1[..., None], X2[..., None], yp[None, None, :]), float), grid.shape)
        W = np.broadcast_to(np.asarray(
            pots.W(X1[..., None], X2[..., None], yp[None, None, :]), float), grid.shape)
        self.scalar = V + lam**4 * W

        # staggered normal data: midpoints m = 0..ny between Dirichlet walls
        tm = grid.chart.tube()
        ymid = -spec.Y / lam + (np.arange(spec.ny + 1) + 0.5) * ugrid.dy
        slm = tm.slice(X1[..., None], X2[..., None], ymid[None, None, :],
                       extended=grid.extended)
        self.sq_mid = np.sqrt(slm.g)  # (n1, n2, ny+1)
        self.a_mid = np.broadcast_to(np.asarray(
            pots.A3(X1[..., None], X2[..., None], ymid[None, None, :]), float),
            (spec.n1, spec.n2, spec.ny + 1))
        self.inv_sq = 1.0 / sq
        self.idyp = 1.0 / ugrid.dy

    def _normal(self, psi):
        n1, n2, ny = psi.shape
        b = np.zeros((n1, n2, ny + 1), dtype=complex)
        # (B psi)_m = i (psi_m - psi_{m-1})/dy + a_m (psi_m + psi_{m-1})/2
        b[..., :-1] = 1j * self.idyp * psi + 0.5 * self.a_mid[..., :-1] * psi
        b[..., 1:] += -1j * self.idyp * psi + 0.5 * self.a_mid[..., 1:] * psi
        b *= self.sq_mid
        out = (-1j * self.idyp + 0.5 * self.a_mid[..., :-1]) * b[..., :-1] \
            + (1j * self.idyp + 0.5 * self.a_mid[..., 1:]) * b[..., 1:]
        return self.inv_sq * out

    def apply(self, values):
        out = self._kin.apply(values)
        out += self.scalar * values
        out += self._normal(values)
        return out


class KineticBound(DiscreteOperator):
    """eta1 (D_x* G^-1 D_x) eta1 + 1: tangential kinetic diagnostic, >= 1."""

    kind = "B_plus"

    def __init__(self, grid, eta_profile=None):
        super().__init__(grid)
        X1, X2 = grid.X1, grid.X2
        Gm = first_fundamental_form(grid.chart, (X1, X2))
        Gi = np.linalg.inv(Gm)
        sq = grid.sqrt_g_inf
        self._kin = _TangentialKinetic(
            grid.k1, grid.k2,
            sq * Gi[..., 0, 0], sq * Gi[..., 0, 1], sq * Gi[..., 1, 1],
            None, None, 1.0 / sq,
        )
        if eta_profile is None:
            from .geometry import smoothstep

            Y = grid.spec.Y
            a, b = 0.8 * Y, 0.95 * Y
            eta_profile = 1.0 - smoothstep((np.abs(grid.y) - a) / (b - a))
        self.eta = np.asarray(eta_profile, float)

    def apply(self, values):
        phi = self.eta * values
        out = self.eta * self._kin.apply(phi)
        out += values
        return out


# ---------------------------------------------------------------------------
# assembly entry points


def _check_audit(audit):
    if audit is not None and not audit.passed:
        raise AuditFailure(
            "hypothesis audit failed: " + ", ".join(audit.violated()),
            hypothesis=",".join(audit.violated()),
        )


def assemble_effective(chart, pots, grid, audit=None, tail_tol=1e-8):
    """Surface factor, oscillator factor, and their Kronecker sum.

    Returns (h_surface acting in x, h_osc acting in y, full-grid sum).
    Refuses when the audit failed or when the oscillator ground state
    carries more than ``tail_tol`` mass at the Dirichlet wall.
    """
    _check_audit(audit)
    hs = SurfaceHamiltonian(grid, pots)
    ho = NormalOscillator(grid, pots)
    if ho.x_independent:
        tail = ho.wall_tail_mass()
        if tail > tail_tol:
            raise DomainTooSmallError(
                f"oscillator ground state has wall tail mass {tail:.2e} > {tail_tol:.0e}; "
                "enlarge Y"
            )
    return hs, ho, EffectiveHamiltonian(grid, hs, ho)


def assemble_scaled(chart, pots, grid, gauge=None, audit=None):
    """Scaled tube Hamiltonian acting on the fixed space."""
    _check_audit(audit)
    if gauge is None:
        from .fields import gauge_transform

        gauge = gauge_transform(pots)
    return ScaledHamiltonian(grid, pots, gauge)


def assemble_unscaled(chart, pots, grid, audit=None):
    """Tube Hamiltonian on the unscaled, index-matched grid."""
    _check_audit(audit)
    ugrid = grid.unscaled() if isinstance(grid, Grid) else grid
    return UnscaledHamiltonian(ugrid, pots)


def assemble_kinetic_bound(chart, grid, eta_profile=None):
    return KineticBound(grid, eta_profile)


class Remainder(DiscreteOperator):
    """Difference between the scaled and effective Hamiltonians."""

    kind = "Q_lambda"

    def __init__(self, l_scaled, l_effective):
        super().__init__(l_scaled.grid)
        self.l_scaled = l_scaled
        self.l_effective = l_effective

    def apply(self, values):
        return self.l_scaled.apply(values) - self.l_effective.apply(values)


def remainder(chart, pots, grid, psi, gauge=None):
    """L_scaled psi - L_effective psi on the same grid."""
    l_lam = assemble_scaled(chart, pots, grid, gauge=gauge)
    _, _, l0 = assemble_effective(chart, pots, grid)
    vals = l_lam.apply(psi.values) - l0.apply(psi.values)
    return WaveFunction(vals, psi.grid)


# ---------------------------------------------------------------------------
# unitary transforms between the fixed space and the tube


def _transform_factor(grid, gauge):
    ug = grid.unscaled()
    lam = grid.spec.lam
    m = (grid.sqrt_g_inf[..., None] / ug.weight) ** 0.5
    gam = gauge.gamma(ug.X1, ug.X2, ug.y) if gauge is not None else 0.0
    return np.sqrt(lam) * m * np.exp(1j * np.asarray(gam)), ug


def apply_transforms(psi, lam=None, gauge=None):
    """Map a fixed-space state to the tube: S_gamma U_lambda psi.

    Index-preserving: node (x, y_k) of the scaled grid maps to (x, y_k/lam).
    The weighted norms agree exactly by construction.
    """
    grid = psi.grid
    if lam is not None and lam != grid.spec.lam:
        raise GridMismatchError("lam does not match the grid")
    fac, ug = _transform_factor(grid, gauge)
    return WaveFunction(fac * psi.values, ug)


def inverse_transforms(phi, grid, gauge=None):
    """Inverse map from the tube back to the fixed space."""
    fac, ug = _transform_factor(grid, gauge)
    if phi.grid.shape != ug.shape:
        raise GridMismatchError("tube state has the wrong shape")
    return WaveFunction(phi.values / fac, grid)


# ---------------------------------------------------------------------------
# certification and spectra


def random_smooth_state(grid, rng, kmax=4, ymodes=6):
    """Random smooth normalized state: low Fourier modes times smooth y-profile."""
    n1, n2, ny = grid.shape
    c = np.zeros((n1, n2), dtype=complex)
    for m1 in range(-kmax, kmax + 1):
        for m2 in range(-kmax, kmax + 1):
            amp = np.exp(-0.5 * (m1 * m1 + m2 * m2))
            c[m1 % n1, m2 % n2] = amp * (rng.standard_normal() + 1j * rng.standard_normal())
    fx = np.fft.ifft2(c) * n1 * n2
    y = grid.y if hasattr(grid, "y") else grid.base.y
    Y = y[-1] + (y[1] - y[0])
    prof = np.zeros(ny, dtype=complex)
    for m in range(1, ymodes + 1):
        amp = np.exp(-0.7 * m) * (rng.standard_normal() + 1j * rng.standard_normal())
        prof += amp * np.sin(m * np.pi * (y + Y) / (2.0 * Y))
    prof *= np.exp(-0.5 * (y / (0.45 * Y)) ** 2)
    vals = fx[..., None] * prof[None, None, :]
    w = WaveFunction(vals, grid)
    return w.normalized()


def hermiticity_defect(op, rng, npairs=20):
    """Max relative defect |<phi, H psi> - conj(<psi, H phi>)| over random pairs."""
    grid = op.grid
    worst = 0.0
    scale = 0.0
    for _ in range(npairs):
        a = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        b = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        Ha = op.apply(a)
        Hb = op.apply(b)
        lhs = grid.inner(b, Ha)
        rhs = np.conj(grid.inner(a, Hb))
        na = grid.norm(a)
        nb = grid.norm(b)
        hn = max(grid.norm(Ha) / na, grid.norm(Hb) / nb)
        scale = max(scale, hn)
        worst = max(worst, abs(lhs - rhs) / (na * nb * max(hn, 1e-300)))
    return worst, scale


def operator_norm_estimate(op, rng, iters=30):
    """Loose spectral-interval bound via plain Lanczos extremal estimates."""
    grid = op.grid
    v = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    v /= grid.norm(v)
    alphas, betas = [], []
    vprev = np.zeros_like(v)
    beta = 0.0
    for _ in range(min(iters, op.dim)):
        w = op.apply(v) - beta * vprev
        alpha = grid.inner(v, w).real
        w -= alpha * v
        alphas.append(alpha)
        beta = grid.norm(w)
        betas.append(beta)
        if beta < 1e-12:
            break
        vprev = v
        v = w / beta
    T = np.diag(alphas) + np.diag(betas[:-1], 1) + np.diag(betas[:-1], -1)
    ev = np.linalg.eigvalsh(T)
    pad = betas[-1] if betas else 0.0
    return float(ev[0] - pad), float(ev[-1] + pad)


def lowest_eigenvalues(op, k, seed=42, tol=1e-10, maxiter=None, residual_tol=1e-8):
    """Lowest-k eigenvalues by restarted Lanczos iteration, residual-checked."""
    if k > 12:
        raise ParameterError("k must be <= 12")
    n = op.dim
    if k >= n - 1:
        raise ParameterError("k too large for this grid")
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    lin = op.standardized()
    # generous subspace: degenerate clusters are easily missed at the
    # ARPACK default ncv
    ncv = min(n - 1, max(6 * k + 10, 40))
    try:
        vals, vecs = eigsh(lin, k=k, which="SA", v0=v0, tol=tol, ncv=ncv,
                           maxiter=maxiter if maxiter is not None else 100 * n)
    except Exception as exc:  # ArpackNoConvergence and friends
        raise SpectralFailureError(f"eigenvalue iteration failed: {exc}") from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    residuals = []
    for j in range(k):
        r = lin.matvec(vecs[:, j]) - vals[j] * vecs[:, j]
        residuals.append(float(np.linalg.norm(r) / max(1.0, abs(vals[j]))))
    if max(residuals) > residual_tol:
        raise SpectralFailureError(
            f"eigenvalue residual {max(residuals):.2e} above {residual_tol:.0e}"
        )
    return vals, np.array(residuals)


def dump_operator(op, path, max_dim=4096, drop_tol=0.0):
    """Write the operator as sparse triplets: header 'rows cols nnz', then
    'i j re im' per entry, 0-based."""
    mat = op.dense(max_dim=max_dim)
    n = mat.shape[0]
    idx = np.argwhere(np.abs(mat) > drop_tol)
    lines = [f"{n} {n} {len(idx)}"]
    for i, j in idx:
        z = mat[i, j]
        lines.append(f"{i} {j} {float(z.real)!r} {float(z.imag)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(idx)
