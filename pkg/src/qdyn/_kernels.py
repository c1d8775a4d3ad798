"""Fused elementwise kernels for the hot operator applications.

Numba is optional; the numpy fallbacks are mathematically identical.  The
kernels only fuse memory passes, so results agree to machine rounding.
"""

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _mid_numpy(psi, u1, u2, A1, A2, Q11, Q12, Q22, inv_w, scal, cy, v1, v2, acc):
    x1 = u1 + A1 * psi
    x2 = u2 + A2 * psi
    np.multiply(Q11, x1, out=v1)
    v1 += Q12 * x2
    np.multiply(Q12, x1, out=v2)
    v2 += Q22 * x2
    ty = np.empty_like(psi)
    ty[..., 1:-1] = 2.0 * psi[..., 1:-1] - psi[..., :-2] - psi[..., 2:]
    ty[..., 0] = 2.0 * psi[..., 0] - psi[..., 1]
    ty[..., -1] = 2.0 * psi[..., -1] - psi[..., -2]
    np.multiply(A1, v1, out=acc)
    acc += A2 * v2
    acc *= inv_w[..., None]
    acc += scal * psi
    acc += cy * ty


def _post_numpy(w, inv_w, acc, out, smul):
    np.multiply(inv_w[..., None], w, out=out)
    out += acc
    out *= smul[..., None]


if _HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _mid_numba(psi, u1, u2, A1, A2, Q11, Q12, Q22, inv_w, scal, cy, v1, v2, acc):
        n1, n2, ny = psi.shape
        for i in range(n1):
            for j in range(n2):
                iw = inv_w[i, j]
                for k in range(ny):
                    p = psi[i, j, k]
                    a1 = A1[i, j, k]
                    a2 = A2[i, j, k]
                    x1 = u1[i, j, k] + a1 * p
                    x2 = u2[i, j, k] + a2 * p
                    w1 = Q11[i, j, k] * x1 + Q12[i, j, k] * x2
                    w2 = Q12[i, j, k] * x1 + Q22[i, j, k] * x2
                    v1[i, j, k] = w1
                    v2[i, j, k] = w2
                    tm = psi[i, j, k - 1] if k > 0 else 0.0 + 0.0j
                    tp = psi[i, j, k + 1] if k < ny - 1 else 0.0 + 0.0j
                    acc[i, j, k] = (iw * (a1 * w1 + a2 * w2)
                                    + scal[i, j, k] * p
                                    + cy * (2.0 * p - tm - tp))

    @njit(cache=True, fastmath=True)
    def _post_numba(w, inv_w, acc, out, smul):
        n1, n2, ny = w.shape
        for i in range(n1):
            for j in range(n2):
                c = smul[i, j]
                iw = inv_w[i, j]
                for k in range(ny):
                    out[i, j, k] = c * (iw * w[i, j, k] + acc[i, j, k])

    @njit(cache=True, fastmath=True)
    def _lanczos_cycle_numba(w, vprev, vcur, b, vnext):
        n = w.size
        acc = 0.0
        for i in range(n):
            w[i] = w[i] - b * vprev[i]
            acc += (w[i].conjugate() * vcur[i]).real
        a = acc
        nrm2 = 0.0
        for i in range(n):
            w[i] = w[i] - a * vcur[i]
            nrm2 += w[i].real * w[i].real + w[i].imag * w[i].imag
        bnew = np.sqrt(nrm2)
        if bnew > 0.0:
            inv = 1.0 / bnew
            for i in range(n):
                vnext[i] = w[i] * inv
        return a, bnew

    scaled_mid = _mid_numba
    scaled_post = _post_numba
    lanczos_cycle = _lanczos_cycle_numba
else:  # pragma: no cover
    scaled_mid = _mid_numpy
    scaled_post = _post_numpy
    lanczos_cycle = None


def _lanczos_cycle_numpy(w, vprev, vcur, b, vnext):
    w -= b * vprev
    a = np.vdot(vcur, w).real
    w -= a * vcur
    bnew = float(np.linalg.norm(w))
    if bnew > 0.0:
        np.multiply(w, 1.0 / bnew, out=vnext)
    return a, bnew


if lanczos_cycle is None:  # pragma: no cover
    lanczos_cycle = _lanczos_cycle_numpy
