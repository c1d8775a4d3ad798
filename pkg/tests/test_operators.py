import numpy as np
import pytest

from qdyn.errors import (
    AuditFailure,
    DomainTooSmallError,
    GridMismatchError,
    OutOfTubeError,
    ParameterError,
)
from qdyn.fields import build_potentials, gauge_transform, hypothesis_audit
from qdyn.geometry import shape_operator
from qdyn.operators import (
    GridSpec,
    SurfaceHamiltonian,
    WaveFunction,
    apply_transforms,
    assemble_effective,
    assemble_kinetic_bound,
    assemble_scaled,
    assemble_unscaled,
    dump_operator,
    hermiticity_defect,
    inverse_transforms,
    lowest_eigenvalues,
    random_smooth_state,
    remainder,
)


# ---------------------------------------------------------------------------
# grids and wavefunctions


def test_gridspec_validation():
    with pytest.raises(ParameterError):
        GridSpec(n1=7, n2=8, ny=32)
    with pytest.raises(ParameterError):
        GridSpec(Y=-1.0)
    with pytest.raises(ParameterError):
        GridSpec(lam=0.5)


def test_raw_tube_binding_rejects_wide_domains(torus):
    # reach is 1: Y/lam = 2 >= 0.5 without the metric extension
    with pytest.raises(OutOfTubeError):
        GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=4.0).bind(torus, extended=False)
    GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=32.0).bind(torus, extended=False)
    GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=4.0).bind(torus)  # extension on


def test_wavefunction_inner_product(small_grid, rng):
    a = random_smooth_state(small_grid, rng)
    b = random_smooth_state(small_grid, rng)
    ip = a.inner(b)
    assert abs(ip - np.conj(b.inner(a))) < 1e-14 * a.norm() * b.norm()
    assert a.inner(a).real > 0.0
    assert abs(a.norm() - 1.0) < 1e-12  # random_smooth_state normalizes


def test_wavefunction_grid_mismatch(small_grid, flat, rng):
    a = random_smooth_state(small_grid, rng)
    g2 = GridSpec(n1=4, n2=4, ny=8, Y=8.0, lam=2.0).bind(flat)
    b = WaveFunction(np.zeros((4, 4, 8), complex), g2)
    with pytest.raises(GridMismatchError):
        a.inner(b)


# ---------------------------------------------------------------------------
# effective operator: spectra and structure


def test_flat_surface_hamiltonian_is_integer_lattice(flat, pots_plain):
    g = GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=2.0).bind(flat)
    hs, _, _ = assemble_effective(flat, pots_plain, g)
    vals, res = lowest_eigenvalues(hs, 5, seed=3)
    assert np.allclose(vals, [0, 1, 1, 1, 1], atol=1e-9)
    assert np.max(res) < 1e-8


def test_flat_constant_tangential_potential_shifts_lattice(flat):
    pots = build_potentials({"kind": "y2"},
                            {"tangential": {"kind": "const", "a1": 0.3}}, {})
    g = GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=2.0).bind(flat)
    hs = SurfaceHamiltonian(g, pots)
    vals, _ = lowest_eigenvalues(hs, 1, seed=3)
    assert abs(vals[0] - 0.09) < 1e-9


def test_oscillator_spectrum_second_order(flat, pots_plain):
    vals = {}
    for ny in (48, 96):
        g = GridSpec(n1=4, n2=4, ny=ny, Y=8.0, lam=2.0).bind(flat)
        _, ho, _ = assemble_effective(flat, pots_plain, g)
        v, _ = lowest_eigenvalues(ho, 3, seed=5)
        vals[ny] = v
    exact = np.array([1.0, 3.0, 5.0])
    ratio = (vals[48] - exact) / (vals[96] - exact)
    # dy scales by (97/49): expect error ratio near (97/49)^2 = 3.92
    assert np.all((2.9 < ratio) & (ratio < 5.0))


def test_scaled_oscillator_ground_energy(flat, pots_plain):
    g = GridSpec(n1=4, n2=4, ny=96, Y=8.0, lam=4.0).bind(flat)
    _, ho, _ = assemble_effective(flat, pots_plain, g)
    e0, _ = ho.ground_state()
    lam2 = 16.0

    class Scaled:
        dim = ho.dim
        grid = ho.grid

        @staticmethod
        def apply(v):
            return lam2 * ho.apply(v)

        @staticmethod
        def standardized():
            base = ho.standardized()
            from scipy.sparse.linalg import LinearOperator
            return LinearOperator(base.shape,
                                  matvec=lambda x: lam2 * base.matvec(x),
                                  dtype=complex)

    vals, _ = lowest_eigenvalues(Scaled, 1, seed=5)
    assert abs(vals[0] - lam2 * e0) < 1e-9 * lam2
    assert abs(vals[0] - lam2) < lam2 * 2e-3  # grid-level agreement with lam^2


def test_kronecker_sum_on_factorized_state(torus, pots_flagship, small_grid):
    hs, ho, l0 = assemble_effective(torus, pots_flagship, small_grid)
    phi = np.exp(np.cos(small_grid.X1) + 1j * np.sin(small_grid.X2))
    _, chi = ho.ground_state()
    psi = phi[..., None] * chi[None, None, :]
    lam2 = small_grid.spec.lam**2
    lhs = l0.apply(psi)
    rhs = hs.apply(phi)[..., None] * chi[None, None, :] \
        + lam2 * phi[..., None] * ho.apply(chi.astype(complex))[None, None, :]
    assert small_grid.norm(lhs - rhs) <= 1e-12 * small_grid.norm(lhs)


def test_domain_too_small_raises(torus, pots_plain):
    g = GridSpec(n1=8, n2=8, ny=24, Y=2.0, lam=8.0).bind(torus)
    with pytest.raises(DomainTooSmallError):
        assemble_effective(torus, pots_plain, g)


def test_audit_gating(torus):
    bad = build_potentials({"kind": "y4"}, {}, {})
    audit = hypothesis_audit(bad, torus)
    g = GridSpec(n1=8, n2=8, ny=32, Y=8.0, lam=8.0).bind(torus)
    with pytest.raises(AuditFailure):
        assemble_effective(torus, bad, g, audit=audit)


# ---------------------------------------------------------------------------
# Hermiticity of every assembled operator


def test_hermiticity_all_operators(torus, pots_flagship, small_grid):
    gauge = gauge_transform(pots_flagship)
    hs, ho, l0 = assemble_effective(torus, pots_flagship, small_grid)
    llam = assemble_scaled(torus, pots_flagship, small_grid, gauge)
    hun = assemble_unscaled(torus, pots_flagship, small_grid)
    bp = assemble_kinetic_bound(torus, small_grid)
    for op in (hs, ho, l0, llam, hun, bp):
        defect, _ = hermiticity_defect(op, np.random.default_rng(7), npairs=20)
        assert defect <= 1e-11, f"{op.kind}: {defect}"


# ---------------------------------------------------------------------------
# gauge invariance and flat collapse


def test_effective_operator_ignores_normal_potential(torus, small_grid, rng):
    base = {"tangential": {"kind": "sin_x2", "a": 0.3}}
    p1 = build_potentials({"kind": "y2"}, dict(base, normal={"kind": "const", "c": 0.5}),
                          {"kind": "cos_x1", "v0": 0.2})
    p2 = build_potentials({"kind": "y2"}, dict(base, normal={"kind": "const", "c": 5.5}),
                          {"kind": "cos_x1", "v0": 0.2})
    p3 = build_potentials({"kind": "y2"}, dict(base, normal={"kind": "linear", "c0": 1.0}),
                          {"kind": "cos_x1", "v0": 0.2})
    ops = [assemble_effective(torus, p, small_grid)[2] for p in (p1, p2, p3)]
    v = random_smooth_state(small_grid, rng).values
    outs = [op.apply(v) for op in ops]
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])
    # and the assembled surface coefficients are bitwise identical
    assert np.array_equal(ops[0].h_surface.scalar, ops[1].h_surface.scalar)


def test_flat_chart_collapse(flat, rng):
    # y-independent library fields with A3 = 0: all three agree
    pots = build_potentials({"kind": "y2"},
                            {"tangential": {"kind": "sin_x2", "a": 0.3}},
                            {"kind": "cos_x1", "v0": 0.2})
    gauge = gauge_transform(pots)
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=4.0).bind(flat)
    _, _, l0 = assemble_effective(flat, pots, g)
    llam = assemble_scaled(flat, pots, g, gauge)
    hun = assemble_unscaled(flat, pots, g)
    psi = random_smooth_state(g, rng)
    a = llam.apply(psi.values)
    b = l0.apply(psi.values)
    scale = g.norm(a)
    assert g.norm(a - b) <= 1e-12 * scale
    # transform-conjugated unscaled operator
    tpsi = apply_transforms(psi, gauge=gauge)
    c = inverse_transforms(WaveFunction(hun.apply(tpsi.values), tpsi.grid),
                           g, gauge=gauge)
    assert g.norm(c.values - a) <= 1e-12 * scale


# ---------------------------------------------------------------------------
# transforms


def test_transform_norm_preservation(torus, pots_flagship, small_grid, rng):
    gauge = gauge_transform(pots_flagship)
    psi = random_smooth_state(small_grid, rng)
    phi = apply_transforms(psi, gauge=gauge)
    assert abs(phi.norm() - psi.norm()) <= 1e-12
    back = inverse_transforms(phi, small_grid, gauge=gauge)
    assert small_grid.norm(back.values - psi.values) <= 1e-12


def test_transform_identity_on_flat_lambda_one(flat, pots_plain):
    g = GridSpec(n1=8, n2=8, ny=32, Y=6.0, lam=1.0).bind(flat)
    psi = random_smooth_state(g, np.random.default_rng(2))
    phi = apply_transforms(psi, gauge=None)
    assert np.max(np.abs(phi.values - psi.values)) < 1e-14


def test_conjugation_second_order(torus, pots_flagship):
    gauge = gauge_transform(pots_flagship)
    defects = {}
    for n1, ny in ((8, 32), (16, 64)):
        g = GridSpec(n1=n1, n2=n1, ny=ny, Y=8.0, lam=8.0).bind(torus)
        llam = assemble_scaled(torus, pots_flagship, g, gauge)
        hun = assemble_unscaled(torus, pots_flagship, g)
        # fixed smooth states, resolution independent
        X1, X2 = g.X1[..., None], g.X2[..., None]
        Y3 = g.y[None, None, :]
        psi = np.exp(np.cos(X1) + np.cos(X2) - 0.5 * Y3**2 + 0.3j * Y3)
        phi = np.exp(np.sin(X1) - 0.4 * Y3**2 + 1j * np.cos(X2))
        psi = WaveFunction(psi, g).normalized()
        phi = WaveFunction(phi, g).normalized()
        tp = apply_transforms(psi, gauge=gauge)
        tf = apply_transforms(phi, gauge=gauge)
        lhs = tp.grid.inner(tp.values, hun.apply(tf.values))
        rhs = g.inner(psi.values, llam.apply(phi.values))
        defects[ny] = abs(lhs - rhs)
    ratio = defects[32] / defects[64]
    assert 2.5 < ratio < 6.5  # second order in the y spacing


# ---------------------------------------------------------------------------
# remainder


def test_remainder_vanishes_on_flat_chart(flat, rng):
    pots = build_potentials({"kind": "y2"},
                            {"tangential": {"kind": "sin_x2", "a": 0.3}}, {})
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=4.0).bind(flat)
    psi = random_smooth_state(g, rng)
    q = remainder(flat, pots, g, psi)
    assert q.norm() <= 1e-13 * g.norm(
        assemble_scaled(flat, pots, g).apply(psi.values))


def _compact_y_state(grid, rng):
    psi = random_smooth_state(grid, rng).values.copy()
    prof = np.exp(-(grid.y / 1.0) ** 4)  # supported in |y| <~ 2
    psi *= prof[None, None, :]
    w = WaveFunction(psi, grid)
    return w.normalized()


def test_remainder_decays_like_inverse_lambda(torus, pots_flagship):
    gauge = gauge_transform(pots_flagship)
    lams = [8.0, 16.0, 32.0, 64.0]
    norms = []
    reality = []
    for lam in lams:
        g = GridSpec(n1=8, n2=8, ny=48, Y=8.0, lam=lam).bind(torus)
        psi = _compact_y_state(g, np.random.default_rng(6))
        llam = assemble_scaled(torus, pots_flagship, g, gauge)
        _, _, l0 = assemble_effective(torus, pots_flagship, g)
        qv = llam.apply(psi.values) - l0.apply(psi.values)
        norms.append(g.norm(qv))
        qexp = g.inner(psi.values, qv)
        # reality holds at the scale of the full energies entering Q
        scale = 1.0 + abs(g.inner(psi.values, llam.apply(psi.values)))
        reality.append(abs(qexp.imag) / scale)
    slope = np.polyfit(np.log(lams), np.log(norms), 1)[0]
    assert abs(slope + 1.0) <= 0.3
    # successive halving within 25 percent
    for a, b in zip(norms, norms[1:]):
        assert abs(b / a - 0.5) <= 0.15
    assert max(reality) < 1e-11


# ---------------------------------------------------------------------------
# kinetic bound


def test_kinetic_bound_on_x_constant_state(torus, small_grid):
    bp = assemble_kinetic_bound(torus, small_grid)
    psi = np.ones(small_grid.shape, complex) * np.exp(-small_grid.y**2)
    val = small_grid.inner(psi, bp.apply(psi)).real
    n2 = small_grid.norm(psi) ** 2
    assert abs(val - n2) <= 1e-10 * n2


def test_kinetic_bound_plane_wave(flat):
    g = GridSpec(n1=8, n2=8, ny=48, Y=8.0, lam=2.0).bind(flat)
    bp = assemble_kinetic_bound(flat, g)
    prof = np.exp(-g.y**2)  # well inside the eta = 1 region
    psi = np.exp(1j * (2 * g.X1 + g.X2))[..., None] * prof[None, None, :]
    val = g.inner(psi, bp.apply(psi)).real
    n2 = g.norm(psi) ** 2
    assert abs(val - (1 + 5) * n2) <= 1e-10 * n2


def test_kinetic_bound_is_at_least_identity(torus, small_grid, rng):
    bp = assemble_kinetic_bound(torus, small_grid)
    for _ in range(5):
        v = rng.standard_normal(small_grid.shape) \
            + 1j * rng.standard_normal(small_grid.shape)
        assert small_grid.inner(v, bp.apply(v)).real >= \
            (1.0 - 1e-12) * small_grid.norm(v) ** 2


def test_kinetic_bound_flat_full_eta_is_shifted_laplacian(flat, rng):
    g = GridSpec(n1=8, n2=8, ny=24, Y=6.0, lam=2.0).bind(flat)
    bp = assemble_kinetic_bound(flat, g, eta_profile=np.ones(24))
    pots = build_potentials({"kind": "y2"}, {}, {})
    hs, _, _ = assemble_effective(flat, pots, g)
    v = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    assert np.max(np.abs(bp.apply(v) - (hs.apply(v) + v))) < 1e-12 * np.max(np.abs(v))


# ---------------------------------------------------------------------------
# k-scalar of the scaled operator


def test_scaled_k_scalar_tends_to_curvature(torus, pots_flagship):
    gauge = gauge_transform(pots_flagship)
    devs = []
    lams = [8.0, 16.0, 32.0, 64.0]
    for lam in lams:
        g = GridSpec(n1=8, n2=8, ny=48, Y=8.0, lam=lam).bind(torus)
        llam = assemble_scaled(torus, pots_flagship, g, gauge)
        K = shape_operator(torus, (g.X1, g.X2)).K
        iy = np.argmin(np.abs(g.y - 0.5))
        devs.append(np.max(np.abs(lam**2 * llam.k_scalar[..., iy] - K)))
    slope = np.polyfit(np.log(lams), np.log(devs), 1)[0]
    assert abs(slope + 1.0) <= 0.2


# ---------------------------------------------------------------------------
# dumps and eigen errors


def test_dump_operator_roundtrip(tmp_path, flat, pots_plain):
    g = GridSpec(n1=4, n2=4, ny=24, Y=8.0, lam=2.0).bind(flat)
    _, ho, _ = assemble_effective(flat, pots_plain, g)
    path = tmp_path / "osc.txt"
    nnz = dump_operator(ho, str(path))
    lines = path.read_text().strip().split("\n")
    rows, cols, count = (int(v) for v in lines[0].split())
    assert rows == cols == 24 and count == nnz == len(lines) - 1
    dense = np.zeros((rows, cols), complex)
    for line in lines[1:]:
        i, j, re, im = line.split()
        dense[int(i), int(j)] = float(re) + 1j * float(im)
    ref = ho.dense()
    assert np.allclose(dense, ref, atol=1e-14)
    assert np.allclose(dense, dense.conj().T, atol=1e-14)


def test_lowest_eigenvalues_k_limit(flat, pots_plain):
    g = GridSpec(n1=4, n2=4, ny=24, Y=8.0, lam=2.0).bind(flat)
    _, ho, _ = assemble_effective(flat, pots_plain, g)
    with pytest.raises(ParameterError):
        lowest_eigenvalues(ho, 13)
