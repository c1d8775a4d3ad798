import numpy as np
import pytest

from qdyn.errors import AuditFailure, ParameterError, StepFailureError
from qdyn.evolution import (
    ConvergenceRow,
    ConvergenceTable,
    PropagatorConfig,
    _krylov_advance,
    convergence_experiment,
    default_initial_state,
    diagnostics,
    factorization_check,
    loglog_slope,
    propagate,
)
from qdyn.fields import build_potentials, gauge_transform
from qdyn.operators import (
    DiscreteOperator,
    GridSpec,
    assemble_effective,
    assemble_scaled,
    random_smooth_state,
)


class _ZeroOp(DiscreteOperator):
    kind = "zero"

    def apply(self, values):
        return np.zeros_like(values)


def test_propagator_config_validation():
    with pytest.raises(ParameterError):
        PropagatorConfig(dt=0.3, T=1.0)  # T/dt not integral
    with pytest.raises(ParameterError):
        PropagatorConfig(dt=0.1, T=1.0, step_tol=1e-3)
    with pytest.raises(ParameterError):
        PropagatorConfig(dt=-0.1, T=1.0)
    assert PropagatorConfig(dt=0.1, T=1.0).n_steps == 10


def test_zero_hamiltonian_is_identity(small_grid, rng):
    psi = random_smooth_state(small_grid, rng)
    traj = propagate(_ZeroOp(small_grid), psi,
                     PropagatorConfig(dt=0.25, T=1.0, sample_stride=2))
    assert small_grid.norm(traj.final.values - psi.values) < 1e-15
    assert traj.norm_drift < 1e-14


def test_eigenstate_evolves_by_pure_phase(flat, pots_plain):
    g = GridSpec(n1=4, n2=4, ny=64, Y=8.0, lam=2.0).bind(flat)
    _, ho, _ = assemble_effective(flat, pots_plain, g)
    e0, chi = ho.ground_state()
    phi = np.ones((4, 4), complex)
    from qdyn.operators import WaveFunction

    psi0 = WaveFunction(phi[..., None] * chi[None, None, :], g).normalized()

    class OscFull(DiscreteOperator):
        kind = "osc"

        def apply(self, values):
            return ho.apply(values)

    traj = propagate(OscFull(g), psi0,
                     PropagatorConfig(dt=0.1, T=2.0, sample_stride=5))
    ov = psi0.inner(traj.final)
    assert abs(abs(ov) - 1.0) < 1e-9
    # phase e^{-i e0 t}
    assert abs(ov - np.exp(-1j * e0 * 2.0)) < 1e-7


def test_unitarity_and_energy_conservation(torus, pots_flagship, rng):
    gauge = gauge_transform(pots_flagship)
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=8.0).bind(torus)
    llam = assemble_scaled(torus, pots_flagship, g, gauge)
    psi0 = random_smooth_state(g, rng)
    lo, hi = llam.spectral_bounds()
    nsub = int(np.ceil(0.05 * (hi - lo) / 90))
    traj = propagate(llam, psi0,
                     PropagatorConfig(dt=0.05 / nsub, T=1.0, krylov_dim=80,
                                      sample_stride=nsub),
                     width_hint=hi - lo)
    assert traj.norm_drift <= 1e-8
    assert traj.energy_drift <= 1e-8


def test_time_reversal(torus, pots_flagship, rng):
    gauge = gauge_transform(pots_flagship)
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=4.0).bind(torus)
    llam = assemble_scaled(torus, pots_flagship, g, gauge)
    psi0 = random_smooth_state(g, rng)
    lo, hi = llam.spectral_bounds()
    nsub = int(np.ceil(0.1 * (hi - lo) / 90))
    cfg = PropagatorConfig(dt=0.1 / nsub, T=0.5, krylov_dim=80,
                           sample_stride=nsub)
    fwd = propagate(llam, psi0, cfg, width_hint=hi - lo)
    cfg_back = PropagatorConfig(dt=cfg.dt, T=-0.5, krylov_dim=80,
                                sample_stride=nsub)
    back = propagate(llam, fwd.final, cfg_back, width_hint=hi - lo)
    assert g.norm(back.final.values - psi0.values) <= 1e-7


def test_step_failure_when_budget_exhausted(torus, pots_flagship, rng):
    gauge = gauge_transform(pots_flagship)
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=16.0).bind(torus)
    llam = assemble_scaled(torus, pots_flagship, g, gauge)
    v = random_smooth_state(g, rng).values.ravel()

    def ap(th):
        return llam.apply(th.reshape(g.shape)).ravel()

    with pytest.raises(StepFailureError):
        _krylov_advance(ap, v, 1.0, 8, 1e-10, max_substeps=0)


# ---------------------------------------------------------------------------
# factorization


def test_factorization_exact_for_x_independent_W(torus, pots_flagship):
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=8.0).bind(torus)
    res = factorization_check(torus, pots_flagship, g, T=0.5, n_samples=10)
    assert res.x_independent
    assert res.max_deviation <= 1e-8


def test_factorization_ground_chi_is_global_phase(torus, pots_flagship):
    # with chi the oscillator ground state the normal factor is e^{-i lam^2 e0 t}
    from qdyn.evolution import FactorizedEffectivePropagator, default_surface_profile
    from qdyn.operators import WaveFunction

    g = GridSpec(n1=8, n2=8, ny=48, Y=8.0, lam=4.0).bind(torus)
    hs, ho, l0 = assemble_effective(torus, pots_flagship, g)
    e0, chi = ho.ground_state()
    phi = default_surface_profile(g)
    raw = WaveFunction(phi[..., None] * chi[None, None, :], g)
    psi0 = raw.normalized()
    fac = FactorizedEffectivePropagator(hs, ho, g.spec.lam)
    A0 = fac.propagator_state(psi0.values)
    t = 0.7
    full = fac.evolve(A0, t, g.shape)
    xonly = fac.xfac.from_coeffs(np.exp(-1j * t * fac.xfac.evals)
                                 * fac.xfac.evolve_coeffs(phi))
    pred = (np.exp(-1j * g.spec.lam**2 * e0 * t)
            * xonly[..., None] * chi[None, None, :]) / raw.norm()
    assert g.norm(full - pred) <= 1e-8


def test_factorization_decay_for_x_dependent_W(torus):
    pots = build_potentials({"kind": "y2_y6_bump"},
                            {"tangential": {"kind": "sin_x2", "a": 0.3}}, {})
    devs = []
    lams = [8.0, 16.0, 32.0]
    for lam in lams:
        g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=lam).bind(torus)
        res = factorization_check(torus, pots, g, T=0.5, n_samples=8)
        assert not res.x_independent
        devs.append(res.max_deviation)
    slope, _, _ = loglog_slope(lams, devs)
    # commutator of the surface factor with the x-dependent part of
    # lam^2 W(x, y/lam) scales like lam^-2
    assert slope <= -1.5
    assert devs[-1] < devs[0]


# ---------------------------------------------------------------------------
# convergence experiment


def test_convergence_flat_chart_noise_floor(flat):
    pots = build_potentials({"kind": "y2"},
                            {"tangential": {"kind": "sin_x2", "a": 0.3}}, {})
    table = convergence_experiment(
        flat, pots, [2.0, 4.0], T=0.2,
        grid_spec=GridSpec(n1=8, n2=8, ny=40, Y=8.0),
        n_samples=10, krylov_dim=80)
    for row in table.rows:
        assert row.sup_diff <= 1e-9


def test_convergence_experiment_torus_small(torus, pots_flagship):
    table = convergence_experiment(
        torus, pots_flagship, [4.0, 8.0, 16.0], T=0.25,
        grid_spec=GridSpec(n1=8, n2=8, ny=40, Y=8.0),
        n_samples=20, krylov_dim=80, seed=42)
    diffs = [r.sup_diff for r in table.rows]
    assert table.monotone
    assert table.slope is not None and table.slope <= -0.5
    for r in table.rows:
        assert r.norm_drift <= 1e-8
        assert r.energy_drift <= 1e-8
    # b(t) and the confinement stay lambda-uniform
    bs = [r.sup_b for r in table.rows]
    cs = [r.sup_confine for r in table.rows]
    assert max(bs) / min(bs) <= 4.0
    assert max(cs) / min(cs) <= 4.0


def test_convergence_refuses_failing_audit(torus):
    pots = build_potentials({"kind": "y4"}, {}, {})
    with pytest.raises(AuditFailure):
        convergence_experiment(torus, pots, [2.0, 4.0], T=0.1,
                               grid_spec=GridSpec(n1=8, n2=8, ny=40, Y=8.0),
                               n_samples=4)


def test_convergence_csv_contract():
    rows = [ConvergenceRow(4.0, 0.1, 0.5, 1e-12, 1e-12, 1e-3, 1.1, 0.5),
            ConvergenceRow(8.0, 0.05, 0.25, 1e-12, 1e-12, 1e-4, 1.1, 0.5)]
    table = ConvergenceTable(rows=rows, slope=-1.0, band=0.2)
    text = table.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == ("lambda,sup_diff,arg_t,norm_drift,energy_drift,"
                        "leak_mass,sup_b,sup_confine")
    assert len(lines) == 4
    assert lines[-1].startswith("#slope=-1.0,band=0.2")
    assert lines[1].split(",")[0] == "4.0"


# ---------------------------------------------------------------------------
# diagnostics


def test_diagnostics_record_and_eps_validation(torus, pots_flagship, rng):
    gauge = gauge_transform(pots_flagship)
    g = GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=8.0).bind(torus)
    llam = assemble_scaled(torus, pots_flagship, g, gauge)
    _, ho, _ = assemble_effective(torus, pots_flagship, g)
    psi0 = default_initial_state(g, ho)
    lo, hi = llam.spectral_bounds()
    nsub = int(np.ceil(0.05 * (hi - lo) / 90))
    from qdyn.operators import assemble_kinetic_bound

    u = g.scaled_heights()
    confine = g.spec.lam**2 * np.broadcast_to(np.asarray(
        pots_flagship.W(g.X1[..., None], g.X2[..., None], u[None, None, :]),
        float), g.shape)
    traj = propagate(llam, psi0,
                     PropagatorConfig(dt=0.05 / nsub, T=0.25, krylov_dim=80,
                                      sample_stride=nsub),
                     leak_eps=0.3, b_plus=assemble_kinetic_bound(torus, g),
                     confine_field=confine, width_hint=hi - lo)
    rec = diagnostics(traj, 0.3)
    assert rec.leaks is not None and rec.leak_at_T == traj.leaks[-1]
    assert rec.sup_b is not None and rec.sup_confine is not None
    rec2 = diagnostics(traj, 0.5)  # recompute at the final state only
    assert rec2.leaks is None and rec2.leak_at_T <= rec.leak_at_T
    with pytest.raises(ParameterError):
        diagnostics(traj, 2.0)  # outside (0, Y/lam) = (0, 1)


def test_loglog_slope_floor():
    slope, band, n = loglog_slope([1, 2, 4], [1e-2, 1e-3, 0.0], floor=1e-14)
    assert n == 2 and band == float("inf")
    assert abs(slope + np.log2(10)) < 1e-12
    slope, band, n = loglog_slope([1, 2], [0.0, 0.0], floor=1e-14)
    assert slope is None and n == 0
