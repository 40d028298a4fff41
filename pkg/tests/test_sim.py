import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonlab.checks import energy_rate, rk4_error_ratio, scaled_symmetric_part
from platoonlab.model import ConfigError, PlatoonConfig, build_coupling_set
from platoonlab.sim import (
    DisturbanceSpec,
    LeaderSpec,
    PlatoonState,
    SimulationTrace,
    compute_metrics,
    control_force,
    disturbance_bound,
    energy_weights,
    hamiltonian,
    simulate,
    step_dynamics,
    tail_estimate,
    worst_case_disturbance,
)

OMEGA = math.sqrt(3) / 2


def oscillator_spacing(t):
    """Delta(t) of one vehicle with unit gains, Delta(0) = 1, p(0) = 0."""
    return math.exp(-t / 2) * (math.cos(OMEGA * t) + math.sin(OMEGA * t) / (2 * OMEGA))


def rand_config(rng, n, hv=0.5, hx=0.0):
    return PlatoonConfig(
        n=n,
        masses=rng.uniform(0.5, 2, n),
        damping=np.sort(rng.uniform(0.5, 2, n))[::-1],
        stiffness=rng.uniform(0.5, 2, n),
        h_vel=hv,
        h_pos=hx,
    )


# --- energy -------------------------------------------------------------------


def test_hamiltonian_quadratic_forms():
    cfg = PlatoonConfig.uniform(3)
    assert hamiltonian(cfg, PlatoonState(np.zeros(3), np.array([1.0, 0, 0])), 0.0) == pytest.approx(0.5)
    assert hamiltonian(cfg, PlatoonState(np.array([1.0, 0, 0]), np.zeros(3)), 0.0) == pytest.approx(0.5)


def test_scaled_hamiltonian_weights():
    cfg = PlatoonConfig.uniform(2, h_pos=1 / 3)
    assert hamiltonian(cfg, PlatoonState(np.zeros(2), np.array([0.0, 1.0])), 0.0) == pytest.approx(1 / 3)
    wp, wd, kind = energy_weights(cfg)
    assert kind == "H_delta"
    np.testing.assert_allclose(wp, [1, 0.5])
    np.testing.assert_allclose(wd, [4 / 3, 2 / 3])


def test_hamiltonian_uses_relative_momentum():
    cfg = PlatoonConfig.uniform(2, mass=2.0)
    eq = PlatoonState.equilibrium(cfg, 1.5)
    assert hamiltonian(cfg, eq, 1.5) == 0.0
    assert hamiltonian(cfg, eq, 0.5) == pytest.approx(2 * 0.5 * 2.0 * 1.0)


def test_hamiltonian_undefined_beyond_unit_h_pos():
    cfg = PlatoonConfig.uniform(2, h_pos=1.0)
    with pytest.raises(ConfigError):
        hamiltonian(cfg, PlatoonState.zeros(2), 0.0)
    # the unweighted energy is still available on request
    assert hamiltonian(cfg, PlatoonState.zeros(2), 0.0, kind="H") == 0.0


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 10), hv=st.floats(0, 2), seed=st.integers(0, 10**6))
def test_energy_rate_matches_dissipation_plus_supply(n, hv, seed):
    rng = np.random.default_rng(seed)
    cfg = rand_config(rng, n, hv)
    s = PlatoonState(rng.standard_normal(n), rng.standard_normal(n))
    v0, d = rng.standard_normal(), rng.standard_normal(n)
    vt = s.momentum / cfg.masses - v0
    lp = build_coupling_set(cfg).vel_laplacian
    expected = -vt @ lp @ vt + vt @ d
    assert energy_rate(cfg, s, v0, d) == pytest.approx(expected, rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 10), hx=st.floats(0.01, 0.95), seed=st.integers(0, 10**6))
def test_scaled_energy_rate(n, hx, seed):
    rng = np.random.default_rng(seed)
    hv = rng.uniform(hx, 3)
    cfg = rand_config(rng, n, hv, hx)
    s = PlatoonState(rng.standard_normal(n), rng.standard_normal(n))
    v0, d = rng.standard_normal(), rng.standard_normal(n)
    vt = s.momentum / cfg.masses - v0
    e = build_coupling_set(cfg).e_diag
    expected = -vt @ scaled_symmetric_part(cfg) @ vt + (e * vt) @ d
    assert energy_rate(cfg, s, v0, d) == pytest.approx(expected, rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 30), hx=st.floats(0.01, 0.95), seed=st.integers(0, 10**6))
def test_scaled_row_sums_positive(n, hx, seed):
    rng = np.random.default_rng(seed)
    hv = rng.uniform(hx + 1e-3, 4)
    cfg = rand_config(rng, n, hv, hx)
    s = scaled_symmetric_part(cfg)
    assert np.all(s.sum(axis=1) > 0)
    if hv * hx < 1:
        # off-diagonals are then nonpositive, so positive row sums give S > 0
        off = s - np.diag(np.diag(s))
        assert np.all(off <= 1e-15)
        assert np.linalg.eigvalsh(s).min() > 0


def test_scaled_row_sums_closed_form():
    r = np.array([2.0, 1.6, 1.5, 1.1, 0.9, 0.4])
    hv, hx = 0.7, 0.3
    n = r.size
    cfg = PlatoonConfig(n=n, masses=1.0, damping=r, stiffness=1.0, h_vel=hv, h_pos=hx)
    s = scaled_symmetric_part(cfg).sum(axis=1)
    first = ((1 + hx + hv + hx * hv) * r[0] - r[1] * (hv - hx)) / (1 + hx)
    inner = [(hv - hx) * (r[i - 1] * (1 + hx) - r[i] * (1 - hx)) * (1 - hx) ** (i - 2) / (1 + hx) ** i for i in range(2, n)]
    last = r[-1] * (hv - hx) * (1 - hx) ** (n - 2) / (1 + hx) ** (n - 1)
    np.testing.assert_allclose(s, [first, *inner, last], rtol=1e-13)


# --- integration --------------------------------------------------------------


def test_equilibrium_is_fixed_point():
    cfg = PlatoonConfig.uniform(5, h_vel=0.4, h_pos=0.2, mass=1.3)
    eq = PlatoonState.equilibrium(cfg, 2.0)
    nxt = step_dynamics(cfg, eq, 2.0, np.zeros(5), 0.1)
    np.testing.assert_allclose(nxt.momentum, eq.momentum, atol=1e-14)
    np.testing.assert_allclose(nxt.spacing_error, 0, atol=1e-14)
    assert nxt.time == pytest.approx(0.1)


def test_single_vehicle_closed_form():
    cfg = PlatoonConfig.uniform(1)
    s = PlatoonState(np.zeros(1), np.ones(1))
    for _ in range(1000):
        s = step_dynamics(cfg, s, 0.0, np.zeros(1), 1e-3)
    assert s.spacing_error[0] == pytest.approx(oscillator_spacing(1.0), abs=1e-8)
    assert s.spacing_error[0] == pytest.approx(0.65970015, abs=1e-8)


def test_single_vehicle_compiled_path():
    init = PlatoonState(np.zeros(1), np.ones(1))
    tr = simulate(PlatoonConfig.uniform(1), LeaderSpec(), DisturbanceSpec(), t_end=1.0, dt=1e-3, initial=init, refine=False)
    assert tr.spacing_error[-1, 0] == pytest.approx(oscillator_spacing(1.0), abs=1e-8)


def test_rk4_fourth_order():
    assert 14.0 < rk4_error_ratio(0.1) < 18.0
    assert 15.0 < rk4_error_ratio(0.05) < 17.0


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_dynamics(PlatoonConfig.uniform(1), PlatoonState.zeros(1), 0.0, np.zeros(1), 0.0)


def test_callable_disturbance_is_evaluated_per_stage():
    cfg = PlatoonConfig.uniform(2)
    seen = []

    def d(t, p, dl):
        seen.append(t)
        return np.full(2, t)

    step_dynamics(cfg, PlatoonState.zeros(2), 0.0, d, 0.2)
    assert seen == pytest.approx([0.0, 0.1, 0.1, 0.2])


@pytest.mark.parametrize("hv,hx", [(0.0, 0.0), (0.5, 0.0), (0.5, 0.2), (1.2, 0.0)])
def test_compiled_matches_numpy_reference(hv, hx):
    rng = np.random.default_rng(11)
    cfg = rand_config(rng, 6, hv, hx)
    init = PlatoonState(rng.standard_normal(6), rng.standard_normal(6))
    kw = dict(t_end=20.0, dt=0.01, initial=init, record_every=1, refine=False)
    for leader, dist in [
        (LeaderSpec("constant", 0.7), DisturbanceSpec()),
        (LeaderSpec("velocity_step", 1.0, 3.0), DisturbanceSpec("momentum_aligned", t_f=5.0)),
    ]:
        a = simulate(cfg, leader, dist, engine="compiled", max_samples=10**6, **kw)
        b = simulate(cfg, leader, dist, engine="numpy", **kw)
        np.testing.assert_allclose(a.times, b.times, atol=1e-12)
        np.testing.assert_allclose(a.momentum, b.momentum, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(a.spacing_error, b.spacing_error, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(a.forces, b.forces, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(a.hamiltonian, b.hamiltonian, rtol=1e-10, atol=1e-12)
        assert a.d_norm_sq == pytest.approx(b.d_norm_sq, rel=1e-12)


def test_streamed_metrics_match_recomputed():
    rng = np.random.default_rng(5)
    cfg = rand_config(rng, 5, 0.3)
    tr = simulate(cfg, LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=60.0, dt=0.01, record_every=1, max_samples=10**6, refine=False)
    m, ref = tr.metrics, compute_metrics(tr)
    assert m.h_max == pytest.approx(ref.h_max, rel=1e-12)
    assert m.max_overshoot == pytest.approx(ref.max_overshoot, rel=1e-12)
    assert m.max_control_effort == pytest.approx(ref.max_control_effort, rel=1e-12)
    assert m.convergence_time == pytest.approx(ref.convergence_time, rel=1e-12)
    assert m.total_error == pytest.approx(ref.total_error, rel=1e-10)
    assert m.peak_state == pytest.approx(ref.peak_state, rel=1e-12)


def test_decimation_keeps_streamed_metrics():
    cfg = PlatoonConfig.uniform(8, h_vel=0.5)
    full = simulate(cfg, LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=50.0, dt=0.01, record_every=1, max_samples=10**6, refine=False)
    thin = simulate(cfg, LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=50.0, dt=0.01, max_samples=50, refine=False)
    assert thin.times.size <= 52
    # everything but the tail estimate is accumulated on every step
    streamed = ("h_max", "max_overshoot", "max_control_effort", "convergence_time", "total_error", "peak_state")
    assert all(getattr(thin.metrics, k) == getattr(full.metrics, k) for k in streamed)
    assert thin.metrics.total_error_tail == pytest.approx(full.metrics.total_error_tail, rel=0.05)


def test_energy_balance_closes():
    cfg = PlatoonConfig.uniform(20, h_vel=0.5)
    tr = simulate(cfg, LeaderSpec("velocity_step", 1.0, 2.0), DisturbanceSpec("momentum_aligned", t_f=30.0), t_end=60.0, dt=0.05)
    assert tr.balance_residual < 1e-6


def test_refinement_halves_step_when_needed():
    cfg = PlatoonConfig.uniform(5, damping=20.0)
    tr = simulate(cfg, LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=5.0, dt=0.08, balance_tol=1e-9)
    assert tr.dt < 0.08
    assert tr.balance_residual < 1e-9 or tr.dt == pytest.approx(0.08 / 16)


@pytest.mark.parametrize("hv,hx", [(0.0, 0.0), (0.5, 0.0), (0.5, 0.2), (0.5, 0.5), (2.0, 0.4)])
def test_undisturbed_energy_nonincreasing(hv, hx):
    rng = np.random.default_rng(int(10 * hv + 100 * hx))
    cfg = rand_config(rng, 12, hv, hx)
    init = PlatoonState(rng.standard_normal(12), rng.standard_normal(12))
    tr = simulate(cfg, LeaderSpec("constant", -0.4), DisturbanceSpec(), t_end=400.0, dt=0.01, initial=init, record_every=1, max_samples=10**6)
    h = tr.hamiltonian
    assert np.all(np.diff(h) <= 1e-12 * h[0])
    assert h[-1] < 0.05 * h[0]


def test_passivity_over_trace():
    # H(T) - H(0) <= integral of y^T d, checked with the compiled work integral
    cfg = PlatoonConfig.uniform(10, h_vel=0.4)
    rng = np.random.default_rng(1)
    tr = simulate(cfg, LeaderSpec(), DisturbanceSpec("momentum_aligned", t_f=40.0, seed_direction=rng.standard_normal(10)), t_end=40.0, dt=0.01, record_every=1, max_samples=10**6)
    vt = tr.relative_velocity
    supply = np.linalg.norm(vt, axis=1) / math.sqrt(40.0)  # y^T d for d parallel to y
    supply[0] = 1.0 / math.sqrt(40.0) * float(vt[0] @ tr.states[0].momentum)
    gained = tr.hamiltonian[-1] - tr.hamiltonian[0]
    assert gained <= np.trapezoid(supply, tr.times) + 1e-6


# --- disturbance and bound ------------------------------------------------------


def test_worst_case_direction_and_size():
    cfg = PlatoonConfig.uniform(4)
    d = worst_case_disturbance(PlatoonState(np.array([3.0, 4, 0, 0]), np.zeros(4)), 0.0, 100.0, cfg)
    np.testing.assert_allclose(d, [0.06, 0.08, 0, 0])
    assert np.all(worst_case_disturbance(PlatoonState(np.ones(4), np.zeros(4)), 101.0, 100.0, cfg) == 0)


def test_worst_case_seed_at_rest():
    cfg = PlatoonConfig.uniform(3)
    d = worst_case_disturbance(PlatoonState.zeros(3), 0.0, 4.0, cfg, seed_direction=np.array([0.0, 2.0, 0.0]))
    np.testing.assert_allclose(d, [0, 0.5, 0])
    d = worst_case_disturbance(PlatoonState.zeros(3), 0.0, 4.0, cfg)
    np.testing.assert_allclose(d, [0.5, 0, 0])


def test_velocity_alignment_divides_by_mass():
    cfg = PlatoonConfig(n=2, masses=[1.0, 4.0], damping=1.0, stiffness=1.0)
    d = worst_case_disturbance(PlatoonState(np.array([1.0, 4.0]), np.zeros(2)), 0.0, 1.0, cfg, alignment="velocity")
    np.testing.assert_allclose(d, np.array([1, 1]) / math.sqrt(2))


def test_disturbance_spec_validation():
    with pytest.raises(ValueError):
        DisturbanceSpec("momentum_aligned", t_f=0.0)
    with pytest.raises(ValueError):
        DisturbanceSpec("custom_profile")
    with pytest.raises(ValueError):
        DisturbanceSpec(seed_direction=np.zeros(2)).seed(2)


def test_disturbance_bound_examples():
    assert disturbance_bound(PlatoonConfig.uniform(1)) == pytest.approx(0.5)
    assert disturbance_bound(PlatoonConfig.uniform(2)) == pytest.approx(1 / (3 - math.sqrt(5)), rel=1e-10)
    assert disturbance_bound(PlatoonConfig.uniform(2), d_norm=2.0) == pytest.approx(4 / (3 - math.sqrt(5)), rel=1e-10)
    with pytest.raises(ConfigError):
        disturbance_bound(PlatoonConfig.uniform(2, h_pos=1.0))


def test_symmetric_bound_grows_quadratically():
    ns = np.array([25, 50, 100, 200])
    b = [disturbance_bound(PlatoonConfig.uniform(n)) for n in ns]
    assert np.polyfit(np.log(ns), np.log(b), 1)[0] == pytest.approx(2.0, abs=0.05)


@pytest.mark.parametrize("hv", [0.0, 0.5])
@pytest.mark.parametrize("t_f", [20.0, 200.0])
def test_worst_case_energy_below_bound(hv, t_f):
    cfg = PlatoonConfig.uniform(15, h_vel=hv)
    tr = simulate(cfg, LeaderSpec(), DisturbanceSpec("momentum_aligned", t_f=t_f), t_end=t_f, dt=0.02)
    assert tr.d_norm_sq == pytest.approx(1.0, rel=1e-9)
    assert tr.metrics.h_max <= tr.metrics.theoretical_bound
    assert tr.metrics.theoretical_bound == pytest.approx(disturbance_bound(cfg))


def test_apav_worst_case_scaled_energy_below_bound():
    cfg = PlatoonConfig.uniform(10, h_vel=0.5, h_pos=0.2)
    tr = simulate(cfg, LeaderSpec(), DisturbanceSpec("momentum_aligned", t_f=100.0), t_end=100.0, dt=0.02)
    assert tr.energy_kind == "H_delta"
    assert tr.metrics.h_max <= disturbance_bound(cfg)


def test_custom_profile_runs_numpy_path():
    cfg = PlatoonConfig.uniform(3)
    prof = DisturbanceSpec("custom_profile", profile=lambda t, s: np.array([math.sin(t), 0, 0]))
    tr = simulate(cfg, LeaderSpec(), prof, t_end=2.0, dt=0.01)
    assert tr.times.size == 201
    assert tr.d_norm_sq == pytest.approx(sum(math.sin(k * 0.01) ** 2 * 0.01 for k in range(200)), rel=1e-12)


# --- metrics -------------------------------------------------------------------


def test_equilibrium_metrics_are_zero():
    cfg = PlatoonConfig.uniform(4, h_vel=0.5)
    tr = simulate(cfg, LeaderSpec("constant", 1.0), DisturbanceSpec(), t_end=5.0, initial=PlatoonState.equilibrium(cfg, 1.0))
    m = tr.metrics
    assert (m.h_max, m.max_overshoot, m.max_control_effort, m.convergence_time, m.total_error) == (0, 0, 0, 0, 0)


def test_leader_step_initial_force():
    # at the step only vehicle 1 sees a velocity error, weighted by (1 + h_vel) r_1
    for hv in (0.0, 0.5):
        tr = simulate(PlatoonConfig.uniform(10, h_vel=hv), LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=1.0)
        np.testing.assert_allclose(tr.forces[0], [1 + hv] + [0] * 9)
        assert tr.metrics.max_control_effort == pytest.approx(1 + hv)


def test_symmetric_asymmetric_transient_ordering():
    spsv = simulate(PlatoonConfig.uniform(30), LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=8 * 900)
    spav = simulate(PlatoonConfig.uniform(30, h_vel=0.5), LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=600)
    assert spav.metrics.convergence_time < spsv.metrics.convergence_time
    assert spav.metrics.max_overshoot < spsv.metrics.max_overshoot


def test_convergence_time_inf_when_unsettled():
    tr = simulate(PlatoonConfig.uniform(20), LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=10.0)
    assert tr.metrics.convergence_time == math.inf


def test_divergent_run_is_flagged():
    cfg = PlatoonConfig.uniform(4, h_pos=2.5)
    tr = simulate(cfg, LeaderSpec("velocity_step", 1.0), DisturbanceSpec(), t_end=5000.0, dt=0.05, energy="H")
    assert tr.diverged
    assert tr.metrics.h_max == math.inf and tr.metrics.diverged
    assert np.all(np.isfinite(tr.momentum))


def test_tail_estimate():
    t = np.linspace(0, 10, 1001)
    dens = np.exp(-t)
    assert tail_estimate(t, dens) == pytest.approx(math.exp(-10), rel=0.01)
    assert tail_estimate(t, np.zeros_like(t)) == 0.0
    assert tail_estimate(t, np.ones_like(t)) == math.inf


def test_simulate_input_validation():
    cfg = PlatoonConfig.uniform(2)
    with pytest.raises(ValueError):
        simulate(cfg, LeaderSpec(), DisturbanceSpec(), t_end=0)
    with pytest.raises(ValueError):
        simulate(cfg, LeaderSpec(), DisturbanceSpec(), t_end=1, dt=-1)
    with pytest.raises(ValueError):
        simulate(cfg, LeaderSpec(), DisturbanceSpec(), t_end=1, initial=PlatoonState.zeros(3))
    with pytest.raises(ValueError):
        simulate(cfg, LeaderSpec(), DisturbanceSpec(), t_end=1, engine="gpu")


def test_trace_helpers():
    cfg = PlatoonConfig.uniform(3, mass=2.0)
    tr = simulate(cfg, LeaderSpec("constant", 1.0), DisturbanceSpec(), t_end=1.0, dt=0.1, record_every=1)
    assert isinstance(tr, SimulationTrace)
    assert len(tr.states) == tr.times.size
    np.testing.assert_allclose(tr.relative_velocity[0], -1.0)
    f0 = control_force(cfg, tr.states[0], 1.0)
    np.testing.assert_allclose(tr.forces[0], f0)
