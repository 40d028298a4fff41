"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import math
import os
import time

import numpy as np
import pytest

from platoonlab import checks
from platoonlab.experiments import ExperimentSpec, fit_exponent, fit_rate, hmax_envelope, hmax_rows, metrics_rows
from platoonlab.model import PlatoonConfig, Regime, build_coupling_set
from platoonlab.spectral import (
    crossover_length,
    governing_sigma_min,
    pinned_laplacian_eigenvalues,
    scaling_exponent_fit,
    sigma_lower_bound,
    smallest_singular_value,
)
from platoonlab.stability import (
    Verdict,
    boundary_tfs,
    default_grid,
    eigen_stable,
    locate_flip,
    max_stable_length,
    recursion_step,
    routh_stable,
    second_last_denominator,
)

WORKERS = min(8, os.cpu_count() or 1)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


def test_criterion_01_pinned_spectrum(report):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (1, 2, 10, 100):
        i = np.arange(1, n + 1)
        exact = 4 * np.sin((2 * i - 1) * np.pi / (4 * n + 2)) ** 2
        b = build_coupling_set(PlatoonConfig.uniform(n)).b
        got = np.sort(np.linalg.eigvalsh(b @ b.T))
        worst = max(worst, float(np.max(np.abs(got - exact) / exact)))
        worst = max(worst, float(np.max(np.abs(pinned_laplacian_eigenvalues(n) - exact) / exact)))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-9 and elapsed < 1.0, f"max rel err {worst:.1e}, {elapsed:.2f}s")


def test_criterion_02_sigma_lower_bound(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    violations, runs = 0, 0
    for h in (0.0, 0.001, 0.1, 0.5, 1.0, 2.0):
        for n in range(1, 501):
            for _ in range(5):
                r = np.sort(rng.uniform(0.2, 5.0, n))[::-1]
                cfg = PlatoonConfig(n=n, masses=1.0, damping=r, stiffness=1.0, h_vel=h)
                runs += 1
                if governing_sigma_min(cfg) < sigma_lower_bound(cfg) * (1 - 1e-12):
                    violations += 1
    elapsed = time.perf_counter() - t0
    report(2, violations == 0 and elapsed < 60, f"{violations}/{runs} violations, {elapsed:.1f}s")


def test_criterion_03_sigma_rates(report):
    ns = np.arange(100, 501, 25)
    slopes = {}
    for h in (0.0, 0.25, 0.5, 1.0):
        slopes[h] = scaling_exponent_fit(ns, [governing_sigma_min(PlatoonConfig.uniform(n, h_vel=h)) for n in ns])
    rates_ok = abs(slopes[0.0] + 2) <= 0.15 and all(abs(slopes[h] + 1) <= 0.15 for h in (0.25, 0.5, 1.0))
    grid = np.unique(np.round(np.geomspace(25, 4000, 60)).astype(int))
    cross = crossover_length(grid, [governing_sigma_min(PlatoonConfig.uniform(n, h_vel=0.001)) for n in grid])
    cross_ok = 150 <= cross <= 400
    detail = ", ".join(f"slope(h={h:g})={s:.3f}" for h, s in slopes.items()) + f", crossover(h=0.001)={cross:.0f}"
    report(3, rates_ok and cross_ok, detail)


def test_criterion_04_hmax_bound_and_envelopes(report):
    t0 = time.perf_counter()
    spec = ExperimentSpec(
        "hmax_scan", PlatoonConfig.uniform(1), ".", ns=[25, 50, 100], h_vels=[0.0, 0.5],
        h_poss=[0.0], t_fs=[200.0, 1000.0, 5000.0], dt=1e-2, workers=WORKERS,
    )
    rows = hmax_rows(spec)
    violations = sum(1 for r in rows if r["diverged"] or not r["h_max"] <= r["bound"])
    slope_spsv = fit_exponent(*hmax_envelope(rows, 0.0))
    slope_spav = fit_exponent(*hmax_envelope(rows, 0.5))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and abs(slope_spsv - 2) <= 0.3 and abs(slope_spav - 1) <= 0.3 and elapsed < 600
    report(4, ok, f"{violations} bound violations, slopes {slope_spsv:.3f} / {slope_spav:.3f}, {elapsed:.0f}s")


def test_criterion_05_apav_sigma_decay(report):
    worst, rates = 0.0, []
    for hx in (0.1, 0.2, 0.5):
        ns = np.arange(1, 101)
        cfgs = [PlatoonConfig.uniform(n, h_vel=0.5, h_pos=hx) for n in ns]
        sig = []
        for cfg in cfgs:
            cs = build_coupling_set(cfg)
            sig.append(smallest_singular_value(cs.scaling_e @ cs.vel_laplacian))
        sig = np.array(sig)
        rho = cfgs[0].rho
        env = rho ** (ns - 1) * 4 * cfgs[0].damping.max()
        worst = max(worst, float(np.max(sig / env)))
        tail = ns >= 40
        rate = -np.polyfit(ns[tail], np.log(sig[tail]), 1)[0]
        rates.append(abs(rate / math.log(1 / rho) - 1))
    ok = worst <= 1.0 and max(rates) <= 0.10
    report(5, ok, f"max sigma/envelope {worst:.3f}, max rate deviation {max(rates):.2%}")


def test_criterion_06_two_vehicle_recursion_and_flip(report):
    worst = 0.0
    for hv in np.linspace(0, 3, 7):
        for hx in np.linspace(0, 3, 7):
            g_minus, g_plus, g_last = boundary_tfs(hv, hx)
            den = recursion_step(g_last, g_minus, g_plus).den
            worst = max(worst, float(np.max(np.abs(den - second_last_denominator(hv, hx)))))
    below, above = 11 / 7 - 0.01, 11 / 7 + 0.01
    routh_ok = routh_stable(0.0, below, 2).stable and routh_stable(0.0, above, 2).verdict is Verdict.UNSTABLE
    eig = [eigen_stable(PlatoonConfig.uniform(2, h_pos=hx)) for hx in (below, above)]
    eig_ok = eig[0].stable and eig[1].verdict is Verdict.UNSTABLE
    flip_r = locate_flip(0.0, 2, 1.0, 2.0, method="routh")
    flip_e = locate_flip(0.0, 2, 1.0, 2.0, method="eigen")
    flip_ok = abs(flip_r - 11 / 7) <= 0.01 and abs(flip_e - 11 / 7) <= 0.01
    ok = worst <= 1e-10 and routh_ok and eig_ok and flip_ok
    report(6, ok, f"quartic err {worst:.1e}, flip routh {flip_r:.4f} eigen {flip_e:.4f}")


def test_criterion_07_routh_vs_eigen(report):
    grid = np.linspace(0, 3, 21)
    disagree, compared = [], 0
    for n in (2, 3, 4):
        for hv in grid:
            for hx in grid:
                r = routh_stable(hv, hx, n).verdict
                e = eigen_stable(PlatoonConfig.uniform(n, h_vel=hv, h_pos=hx)).verdict
                if Verdict.MARGINAL in (r, e):
                    continue
                compared += 1
                if r is not e:
                    disagree.append((n, hv, hx))
    report(7, not disagree, f"{len(disagree)} disagreements in {compared} cells")


def test_criterion_08_stability_map(report):
    grid = default_grid()
    n_max = 15
    table = {(hv, hx): max_stable_length(hv, hx, n_max).n_stab for hv in grid for hx in grid}
    not_censored = [k for k, v in table.items() if k[1] <= k[0] and k[1] < 1 and v != n_max]
    increases = [
        (hv, hx)
        for hv in grid
        for a, hx in zip(grid[:-1], grid[1:])
        if table[(hv, hx)] > table[(hv, a)]
    ]
    ok = not not_censored and not increases
    report(8, ok, f"{len(not_censored)} uncensored cells below the diagonal, {len(increases)} increases along h_pos")


@pytest.mark.slow
def test_criterion_09_transient_metrics(report):
    t0 = time.perf_counter()
    spec = ExperimentSpec(
        "metrics_scan", PlatoonConfig.uniform(1), ".", ns=[25, 50, 100, 150], h_vels=[0.5], h_poss=[0.2],
        dt=1e-2, workers=WORKERS,
    )
    rows = metrics_rows(spec)
    by = {reg: [r for r in rows if r["regime"] is reg] for reg in Regime}
    ns = {reg: [r["n"] for r in sel] for reg, sel in by.items()}

    forces = [r["max_force"] for reg in (Regime.SPSV, Regime.SPAV) for r in by[reg]]
    force_ok = all(abs(f - 1) <= 0.05 for f in forces)
    peak = next(r["peak_state"] for r in by[Regime.APAV] if r["n"] == 150)
    conv = {reg: fit_exponent(ns[reg], [r["conv_time"] for r in by[reg]]) for reg in Regime}
    total = {reg: fit_exponent(ns[reg], [r["total_error"] for r in by[reg]]) for reg in (Regime.SPSV, Regime.SPAV)}
    apav_rate = fit_rate(ns[Regime.APAV], [r["total_error"] for r in by[Regime.APAV]])
    parts = {
        "max force": force_ok,
        "APAV peak": peak >= 1e5,
        "conv SPSV": abs(conv[Regime.SPSV] - 2) <= 0.3,
        "conv SPAV": abs(conv[Regime.SPAV] - 1) <= 0.3,
        "conv APAV": abs(conv[Regime.APAV] - 1) <= 0.3,
        "total SPSV": abs(total[Regime.SPSV] - 3) <= 0.4,
        "total SPAV": abs(total[Regime.SPAV] - 2) <= 0.4,
        "APAV rate": abs(apav_rate - 0.17) <= 0.05,
    }
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in parts.items() if not v]
    detail = (
        f"max force {min(forces):.3f}..{max(forces):.3f}, APAV peak {peak:.2e}, "
        f"conv exps {conv[Regime.SPSV]:.2f}/{conv[Regime.SPAV]:.2f}/{conv[Regime.APAV]:.2f}, "
        f"total exps {total[Regime.SPSV]:.2f}/{total[Regime.SPAV]:.2f}, APAV rate {apav_rate:.3f}, "
        f"{elapsed:.0f}s; failing: {', '.join(failed) or 'none'}"
    )
    report(9, not failed and elapsed < 1200, detail)


def test_criterion_10_property_suite(report):
    wanted = {"skew_identity", "gamma2_identity", "row_sum_positivity", "passivity", "energy_monotone", "rk4_order"}
    results = {c.name: c for c in checks.run_checks(seed=7)}
    failed = [name for name in sorted(wanted) if not results[name].passed]
    detail = "; ".join(f"{name}: {results[name].detail}" for name in sorted(wanted))
    report(10, not failed, detail)
