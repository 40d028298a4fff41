"""Invariant suite run by ``platoonlab validate``.

Each check is cheap (well under a second on one core) and returns a
:class:`CheckResult`; the suite never raises on a failed invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import PlatoonConfig, build_coupling_set, closed_loop_matrix, incidence
from .sim import (
    DisturbanceSpec,
    LeaderSpec,
    PlatoonState,
    control_force,
    hamiltonian,
    simulate,
    step_dynamics,
    _spacing_rate,
)
from .spectral import (
    governing_sigma_min,
    pinned_laplacian_eigenvalues,
    pinned_laplacian_eigenvalues_numeric,
    sigma_lower_bound,
    smallest_singular_value,
)
from .stability import Verdict, eigen_stable, routh_stable

TOL_IDENTITY = 1e-12
TOL_SPECTRUM = 1e-9
TOL_ENERGY = 1e-7


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_config(rng: np.random.Generator, n: int, h_vel: float = 0.5, h_pos: float = 0.0, monotone: bool = True) -> PlatoonConfig:
    r = rng.uniform(0.5, 2.0, n)
    if monotone:
        r = np.sort(r)[::-1]
    return PlatoonConfig(
        n=n,
        masses=rng.uniform(0.5, 2.0, n),
        damping=r,
        stiffness=rng.uniform(0.5, 2.0, n),
        h_vel=h_vel,
        h_pos=h_pos,
        ref_distances=np.zeros(n),
        leader_velocity=0.0,
    )


def componentwise_force(config: PlatoonConfig, p: np.ndarray, dl: np.ndarray, v0: float) -> np.ndarray:
    """Per-vehicle force from neighbour errors; the last vehicle only sees
    its predecessor."""
    n, hv, hx = config.n, config.h_vel, config.h_pos
    r, a = config.damping, config.stiffness
    v = p / config.masses
    vp = np.concatenate(([v0], v))
    f = np.empty(n)
    for i in range(n):
        fwd_v = vp[i] - vp[i + 1]
        f[i] = (1 + hv) * r[i] * fwd_v + (1 + hx) * a[i] * dl[i]
        if i < n - 1:
            back_v = v[i + 1] - v[i]
            f[i] += (1 - hv) * r[i + 1] * back_v - (1 - hx) * a[i + 1] * dl[i + 1]
    return f


def check_spectrum() -> CheckResult:
    worst = 0.0
    for n in (1, 2, 10, 100):
        exact = pinned_laplacian_eigenvalues(n)
        num = pinned_laplacian_eigenvalues_numeric(n)
        dense = np.linalg.eigvalsh(incidence(n) @ incidence(n).T)
        worst = max(worst, float(np.max(np.abs(num - exact) / exact)), float(np.max(np.abs(dense - exact) / exact)))
    return CheckResult("pinned_spectrum", worst < TOL_SPECTRUM, f"max rel err {worst:.2e}")


def check_force_expansion(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for n in (1, 2, 5, 17):
        for hv, hx in ((0.0, 0.0), (0.4, 0.0), (0.7, 0.3), (1.5, 1.2)):
            cfg = random_config(rng, n, hv, hx, monotone=False)
            p, dl, v0 = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal()
            f = control_force(cfg, PlatoonState(p, dl), v0)
            worst = max(worst, float(np.max(np.abs(f - componentwise_force(cfg, p, dl, v0)))))
    return CheckResult("force_expansion", worst < TOL_IDENTITY, f"max abs err {worst:.2e}")


def check_tridiagonal(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for n in (1, 3, 9):
        cfg = random_config(rng, n, rng.uniform(0, 3), monotone=False)
        b = incidence(n)
        ref = (b + cfg.h_vel * np.abs(b)) @ np.diag(cfg.damping) @ b.T
        worst = max(worst, float(np.max(np.abs(build_coupling_set(cfg).vel_laplacian - ref))))
    return CheckResult("tridiagonal_form", worst < TOL_IDENTITY, f"max abs err {worst:.2e}")


def check_skew_identity() -> CheckResult:
    worst = 0.0
    for n in (2, 6, 20):
        b = incidence(n)
        for hx in (0.1, 0.5, 0.9):
            e_inv = np.diag(1.0 / build_coupling_set(PlatoonConfig.uniform(n, h_pos=hx)).e_diag)
            lhs = e_inv @ b
            rhs = (b + hx * np.abs(b)) @ e_inv / (1 + hx)
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs)))))
    return CheckResult("skew_identity", worst < TOL_IDENTITY, f"max rel err {worst:.2e}")


def check_gamma2() -> CheckResult:
    worst = 0.0
    for n in range(1, 31):
        b = incidence(n)
        bb = np.abs(b)
        g = b @ (bb.T @ b + b.T @ bb) @ b.T
        ref = np.zeros((n, n))
        ref[0, 0] = 2.0
        worst = max(worst, float(np.max(np.abs(g - ref))))
    return CheckResult("gamma2_identity", worst < TOL_IDENTITY, f"max abs err {worst:.2e}")


def scaled_symmetric_part(config: PlatoonConfig) -> np.ndarray:
    cs = build_coupling_set(config)
    el = cs.e_diag[:, None] * cs.vel_laplacian
    return 0.5 * (el + el.T)


def check_row_sums(rng: np.random.Generator) -> CheckResult:
    bad = []
    for _ in range(30):
        hx = rng.uniform(0.01, 0.95)
        hv = rng.uniform(hx + 1e-3, 3.0)
        cfg = random_config(rng, int(rng.integers(2, 25)), hv, hx)
        s = scaled_symmetric_part(cfg).sum(axis=1)
        if not np.all(s > 0):
            bad.append((hv, hx))
    return CheckResult("row_sum_positivity", not bad, f"{len(bad)} violations")


def energy_rate(config: PlatoonConfig, state: PlatoonState, v0: float, d: np.ndarray, eps: float = 1e-6) -> float:
    """Central difference of the energy along the vector field."""
    vt = state.momentum / config.masses - v0
    dp = control_force(config, state, v0) + d
    dd = _spacing_rate(vt)
    plus = PlatoonState(state.momentum + eps * dp, state.spacing_error + eps * dd)
    minus = PlatoonState(state.momentum - eps * dp, state.spacing_error - eps * dd)
    return (hamiltonian(config, plus, v0) - hamiltonian(config, minus, v0)) / (2 * eps)


def check_passivity(rng: np.random.Generator) -> CheckResult:
    """``dH/dt <= -lambda_min(sym) |y|^2 + y^T d <= y^T d`` with ``y`` the
    weighted relative velocity."""
    worst = -np.inf
    for _ in range(40):
        n = int(rng.integers(1, 12))
        hx = 0.0 if rng.random() < 0.5 else rng.uniform(0.05, 0.9)
        hv = rng.uniform(hx, 1.0 / max(hx, 1.0 / 3.0))
        cfg = random_config(rng, n, hv, hx)
        cs = build_coupling_set(cfg)
        w = cs.e_diag if hx > 0 else np.ones(n)
        sym = scaled_symmetric_part(cfg) if hx > 0 else 0.5 * (cs.vel_laplacian + cs.vel_laplacian.T)
        lam = float(np.linalg.eigvalsh(sym).min())
        state = PlatoonState(rng.standard_normal(n), rng.standard_normal(n))
        v0 = rng.standard_normal()
        d = rng.standard_normal(n)
        vt = state.momentum / cfg.masses - v0
        y = w * vt
        rate = energy_rate(cfg, state, v0, d)
        excess = rate - (-lam * float(vt @ vt) + float(y @ d))
        worst = max(worst, excess / (1.0 + abs(rate)))
        if lam < -1e-12:
            # dissipation must be nonnegative for passivity to hold at all
            worst = max(worst, 1.0)
    return CheckResult("passivity", worst < TOL_ENERGY, f"max excess {worst:.2e}")


def check_energy_monotone(rng: np.random.Generator) -> CheckResult:
    """Undisturbed runs never gain energy from one step to the next."""
    worst = -np.inf
    for hv, hx in ((0.0, 0.0), (0.5, 0.0), (0.5, 0.2), (0.9, 0.6)):
        cfg = random_config(rng, 8, hv, hx)
        init = PlatoonState(rng.standard_normal(8), rng.standard_normal(8))
        tr = simulate(cfg, LeaderSpec("constant", 0.3), DisturbanceSpec(), t_end=40.0, dt=0.01, initial=init, record_every=1, max_samples=10**6)
        h = tr.hamiltonian
        worst = max(worst, float(np.max(np.diff(h)) / h[0]))
    return CheckResult("energy_monotone", worst <= TOL_ENERGY, f"max relative rise {worst:.2e}")


def rk4_error_ratio(dt: float = 0.1, t_end: float = 2.0) -> float:
    """Error ratio between ``dt`` and ``dt/2`` on the single-vehicle loop,
    whose solution is a damped oscillation with unit stiffness and damping."""
    cfg = PlatoonConfig.uniform(1)
    omega = math.sqrt(3.0) / 2.0
    exact = math.exp(-t_end / 2) * (math.cos(omega * t_end) + math.sin(omega * t_end) / (2 * omega))

    def err(h):
        s = PlatoonState(np.zeros(1), np.ones(1))
        for _ in range(int(round(t_end / h))):
            s = step_dynamics(cfg, s, 0.0, np.zeros(1), h)
        return abs(s.spacing_error[0] - exact)

    return err(dt) / err(dt / 2)


def check_rk4_order() -> CheckResult:
    ratio = rk4_error_ratio()
    return CheckResult("rk4_order", bool(14.0 <= ratio <= 18.0), f"error ratio {ratio:.2f} (expect ~16)")


def check_lower_bound(rng: np.random.Generator) -> CheckResult:
    bad = 0
    for n in (1, 2, 7, 30, 80):
        for h in (0.0, 0.001, 0.1, 0.5, 1.0, 2.0):
            cfg = random_config(rng, n, h)
            if governing_sigma_min(cfg) < sigma_lower_bound(cfg) * (1 - 1e-12):
                bad += 1
    return CheckResult("sigma_lower_bound", bad == 0, f"{bad} violations")


def check_sigma_dense(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for n in (3, 20, 64):
        for hv, hx in ((0.0, 0.0), (0.8, 0.0), (0.5, 0.2)):
            cfg = random_config(rng, n, hv, hx)
            cs = build_coupling_set(cfg)
            m = cs.vel_laplacian if hx == 0 else cs.e_diag[:, None] * cs.vel_laplacian
            a, b = smallest_singular_value(m), smallest_singular_value(m, method="dense")
            worst = max(worst, abs(a - b) / b)
    return CheckResult("sigma_banded_vs_dense", worst < 1e-8, f"max rel diff {worst:.2e}")


def check_stability_oracles() -> CheckResult:
    grid = np.linspace(0.0, 3.0, 7)
    bad = []
    for n in (2, 3):
        for hv in grid:
            for hx in grid:
                r = routh_stable(hv, hx, n).verdict
                e = eigen_stable(PlatoonConfig.uniform(n, h_vel=hv, h_pos=hx)).verdict
                if Verdict.MARGINAL not in (r, e) and r != e:
                    bad.append((n, hv, hx))
    return CheckResult("routh_vs_eigen", not bad, f"{len(bad)} disagreements")


def check_closed_loop_n1() -> CheckResult:
    lam = np.sort_complex(np.linalg.eigvals(closed_loop_matrix(PlatoonConfig.uniform(1))))
    ref = np.sort_complex(np.array([-0.5 - 1j * math.sqrt(3) / 2, -0.5 + 1j * math.sqrt(3) / 2]))
    err = float(np.max(np.abs(lam - ref)))
    return CheckResult("closed_loop_single", err < 1e-12, f"max abs err {err:.2e}")


def run_checks(seed: int = 2024) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks: list[Callable[[], CheckResult]] = [
        check_spectrum,
        lambda: check_force_expansion(rng),
        lambda: check_tridiagonal(rng),
        check_skew_identity,
        check_gamma2,
        lambda: check_row_sums(rng),
        lambda: check_passivity(rng),
        lambda: check_energy_monotone(rng),
        check_rk4_order,
        lambda: check_lower_bound(rng),
        lambda: check_sigma_dense(rng),
        check_stability_oracles,
        check_closed_loop_n1,
    ]
    return [c() for c in checks]
