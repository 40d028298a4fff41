"""Closed-loop simulation, Hamiltonians and transient metrics.

State is the physical momentum ``p`` and spacing error ``Delta``; the
relative momentum ``p~ = p - M 1 v0`` is formed on the fly so a leader
velocity step does not jump the integrated state.

Two integration paths exist.  :func:`step_dynamics` is a plain numpy RK4 step
on the matrix form and is used for custom disturbance profiles and as a
reference.  :func:`simulate` otherwise runs the compiled loop in
:mod:`platoonlab._kernels`, which also integrates the energy supplied and
dissipated so the energy balance can be checked to integrator accuracy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import _kernels as K
from .model import ConfigError, PlatoonConfig, build_coupling_set, CouplingSet
from .spectral import governing_sigma_min

log = logging.getLogger(__name__)

EnergyKind = Literal["auto", "H", "H_delta"]


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlatoonState:
    momentum: np.ndarray
    spacing_error: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        p = np.array(self.momentum, dtype=float)
        d = np.array(self.spacing_error, dtype=float)
        if p.shape != d.shape or p.ndim != 1:
            raise ValueError("momentum and spacing_error must be 1-d of equal length")
        p.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "momentum", p)
        object.__setattr__(self, "spacing_error", d)

    @classmethod
    def zeros(cls, n: int) -> "PlatoonState":
        return cls(np.zeros(n), np.zeros(n), 0.0)

    @classmethod
    def equilibrium(cls, config: PlatoonConfig, v0: float) -> "PlatoonState":
        return cls(config.masses * v0, np.zeros(config.n), 0.0)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.momentum)) and np.all(np.isfinite(self.spacing_error)))


@dataclass(frozen=True)
class LeaderSpec:
    """Leader velocity: ``constant`` at ``v0`` or a ``velocity_step`` from 0 to
    ``v0`` at ``step_time``."""

    kind: Literal["constant", "velocity_step"] = "constant"
    v0: float = 0.0
    step_time: float = 0.0

    def velocity(self, t: float) -> float:
        if self.kind == "constant":
            return self.v0
        return self.v0 if t >= self.step_time else 0.0

    def _before_after(self) -> tuple[float, float, float]:
        if self.kind == "constant":
            return self.v0, self.v0, 0.0
        if self.kind == "velocity_step":
            return 0.0, self.v0, self.step_time
        raise ValueError(f"unknown leader kind {self.kind!r}")


# profile(t, state) -> N-vector
DisturbanceProfile = Callable[[float, PlatoonState], np.ndarray]


@dataclass(frozen=True)
class DisturbanceSpec:
    """External force on the vehicles.

    ``momentum_aligned`` applies ``p~ / (|p~| sqrt(t_f))`` for ``t < t_f``, so
    ``||d||_2 = 1``.  While ``|p~| <= 1e-9`` (zero initial state) the unit
    ``seed_direction`` (default ``e_1``) is used instead.  ``alignment="velocity"``
    aligns with ``v~ = M^-1 p~`` rather than with ``p~``.
    """

    kind: Literal["none", "momentum_aligned", "custom_profile"] = "none"
    t_f: float = 1.0
    seed_direction: np.ndarray | None = None
    alignment: Literal["momentum", "velocity"] = "momentum"
    profile: DisturbanceProfile | None = None

    def __post_init__(self):
        if self.kind not in ("none", "momentum_aligned", "custom_profile"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "momentum_aligned" and not self.t_f > 0:
            raise ValueError("t_f must be positive")
        if self.kind == "custom_profile" and self.profile is None:
            raise ValueError("custom_profile needs a profile callable")
        if self.alignment not in ("momentum", "velocity"):
            raise ValueError(f"unknown alignment {self.alignment!r}")

    def seed(self, n: int) -> np.ndarray:
        if self.seed_direction is None:
            s = np.zeros(n)
            s[0] = 1.0
            return s
        s = np.asarray(self.seed_direction, dtype=float)
        if s.shape != (n,) or not np.linalg.norm(s) > 0:
            raise ValueError("seed_direction must be a nonzero N-vector")
        return s / np.linalg.norm(s)


def energy_weights(config: PlatoonConfig, kind: EnergyKind = "auto") -> tuple[np.ndarray, np.ndarray, str]:
    """Per-vehicle weights ``(w_p, w_d)`` so that
    ``energy = 1/2 sum(w_p m v~^2) + 1/2 sum(w_d a Delta^2)``."""
    n = config.n
    if kind == "auto":
        kind = "H_delta" if 0 < config.h_pos < 1 else "H"
    if kind == "H":
        return np.ones(n), np.ones(n), "H"
    if kind == "H_delta":
        if config.h_pos >= 1:
            raise ConfigError("H_delta needs h_pos < 1")
        e = config.rho ** np.arange(n)
        return e, (1 + config.h_pos) * e, "H_delta"
    raise ValueError(f"unknown energy kind {kind!r}")


def hamiltonian(config: PlatoonConfig, state: PlatoonState, v0: float, kind: EnergyKind = "auto") -> float:
    """``H`` for ``h_pos == 0``, the scaled ``H_Delta`` for ``0 < h_pos < 1``."""
    if kind == "auto" and config.h_pos >= 1:
        raise ConfigError("no Hamiltonian is defined for h_pos >= 1")
    wp, wd, _ = energy_weights(config, kind)
    pt = state.momentum - config.masses * v0
    dl = state.spacing_error
    return float(0.5 * np.sum(wp * pt * pt / config.masses) + 0.5 * np.sum(wd * config.stiffness * dl * dl))


def control_force(config: PlatoonConfig, state: PlatoonState, v0: float, cs: CouplingSet | None = None) -> np.ndarray:
    """``F = -L_p v~ + (B + h_x|B|) A Delta``."""
    cs = cs or build_coupling_set(config)
    vt = state.momentum / config.masses - v0
    return -cs.vel_matvec(vt) + cs.pos_matvec(state.spacing_error)


def _spacing_rate(vt: np.ndarray) -> np.ndarray:
    # -B^T v~ : Delta_i' = v~_{i-1} - v~_i with the leader at v~_0 = 0
    out = -vt.copy()
    out[1:] += vt[:-1]
    return out


def step_dynamics(
    config: PlatoonConfig,
    state: PlatoonState,
    v0: float,
    d: np.ndarray | Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    dt: float,
    cs: CouplingSet | None = None,
) -> PlatoonState:
    """One classical RK4 step of ``p' = F + d``, ``Delta' = -B^T v~``.

    ``d`` is either a fixed N-vector held over the step or a callable
    ``d(t, p, Delta)`` evaluated at every stage.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    cs = cs or build_coupling_set(config)
    minv = cs.inv_mass

    def force(t, p, dl):
        vt = p * minv - v0
        f = -cs.vel_matvec(vt) + cs.pos_matvec(dl)
        dist = d(t, p, dl) if callable(d) else d
        return f + dist, _spacing_rate(vt)

    t0 = state.time
    p, dl = state.momentum, state.spacing_error
    k1 = force(t0, p, dl)
    k2 = force(t0 + dt / 2, p + dt / 2 * k1[0], dl + dt / 2 * k1[1])
    k3 = force(t0 + dt / 2, p + dt / 2 * k2[0], dl + dt / 2 * k2[1])
    k4 = force(t0 + dt, p + dt * k3[0], dl + dt * k3[1])
    new = PlatoonState(
        p + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        dl + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        t0 + dt,
    )
    if not new.is_finite():
        raise DivergenceError(f"non-finite state after step at t={t0}")
    return new


def worst_case_disturbance(
    state: PlatoonState,
    t: float,
    t_f: float,
    config: PlatoonConfig,
    v0: float = 0.0,
    seed_direction: np.ndarray | None = None,
    alignment: Literal["momentum", "velocity"] = "momentum",
) -> np.ndarray:
    """Disturbance parallel to the relative momentum with ``|d| = 1/sqrt(t_f)``
    for ``t < t_f`` and zero afterwards."""
    n = config.n
    if t >= t_f:
        return np.zeros(n)
    direction = state.momentum - config.masses * v0
    if alignment == "velocity":
        direction = direction / config.masses
    norm = np.linalg.norm(direction)
    if norm <= 1e-9:
        direction = DisturbanceSpec(seed_direction=seed_direction).seed(n)
        norm = 1.0
    return direction / (norm * math.sqrt(t_f))


def disturbance_bound(config: PlatoonConfig, d_norm: float = 1.0) -> float:
    """``||d||^2 / (2 sigma_min)`` with ``sigma_min`` of ``L_p`` or ``E L_p``."""
    if config.h_pos >= 1:
        raise ConfigError("bound needs h_pos < 1")
    return d_norm**2 / (2.0 * governing_sigma_min(config))


@dataclass(frozen=True)
class Metrics:
    h_max: float
    theoretical_bound: float
    max_overshoot: float
    max_control_effort: float
    convergence_time: float
    total_error: float
    total_error_tail: float = 0.0
    peak_state: float = 0.0
    diverged: bool = False

    @classmethod
    def divergent(cls) -> "Metrics":
        inf = float("inf")
        return cls(inf, float("nan"), inf, inf, inf, inf, inf, inf, True)


@dataclass
class SimulationTrace:
    """Recorded samples of one run (possibly decimated, see ``record_every``).

    ``metrics`` are accumulated on every integration step, not only on the
    recorded samples.
    """

    config: PlatoonConfig
    times: np.ndarray
    momentum: np.ndarray  # (samples, N)
    spacing_error: np.ndarray  # (samples, N)
    forces: np.ndarray  # (samples, N)
    hamiltonian: np.ndarray
    leader_velocity: np.ndarray
    energy_kind: str
    metrics: Metrics
    dt: float
    record_every: int = 1
    diverged: bool = False
    balance_residual: float = 0.0
    d_norm_sq: float = 0.0
    conv_tol: float = 0.01
    error_density: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def states(self) -> list[PlatoonState]:
        return [PlatoonState(p, d, t) for p, d, t in zip(self.momentum, self.spacing_error, self.times)]

    @property
    def relative_velocity(self) -> np.ndarray:
        return self.momentum / self.config.masses - self.leader_velocity[:, None]


def tail_estimate(times: np.ndarray, density: np.ndarray) -> float:
    """Integral beyond the last sample of an exponentially decaying density.

    The decay rate is read off the final decade: the span over which the
    density last fell by a factor of ten.  Returns ``inf`` when no such decay
    is visible and 0 when the density is already zero.
    """
    e_end = density[-1]
    if e_end <= 0:
        return 0.0
    above = np.flatnonzero(density >= 10.0 * e_end)
    if above.size == 0:
        return float("inf")
    span = times[-1] - times[above[-1]]
    if span <= 0:
        return float("inf")
    rate = math.log(10.0) / span
    return float(e_end / rate)


def _convergence_time(times: np.ndarray, err: np.ndarray, tol: float) -> float:
    bad = np.flatnonzero(err > tol)
    if bad.size == 0:
        return 0.0
    if bad[-1] == times.size - 1:
        return float("inf")
    return float(times[bad[-1] + 1])


def _bound(config: PlatoonConfig, kind: str, h_ref: float, d_norm_sq: float) -> float:
    if config.h_pos >= 1 or (kind == "H" and config.h_pos > 0):
        return float("nan")
    if d_norm_sq == 0:
        return h_ref
    return h_ref + disturbance_bound(config, math.sqrt(d_norm_sq))


def compute_metrics(trace: SimulationTrace, config: PlatoonConfig | None = None, conv_tol: float | None = None) -> Metrics:
    """Metrics from the recorded samples of ``trace``.

    With ``record_every == 1`` this reproduces the streamed metrics of
    :func:`simulate`; on a decimated trace it is a sampled approximation.
    """
    config = config or trace.config
    tol = trace.conv_tol if conv_tol is None else conv_tol
    if trace.diverged:
        return Metrics.divergent()
    if trace.times.size == 0:
        raise ValueError("empty trace")
    vt = trace.momentum / config.masses - trace.leader_velocity[:, None]
    dl = trace.spacing_error
    err = np.maximum(np.abs(dl).max(axis=1), np.abs(vt).max(axis=1))
    density = np.sum(dl * dl + vt * vt, axis=1)
    h_ref = trace.hamiltonian[0]
    jumps = np.flatnonzero(np.diff(trace.leader_velocity) != 0)
    return Metrics(
        h_max=float(trace.hamiltonian.max()),
        theoretical_bound=_bound(config, trace.energy_kind, h_ref, trace.d_norm_sq)
        if jumps.size == 0
        else float("nan"),
        max_overshoot=float(dl.max()),
        max_control_effort=float(trace.forces.max()),
        convergence_time=_convergence_time(trace.times, err, tol),
        total_error=float(np.trapezoid(density, trace.times)),
        total_error_tail=tail_estimate(trace.times, density),
        peak_state=float(max(np.abs(vt * config.masses).max(), np.abs(dl).max())),
        diverged=False,
    )


def _simulate_once(config, leader, dist, t_end, dt, initial, energy, record_every, max_samples, conv_tol):
    n = config.n
    nsteps = max(1, int(round(t_end / dt)))
    dt = t_end / nsteps
    if record_every is None:
        record_every = max(1, math.ceil(nsteps / max_samples))
    nrec = nsteps // record_every + 2
    cs = build_coupling_set(config)
    wp, wd, kind = energy_weights(config, energy)
    v_before, v_after, step_time = leader._before_after()
    p = np.array(initial.momentum, dtype=float)
    dl = np.array(initial.spacing_error, dtype=float)
    rec = dict(
        rec_t=np.empty(nrec),
        rec_p=np.empty((nrec, n)),
        rec_d=np.empty((nrec, n)),
        rec_f=np.empty((nrec, n)),
        rec_h=np.empty(nrec),
        rec_e=np.empty(nrec),
        rec_v0=np.empty(nrec),
    )
    stats = np.zeros(K.N_STATS)
    K.run_rk4(
        p, dl, np.array(config.masses), np.array(config.stiffness),
        np.array(cs.vel_lower), np.array(cs.vel_diag), np.array(cs.vel_upper),
        np.array(cs.pos_diag), np.array(cs.pos_upper), wp, wd,
        float(v_before), float(v_after), float(step_time),
        1 if dist.kind == "momentum_aligned" else 0,
        0 if dist.alignment == "momentum" else 1,
        float(dist.t_f), dist.seed(n),
        float(dt), int(nsteps), int(record_every), float(conv_tol),
        rec["rec_t"], rec["rec_p"], rec["rec_d"], rec["rec_f"], rec["rec_h"], rec["rec_e"], rec["rec_v0"],
        stats,
    )
    m = int(stats[K.N_REC])
    diverged = bool(stats[K.DIVERGED])
    times = rec["rec_t"][:m]
    steps = int(stats[K.STEPS])
    t_last = steps * dt
    d_sq = float(stats[K.D_SQ])
    if diverged:
        metrics = Metrics.divergent()
        residual = float("nan")
    else:
        h_end = rec["rec_h"][m - 1]
        h_max = float(stats[K.H_MAX])
        residual = abs(h_end - stats[K.H0] - stats[K.JUMPS] - stats[K.WORK]) / (t_last * max(1.0, h_max))
        last_bad = int(stats[K.LAST_BAD])
        if last_bad < 0:
            conv = 0.0
        elif last_bad >= steps:
            conv = float("inf")
        else:
            conv = (last_bad + 1) * dt
        has_jump = v_before != v_after and step_time > 0.5 * dt
        metrics = Metrics(
            h_max=h_max,
            theoretical_bound=float("nan") if has_jump else _bound(config, kind, float(stats[K.H0]), d_sq),
            max_overshoot=float(stats[K.MAX_DELTA]),
            max_control_effort=float(stats[K.MAX_FORCE]),
            convergence_time=conv,
            total_error=float(stats[K.TOTAL_ERR]),
            total_error_tail=tail_estimate(times, rec["rec_e"][:m]),
            peak_state=float(stats[K.PEAK]),
            diverged=False,
        )
    return SimulationTrace(
        config=config,
        times=times,
        momentum=rec["rec_p"][:m],
        spacing_error=rec["rec_d"][:m],
        forces=rec["rec_f"][:m],
        hamiltonian=rec["rec_h"][:m],
        leader_velocity=rec["rec_v0"][:m],
        energy_kind=kind,
        metrics=metrics,
        dt=dt,
        record_every=record_every,
        diverged=diverged,
        balance_residual=residual,
        d_norm_sq=d_sq,
        conv_tol=conv_tol,
        error_density=rec["rec_e"][:m],
    )


def _simulate_python(config, leader, dist, t_end, dt, initial, energy, record_every, conv_tol):
    """Reference path: numpy RK4 via :func:`step_dynamics` (custom profiles)."""
    nsteps = max(1, int(round(t_end / dt)))
    dt = t_end / nsteps
    record_every = record_every or 1
    cs = build_coupling_set(config)
    wp, wd, kind = energy_weights(config, energy)
    state = PlatoonState(initial.momentum, initial.spacing_error, 0.0)
    times, ps, ds, fs, hs, vs = [], [], [], [], [], []
    d_sq = 0.0
    diverged = False
    seed = dist.seed(config.n) if dist.kind != "custom_profile" else None
    v_before, v_after, step_time = leader._before_after()

    def energy_of(s, v0):
        pt = s.momentum - config.masses * v0
        return float(0.5 * np.sum(wp * pt * pt / config.masses) + 0.5 * np.sum(wd * config.stiffness * s.spacing_error**2))

    for k in range(nsteps + 1):
        t = k * dt
        v0 = v_after if t >= step_time - 0.5 * dt else v_before
        if k % record_every == 0 or k == nsteps:
            times.append(t)
            ps.append(state.momentum)
            ds.append(state.spacing_error)
            fs.append(control_force(config, state, v0, cs))
            hs.append(energy_of(state, v0))
            vs.append(v0)
        if k == nsteps:
            break
        if dist.kind == "none":
            d = np.zeros(config.n)
        elif dist.kind == "custom_profile":
            d = np.asarray(dist.profile(t, state), dtype=float)
        else:
            active = t < dist.t_f - 0.5 * dt

            def d(_t, p, dl, active=active, v0=v0):
                if not active:
                    return np.zeros(config.n)
                return worst_case_disturbance(PlatoonState(p, dl), 0.0, dist.t_f, config, v0, seed, dist.alignment)

        if not callable(d):
            d_sq += dt * float(d @ d)
        elif active:
            d_sq += dt / dist.t_f
        try:
            state = step_dynamics(config, state, v0, d, dt, cs)
        except DivergenceError:
            diverged = True
            break
    trace = SimulationTrace(
        config=config,
        times=np.array(times),
        momentum=np.array(ps),
        spacing_error=np.array(ds),
        forces=np.array(fs),
        hamiltonian=np.array(hs),
        leader_velocity=np.array(vs),
        energy_kind=kind,
        metrics=None,  # type: ignore[arg-type]
        dt=dt,
        record_every=record_every,
        diverged=diverged,
        d_norm_sq=d_sq,
        conv_tol=conv_tol,
    )
    trace.metrics = compute_metrics(trace, config)
    return trace


def simulate(
    config: PlatoonConfig,
    leader: LeaderSpec,
    dist: DisturbanceSpec,
    t_end: float,
    dt: float = 1e-2,
    initial: PlatoonState | None = None,
    energy: EnergyKind = "auto",
    record_every: int | None = None,
    max_samples: int = 4000,
    conv_tol: float = 0.01,
    refine: bool = True,
    balance_tol: float = 1e-6,
    max_halvings: int = 4,
    engine: Literal["compiled", "numpy"] = "compiled",
) -> SimulationTrace:
    """Integrate the closed loop from ``initial`` (default: all states zero).

    With ``refine`` the step is halved until the energy-balance residual,
    ``|H(T) - H(0) - jumps - work| / (T * max(1, H_max))``, is below
    ``balance_tol``.  Divergent runs are returned truncated with
    ``diverged=True`` and infinite metrics.  ``engine="numpy"`` (implied by
    a custom disturbance profile) uses :func:`step_dynamics` at the given
    ``dt`` without refinement and records ``record_every`` steps (default 1).
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    initial = initial or PlatoonState.zeros(config.n)
    if initial.momentum.shape != (config.n,):
        raise ValueError("initial state has the wrong size")
    if engine not in ("compiled", "numpy"):
        raise ValueError(f"unknown engine {engine!r}")
    if dist.kind == "custom_profile" or engine == "numpy":
        return _simulate_python(config, leader, dist, t_end, dt, initial, energy, record_every, conv_tol)
    for _ in range(max_halvings + 1):
        trace = _simulate_once(config, leader, dist, t_end, dt, initial, energy, record_every, max_samples, conv_tol)
        if trace.diverged or not refine or trace.balance_residual < balance_tol:
            break
        log.info("energy residual %.2e at dt=%g; halving", trace.balance_residual, dt)
        dt /= 2
    if trace.diverged:
        log.info("run diverged at t=%g (n=%d)", trace.times[-1], config.n)
    return trace
