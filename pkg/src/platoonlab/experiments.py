"""Scripted sweeps that regenerate the scaling figures as CSV plus a plotting
script.

Exponents are least-squares fits on log-transformed data restricted to the
upper half of the N range (the laws are asymptotic); growth rates for the
exponential regime use log-linear fits over the same points.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .model import CONFIG_KEYS, ConfigError, PlatoonConfig, Regime, classify_regime, config_from_mapping, load_toml
from .sim import DisturbanceSpec, LeaderSpec, Metrics, simulate
from .spectral import SIGMA_SCAN_HEADER, crossover_length, sigma_scan_rows
from .stability import STABILITY_MAP_HEADER, default_grid, stability_map

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "n", "h_vel", "h_pos", "t_f", "h_max", "bound", "max_overshoot",
    "max_force", "conv_time", "total_error", "diverged",
)
TRACE_HEADER = ("t", "vehicle", "delta", "vel_err", "force")

KINDS = ("sigma_scan", "hmax_scan", "transient", "metrics_scan", "stability_map")

# reference settling-time curves; simulation horizons are 4x these
SETTLING_SCALE: dict[Regime, Callable[[int], float]] = {
    Regime.SPSV: lambda n: 2.0 * n * n,
    Regime.SPAV: lambda n: 5.0 * n,
    Regime.APAV: lambda n: 1.5 * n,
}

# h_vel, h_pos of the three transient cases
TRANSIENT_CASES = {
    Regime.SPSV: (0.0, 0.0),
    Regime.SPAV: (0.5, 0.0),
    Regime.APAV: (0.5, 0.2),
}


class ExperimentError(RuntimeError):
    pass


class UnexpectedDivergence(ExperimentError):
    pass


@dataclass
class ExperimentSpec:
    kind: str
    base_config: PlatoonConfig
    output_dir: Path
    ns: list[int] = field(default_factory=list)
    h_vels: list[float] = field(default_factory=list)
    h_poss: list[float] = field(default_factory=list)
    t_fs: list[float] = field(default_factory=list)
    dt: float = 1e-2
    t_end: float | None = None
    n_max: int = 15
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExperimentError(f"unknown experiment kind {self.kind!r}")
        defaults = DEFAULT_SWEEPS[self.kind]
        for attr in ("ns", "h_vels", "h_poss", "t_fs"):
            if not getattr(self, attr):
                setattr(self, attr, list(defaults[attr]))
        for attr in ("ns", "h_vels", "h_poss", "t_fs"):
            if not getattr(self, attr):
                raise ExperimentError(f"sweep list {attr} is empty")
        if any(int(n) != n or n < 1 for n in self.ns):
            raise ExperimentError("sweep n values must be positive integers")
        self.ns = [int(n) for n in self.ns]
        self.output_dir = Path(self.output_dir)


DEFAULT_SWEEPS: dict[str, dict[str, list]] = {
    "sigma_scan": {
        "ns": [10, 20, 30, 50, 75, 100, 150, 200, 250, 300, 400, 500],
        "h_vels": [0.0, 0.2, 0.5, 1.0, 2.0],
        "h_poss": [0.0],
        "t_fs": [0.0],
    },
    "hmax_scan": {
        "ns": [25, 50, 100],
        "h_vels": [0.0, 0.5],
        "h_poss": [0.0],
        "t_fs": [200.0, 1000.0, 5000.0],
    },
    "transient": {"ns": [150], "h_vels": [0.5], "h_poss": [0.2], "t_fs": [0.0]},
    "metrics_scan": {"ns": [25, 50, 100, 150], "h_vels": [0.5], "h_poss": [0.2], "t_fs": [0.0]},
    "stability_map": {
        "ns": [15],
        "h_vels": list(default_grid()),
        "h_poss": list(default_grid()),
        "t_fs": [0.0],
    },
}


def load_experiment(path: str | os.PathLike | None, kind: str, output_dir: str | os.PathLike, **overrides) -> ExperimentSpec:
    """Read a TOML experiment file: platoon keys at top level, optional
    ``[sweep]`` (``n``, ``h_vel``, ``h_pos``, ``t_f``) and ``[run]``
    (``dt``, ``t_end``, ``n_max``, ``workers``) tables."""
    data: dict[str, Any] = load_toml(path) if path else {}
    sweep = data.pop("sweep", {}) or {}
    run = data.pop("run", {}) or {}
    extra = {k for k, v in data.items() if isinstance(v, dict)}
    if extra:
        raise ConfigError(f"unknown tables: {sorted(extra)}")
    cfg_data = {k: v for k, v in data.items() if k in CONFIG_KEYS}
    cfg_data.setdefault("n", 1)
    base = config_from_mapping(cfg_data)
    bad_sweep = set(sweep) - {"n", "h_vel", "h_pos", "t_f"}
    bad_run = set(run) - {"dt", "t_end", "n_max", "workers"}
    if bad_sweep or bad_run:
        raise ConfigError(f"unknown keys: {sorted(bad_sweep | bad_run)}")

    def as_list(v):
        return list(v) if isinstance(v, (list, tuple)) else [v]

    kw: dict[str, Any] = dict(
        kind=kind,
        base_config=base,
        output_dir=Path(output_dir),
        ns=as_list(sweep["n"]) if "n" in sweep else [],
        h_vels=[float(x) for x in as_list(sweep["h_vel"])] if "h_vel" in sweep else [],
        h_poss=[float(x) for x in as_list(sweep["h_pos"])] if "h_pos" in sweep else [],
        t_fs=[float(x) for x in as_list(sweep["t_f"])] if "t_f" in sweep else [],
    )
    for key in ("dt", "t_end", "n_max", "workers"):
        if key in run:
            kw[key] = run[key]
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**kw)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def upper_half(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Points whose N lies in the upper half of the (sorted) sweep."""
    order = np.argsort(xs)
    xs, ys = np.asarray(xs, float)[order], np.asarray(ys, float)[order]
    k = len(xs) // 2
    if len(xs) - k < 2:
        k = max(0, len(xs) - 2)
    return xs[k:], ys[k:]


def fit_exponent(ns: Sequence[float], values: Sequence[float]) -> float:
    """Log-log least-squares slope over the upper half of the N range."""
    x, y = upper_half(ns, values)
    if x.size < 2 or np.any(y <= 0) or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def fit_rate(ns: Sequence[float], values: Sequence[float]) -> float:
    """Log-linear slope (growth rate per vehicle) over the upper half."""
    x, y = upper_half(ns, values)
    if x.size < 2 or np.any(y <= 0) or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(x, np.log(y), 1)[0])


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _metrics_row(cfg: PlatoonConfig, t_f: float, m: Metrics) -> dict:
    return {
        "n": cfg.n,
        "h_vel": cfg.h_vel,
        "h_pos": cfg.h_pos,
        "t_f": t_f,
        "h_max": m.h_max,
        "bound": m.theoretical_bound,
        "max_overshoot": m.max_overshoot,
        "max_force": m.max_control_effort,
        "conv_time": m.convergence_time,
        "total_error": m.total_error,
        "diverged": m.diverged,
    }


# --- sigma scan -------------------------------------------------------------

SIGMA_PLOT = '''"""Plot sigma_min against N (log-log) from sigma_scan.csv."""
import csv, collections
import matplotlib.pyplot as plt

curves = collections.defaultdict(list)
with open("sigma_scan.csv") as fh:
    for row in csv.DictReader(fh):
        curves[float(row["h_vel"])].append((int(row["n"]), float(row["sigma_min"])))
fig, ax = plt.subplots()
for h, pts in sorted(curves.items()):
    pts.sort()
    ax.loglog(*zip(*pts), label=f"h_vel={h:g}")
ns = sorted({n for pts in curves.values() for n, _ in pts})
ax.loglog(ns, [1 / n for n in ns], "k--", label="1/N")
ax.loglog(ns, [1 / n**2 for n in ns], "k:", label="1/N^2")
ax.set_xlabel("N")
ax.set_ylabel("sigma_min")
ax.legend()
fig.savefig("sigma_scan.png", dpi=150)
'''


def run_sigma_scan(spec: ExperimentSpec) -> dict:
    if any(h != 0 for h in spec.h_poss):
        raise ExperimentError("sigma scan expects h_pos = 0")
    rows = sigma_scan_rows(spec.ns, spec.h_vels, spec.h_poss, spec.base_config)
    out = spec.output_dir
    csv_path = write_csv(out / "sigma_scan.csv", SIGMA_SCAN_HEADER, rows)
    (out / "plot_sigma_scan.py").write_text(SIGMA_PLOT)
    summary = {}
    for h in spec.h_vels:
        sel = [r for r in rows if r["h_vel"] == h]
        ns = [r["n"] for r in sel]
        sig = [r["sigma_min"] for r in sel]
        summary[repr(h)] = {
            "slope": fit_exponent(ns, sig),
            "crossover_n": crossover_length(ns, sig) if len(ns) > 2 else float("nan"),
        }
    _write_summary(out / "sigma_scan_summary.json", summary)
    return {"csv": csv_path, "summary": summary}


# --- worst-case disturbance / H_max -----------------------------------------

HMAX_PLOT = '''"""H_max against N for every disturbance duration, with the bound."""
import csv, collections
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("metrics.csv")))
for h in sorted({r["h_vel"] for r in rows}):
    fig, ax = plt.subplots()
    sel = [r for r in rows if r["h_vel"] == h]
    by_tf = collections.defaultdict(list)
    for r in sel:
        by_tf[float(r["t_f"])].append((int(r["n"]), float(r["h_max"]), float(r["bound"])))
    for tf, pts in sorted(by_tf.items()):
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], label=f"T_f={tf:g}")
    ax.loglog([p[0] for p in pts], [p[2] for p in pts], "k--", label="bound")
    ax.set_xlabel("N")
    ax.set_ylabel("max H")
    ax.set_title(f"h_vel={h}")
    ax.legend()
    fig.savefig(f"hmax_hvel_{h}.png", dpi=150)
'''


def _hmax_job(job):
    cfg, t_f, dt = job
    dist = DisturbanceSpec(kind="momentum_aligned", t_f=t_f)
    # after t_f the disturbance is off and H cannot grow, so the run stops there
    trace = simulate(cfg, LeaderSpec("constant", 0.0), dist, t_end=t_f, dt=dt, max_samples=10)
    return cfg, t_f, trace.metrics


def hmax_rows(spec: ExperimentSpec) -> list[dict]:
    jobs = []
    for hv in spec.h_vels:
        for hx in spec.h_poss:
            if hx != 0:
                raise ExperimentError("H_max scan covers h_pos = 0 only")
            for n in spec.ns:
                cfg = spec.base_config.replace(n=n, h_vel=hv, h_pos=hx, leader_velocity=0.0)
                if hv > 0 and not cfg.monotone_damping_ok:
                    log.warning("damping not nonincreasing; bound may not hold (h_vel=%g)", hv)
                for tf in spec.t_fs:
                    jobs.append((cfg, float(tf), spec.dt))
    results = _map(_hmax_job, jobs, spec.workers)
    rows = [_metrics_row(cfg, tf, m) for cfg, tf, m in results]
    rows.sort(key=lambda r: (r["h_vel"], r["h_pos"], r["n"], r["t_f"]))
    return rows


def hmax_envelope(rows: list[dict], h_vel: float) -> tuple[list[int], list[float]]:
    """Largest H_max over all disturbance durations, per N."""
    ns = sorted({r["n"] for r in rows if r["h_vel"] == h_vel})
    env = [max(r["h_max"] for r in rows if r["h_vel"] == h_vel and r["n"] == n) for n in ns]
    return ns, env


def run_hmax_scan(spec: ExperimentSpec) -> dict:
    rows = hmax_rows(spec)
    if any(r["diverged"] for r in rows):
        raise UnexpectedDivergence("H_max scan diverged")
    out = spec.output_dir
    csv_path = write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    (out / "plot_hmax.py").write_text(HMAX_PLOT)
    summary = {}
    for hv in spec.h_vels:
        ns, env = hmax_envelope(rows, hv)
        summary[repr(hv)] = {
            "envelope_slope": fit_exponent(ns, env),
            "bound_violations": sum(1 for r in rows if r["h_vel"] == hv and r["h_max"] > r["bound"]),
        }
    _write_summary(out / "hmax_summary.json", summary)
    return {"csv": csv_path, "rows": rows, "summary": summary}


# --- leader step transients -------------------------------------------------

TRANSIENT_PLOT = '''"""Momentum and spacing-error panels of the leader-step response."""
import csv, collections
import matplotlib.pyplot as plt

for name in ("spsv", "spav", "apav"):
    try:
        rows = list(csv.DictReader(open(f"{name}/trace.csv")))
    except FileNotFoundError:
        continue
    series = collections.defaultdict(lambda: ([], [], []))
    for r in rows:
        t, v, d = series[int(r["vehicle"])]
        t.append(float(r["t"])); v.append(float(r["vel_err"]) + 1.0); d.append(float(r["delta"]))
    fig, (a1, a2) = plt.subplots(2, 1, sharex=True)
    for t, v, d in series.values():
        a1.plot(t, v, lw=0.5)
        a2.plot(t, d, lw=0.5)
    a1.set_ylabel("momentum")
    a2.set_ylabel("spacing error")
    a2.set_xlabel("t")
    fig.suptitle(name.upper())
    fig.savefig(f"transient_{name}.png", dpi=150)
'''


def transient_horizon(regime: Regime, n: int) -> float:
    return 4.0 * SETTLING_SCALE[regime](n)


def _transient_job(job):
    cfg, t_end, dt, max_samples = job
    trace = simulate(cfg, LeaderSpec("velocity_step", 1.0, 0.0), DisturbanceSpec(), t_end=t_end, dt=dt, max_samples=max_samples)
    return cfg, trace


def trace_rows(trace, max_rows_per_vehicle: int = 2000) -> Iterable[dict]:
    stride = max(1, math.ceil(trace.times.size / max_rows_per_vehicle))
    vel_err = trace.relative_velocity
    for k in range(0, trace.times.size, stride):
        t = trace.times[k]
        for i in range(trace.config.n):
            yield {
                "t": t,
                "vehicle": i + 1,
                "delta": trace.spacing_error[k, i],
                "vel_err": vel_err[k, i],
                "force": trace.forces[k, i],
            }


def run_transient(spec: ExperimentSpec) -> dict:
    n = spec.ns[0] if spec.ns else 150
    hv_asym = spec.h_vels[0]
    hx_asym = spec.h_poss[0]
    cases = {
        Regime.SPSV: (0.0, 0.0),
        Regime.SPAV: (hv_asym, 0.0),
        Regime.APAV: (hv_asym, hx_asym),
    }
    jobs = []
    for regime, (hv, hx) in cases.items():
        cfg = spec.base_config.replace(n=n, h_vel=hv, h_pos=hx)
        t_end = spec.t_end or transient_horizon(regime, n)
        jobs.append((cfg, t_end, spec.dt, 4000))
    results = _map(_transient_job, jobs, spec.workers)
    out = spec.output_dir
    rows, files = [], {}
    for (regime, _), (cfg, trace) in zip(cases.items(), results):
        files[regime.value] = write_csv(out / regime.value.lower() / "trace.csv", TRACE_HEADER, trace_rows(trace))
        rows.append(_metrics_row(cfg, 0.0, trace.metrics))
        if trace.diverged and regime is not Regime.APAV:
            raise UnexpectedDivergence(f"{regime.value} transient diverged")
    write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    (out / "plot_transient.py").write_text(TRANSIENT_PLOT)
    summary = {
        r.value: {
            "max_force": m["max_force"],
            "max_overshoot": m["max_overshoot"],
            "conv_time": m["conv_time"],
            "peak_state": tr.metrics.peak_state,
        }
        for r, m, (_, tr) in zip(cases, rows, results)
    }
    _write_summary(out / "transient_summary.json", summary)
    return {"files": files, "rows": rows, "summary": summary, "traces": {r: tr for r, (_, tr) in zip(cases, results)}}


# --- metric scaling ----------------------------------------------------------

METRICS_PLOT = '''"""Overshoot, control effort, convergence time and total error against N."""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("metrics.csv")))
cases = sorted({(r["h_vel"], r["h_pos"]) for r in rows})
fig, axes = plt.subplots(2, 2, figsize=(9, 7))
panels = [("max_overshoot", "semilogy"), ("max_force", "semilogy"), ("conv_time", "loglog"), ("total_error", "loglog")]
for ax, (key, kind) in zip(axes.flat, panels):
    for hv, hx in cases:
        sel = sorted((int(r["n"]), float(r[key])) for r in rows if (r["h_vel"], r["h_pos"]) == (hv, hx))
        getattr(ax, kind)(*zip(*sel), "o-", label=f"h_vel={hv}, h_pos={hx}")
    ax.set_title(key)
    ax.set_xlabel("N")
axes[0, 0].legend(fontsize=7)
fig.tight_layout()
fig.savefig("metrics_scan.png", dpi=150)
'''


def metrics_rows(spec: ExperimentSpec, cases: dict[Regime, tuple[float, float]] | None = None) -> list[dict]:
    if cases is None:
        hv, hx = spec.h_vels[0], spec.h_poss[0]
        cases = {Regime.SPSV: (0.0, 0.0), Regime.SPAV: (hv, 0.0), Regime.APAV: (hv, hx)}
    jobs = []
    for regime, (hv, hx) in cases.items():
        for n in spec.ns:
            cfg = spec.base_config.replace(n=n, h_vel=hv, h_pos=hx)
            jobs.append((cfg, spec.t_end or transient_horizon(regime, n), spec.dt, 200))
    results = _map(_transient_job, jobs, spec.workers)
    rows = []
    for cfg, trace in results:
        row = _metrics_row(cfg, 0.0, trace.metrics)
        row["regime"] = classify_regime(cfg).regime
        row["peak_state"] = trace.metrics.peak_state
        rows.append(row)
    rows.sort(key=lambda r: (r["h_vel"], r["h_pos"], r["n"]))
    return rows


def summarize_metrics(rows: list[dict]) -> dict:
    out = {}
    for regime in Regime:
        sel = [r for r in rows if r["regime"] is regime]
        if not sel:
            continue
        ns = [r["n"] for r in sel]
        entry = {
            "conv_time_exponent": fit_exponent(ns, [r["conv_time"] for r in sel]),
            "total_error_exponent": fit_exponent(ns, [r["total_error"] for r in sel]),
            "max_force": [r["max_force"] for r in sel],
            "max_overshoot": [r["max_overshoot"] for r in sel],
        }
        if regime is Regime.APAV:
            entry["total_error_rate"] = fit_rate(ns, [r["total_error"] for r in sel])
            entry["peak_state_rate"] = fit_rate(ns, [r["peak_state"] for r in sel])
        out[regime.value] = entry
    return out


def run_metrics_scan(spec: ExperimentSpec) -> dict:
    rows = metrics_rows(spec)
    for r in rows:
        if r["diverged"] and r["regime"] is not Regime.APAV:
            raise UnexpectedDivergence(f"{r['regime'].value} run diverged at n={r['n']}")
    out = spec.output_dir
    csv_path = write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    (out / "plot_metrics_scan.py").write_text(METRICS_PLOT)
    summary = summarize_metrics(rows)
    _write_summary(out / "metrics_summary.json", summary)
    return {"csv": csv_path, "rows": rows, "summary": summary}


# --- stability map -------------------------------------------------------------

STABILITY_PLOT = '''"""Maximal stable string length over (h_vel, h_pos) in discrete bands."""
import csv
import numpy as np
import matplotlib.pyplot as plt
from matplotlib.colors import BoundaryNorm, ListedColormap

rows = list(csv.DictReader(open("stability_map.csv")))
hv = sorted({float(r["h_vel"]) for r in rows})
hx = sorted({float(r["h_pos"]) for r in rows})
grid = np.zeros((len(hx), len(hv)))
for r in rows:
    n = int(r["n_stab"])
    grid[hx.index(float(r["h_pos"])), hv.index(float(r["h_vel"]))] = min(n, 11)
colors = plt.cm.rainbow(np.linspace(0, 1, 10)).tolist() + [[0, 0, 0, 1]]
cmap = ListedColormap(colors)
norm = BoundaryNorm(np.arange(0.5, 12.5), cmap.N)
fig, ax = plt.subplots()
im = ax.pcolormesh(hv, hx, grid, cmap=cmap, norm=norm, shading="nearest")
ax.plot([0, 1, max(hv)], [0, 1, 1], "r-", lw=2)
cb = fig.colorbar(im, ticks=range(1, 12))
cb.ax.set_yticklabels([str(k) for k in range(1, 11)] + [">10"])
ax.set_xlabel("h_vel")
ax.set_ylabel("h_pos")
fig.savefig("stability_map.png", dpi=150)
'''


def _stability_job(job):
    hv, h_poss, n_max = job
    return stability_map([hv], h_poss, n_max)


def run_stability_map(spec: ExperimentSpec) -> dict:
    jobs = [(float(hv), list(spec.h_poss), spec.n_max) for hv in spec.h_vels]
    rows = [r for chunk in _map(_stability_job, jobs, spec.workers) for r in chunk]
    rows.sort(key=lambda r: (r["h_vel"], r["h_pos"]))
    out = spec.output_dir
    csv_path = write_csv(out / "stability_map.csv", STABILITY_MAP_HEADER, rows)
    (out / "plot_stability_map.py").write_text(STABILITY_PLOT)
    anomalies = [(r["h_vel"], r["h_pos"], r["anomalies"]) for r in rows if r["anomalies"]]
    summary = {"cells": len(rows), "censored": sum(r["censored"] for r in rows), "anomalies": anomalies}
    _write_summary(out / "stability_map_summary.json", summary)
    return {"csv": csv_path, "rows": rows, "summary": summary}


def _write_summary(path: Path, summary: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")


RUNNERS = {
    "sigma_scan": run_sigma_scan,
    "hmax_scan": run_hmax_scan,
    "transient": run_transient,
    "metrics_scan": run_metrics_scan,
    "stability_map": run_stability_map,
}
