"""Singular values and eigenvalues that govern disturbance amplification.

The workhorse is :func:`smallest_singular_value`, which runs inverse
iteration on ``M^T M`` using banded LU solves.  Because it only ever applies
``M^{-1}``, the answer is the reciprocal of the *largest* singular value of the
inverse, which is resolved to relative accuracy even when ``sigma_min`` is
many orders of magnitude below ``sigma_max`` (graded ``E L_p`` matrices).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .model import ConfigError, PlatoonConfig, Regime, build_coupling_set, classify_regime, incidence

log = logging.getLogger(__name__)


def _bandwidths(mat: np.ndarray) -> tuple[int, int]:
    rows, cols = np.nonzero(mat)
    if rows.size == 0:
        return 0, 0
    offs = cols - rows
    return int(max(0, -offs.min())), int(max(0, offs.max()))


def _to_band(mat: np.ndarray, lo: int, up: int) -> np.ndarray:
    n = mat.shape[0]
    ab = np.zeros((lo + up + 1, n))
    for k in range(-lo, up + 1):
        d = np.diagonal(mat, k)
        if k >= 0:
            ab[up - k, k:] = d
        else:
            ab[up - k, : n + k] = d
    return ab


def smallest_singular_value(
    mat: np.ndarray, method: str = "inverse", rtol: float = 1e-12, max_iter: int = 2000
) -> float:
    """Smallest singular value of a square matrix.

    ``method="inverse"`` (default) iterates ``x <- M^{-1} M^{-T} x`` with
    banded LU solves and returns ``1 / sqrt(lambda_max((M^T M)^{-1}))``; it
    stops once the eigen-residual is below ``rtol`` relative, which puts the
    returned value well inside 1e-9 relative.  ``method="dense"`` is a plain
    LAPACK SVD, kept as a cross-check for small matrices.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix has non-finite entries")
    n = mat.shape[0]
    if method == "dense":
        return float(np.linalg.svd(mat, compute_uv=False).min())
    if method != "inverse":
        raise ValueError(f"unknown method {method!r}")

    lo, up = _bandwidths(mat)
    if lo + up + 1 < n // 2:
        return banded_smallest_singular_value((lo, up), _to_band(mat, lo, up), rtol, max_iter)
    try:
        lu = sla.lu_factor(mat, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError):
        return 0.0

    def solve(x):
        return sla.lu_solve(lu, x, check_finite=False)

    def solve_t(x):
        return sla.lu_solve(lu, x, trans=1, check_finite=False)

    sigma = _inverse_iteration(solve, solve_t, n, rtol, max_iter)
    return float(np.linalg.svd(mat, compute_uv=False).min()) if sigma is None else sigma


def _band_transpose(lu_widths: tuple[int, int], ab: np.ndarray) -> np.ndarray:
    lo, up = lu_widths
    n = ab.shape[1]
    abt = np.zeros_like(ab)
    for k in range(-lo, up + 1):
        # diagonal k of M becomes diagonal -k of M^T
        if k >= 0:
            abt[lo + k, : n - k] = ab[up - k, k:]
        else:
            abt[lo + k, -k:] = ab[up - k, : n + k]
    return abt


def banded_smallest_singular_value(
    lu_widths: tuple[int, int], ab: np.ndarray, rtol: float = 1e-12, max_iter: int = 2000
) -> float:
    """:func:`smallest_singular_value` for a matrix given in LAPACK band
    layout (``ab[up + i - j, j] = M[i, j]``), without forming it densely."""
    lo, up = lu_widths
    n = ab.shape[1]
    abt = _band_transpose(lu_widths, ab)

    def solve(x):
        return sla.solve_banded((lo, up), ab, x, check_finite=False)

    def solve_t(x):
        return sla.solve_banded((up, lo), abt, x, check_finite=False)

    sigma = _inverse_iteration(solve, solve_t, n, rtol, max_iter)
    if sigma is None:
        dense = np.zeros((n, n))
        for k in range(-lo, up + 1):
            idx = np.arange(max(0, -k), min(n, n - k))
            dense[idx, idx + k] = ab[up - k, idx + k]
        return float(np.linalg.svd(dense, compute_uv=False).min())
    return sigma


def _inverse_iteration(solve, solve_t, n: int, rtol: float, max_iter: int) -> float | None:
    """Power iteration on ``M^{-1} M^{-T}``; ``None`` if it fails to converge."""
    x = np.random.default_rng(12345).standard_normal(n)
    x /= np.linalg.norm(x)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            for _ in range(max_iter):
                # normalise between the two solves so tiny sigma cannot overflow
                y = solve(x)
                ny = np.linalg.norm(y)
                w = solve_t(y / ny)
                nw = np.linalg.norm(w)
                z = w / nw
                c = float(x @ z)
                if c > 0 and np.linalg.norm(z - c * x) <= rtol * c:
                    return 1.0 / math.sqrt(ny * nw)
                x = z
        except (FloatingPointError, ValueError, np.linalg.LinAlgError, sla.LinAlgError):
            # exactly or numerically singular
            return 0.0
    log.warning("inverse iteration did not converge (n=%d); using dense SVD", n)
    return None


def pinned_laplacian_eigenvalues(n: int) -> np.ndarray:
    """Closed-form spectrum of the pinned path Laplacian ``B B^T``, ascending."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(1, n + 1)
    return 4.0 * np.sin((2 * i - 1) * np.pi / (4 * n + 2)) ** 2


def pinned_laplacian_eigenvalues_numeric(n: int) -> np.ndarray:
    """Eigenvalues of ``B B^T`` by Sturm-sequence bisection on the tridiagonal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    diag = np.full(n, 2.0)
    diag[-1] = 1.0
    off = np.full(n - 1, -1.0)
    if n == 1:
        return diag.copy()
    return sla.eigh_tridiagonal(diag, off, eigvals_only=True, lapack_driver="stebz")


def governing_matrix(config: PlatoonConfig) -> np.ndarray:
    """``L_p`` when ``h_pos == 0``, otherwise ``E L_p`` (needs ``h_pos < 1``)."""
    cs = build_coupling_set(config)
    if config.h_pos == 0:
        return cs.vel_laplacian
    if config.h_pos >= 1:
        raise ConfigError("E L_p is undefined for h_pos >= 1")
    return cs.e_diag[:, None] * cs.vel_laplacian


def governing_sigma_min(config: PlatoonConfig) -> float:
    """Smallest singular value entering the disturbance bound."""
    if config.h_pos >= 1:
        raise ConfigError("E L_p is undefined for h_pos >= 1")
    cs = build_coupling_set(config)
    name = "vel_laplacian" if config.h_pos == 0 else "scaled_vel_laplacian"
    if config.n < 3:
        return smallest_singular_value(governing_matrix(config))
    return banded_smallest_singular_value(*cs.banded(name))


def sigma_lower_bound(config: PlatoonConfig) -> float:
    """Analytic lower bound on ``sigma_min(L_p)`` for symmetric position coupling:
    ``r_min * sqrt(1/(16 N^4) + h_v^2 * min(1, 1/h_v) / N^2)``."""
    if config.h_pos > 0:
        raise ConfigError("lower bound applies only to h_pos == 0")
    h = config.h_vel
    gamma = 1.0 if h == 0 else min(1.0, 1.0 / h)
    n = float(config.n)
    return float(config.damping.min()) * math.sqrt(1.0 / (16.0 * n**4) + h * h * gamma / n**2)


def apav_sigma_envelope(config: PlatoonConfig) -> float:
    """Upper envelope ``rho**(N-1) * 4 * r_max`` on ``sigma_min(E L_p)``."""
    if not 0 < config.h_pos < 1:
        raise ConfigError(f"envelope needs 0 < h_pos < 1, got {config.h_pos}")
    return config.rho ** (config.n - 1) * 4.0 * float(config.damping.max())


def _loglog_fit(x, y) -> float:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def scaling_exponent_fit(ns: Sequence[float], sigmas: Sequence[float], min_points: int = 5) -> float:
    """Least-squares slope of ``log sigma`` against ``log N``."""
    ns = np.asarray(ns, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if ns.shape != sigmas.shape or ns.ndim != 1:
        raise ValueError("ns and sigmas must be 1-d of equal length")
    if ns.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {ns.size}")
    if np.any(ns <= 0) or np.any(sigmas <= 0) or not np.all(np.isfinite(sigmas)):
        raise ValueError("inputs must be finite and positive")
    return _loglog_fit(ns, sigmas)


def local_slopes(ns: Sequence[float], values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Centred log-log derivative; returns (geometric mid-N, slope) pairs."""
    ln, lv = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    slope = np.diff(lv) / np.diff(ln)
    mid = np.exp(0.5 * (ln[1:] + ln[:-1]))
    return mid, slope


def crossover_length(ns: Sequence[float], values: Sequence[float], level: float = -1.5) -> float:
    """N at which the local log-log slope first rises through ``level``
    (linear interpolation in log N); ``nan`` if it never does."""
    mid, slope = local_slopes(ns, values)
    for k in range(1, slope.size):
        if slope[k - 1] < level <= slope[k]:
            w = (level - slope[k - 1]) / (slope[k] - slope[k - 1])
            return float(np.exp(np.log(mid[k - 1]) + w * (np.log(mid[k]) - np.log(mid[k - 1]))))
    return float("nan")


def leading_toeplitz(h_vel: float, size: int) -> np.ndarray:
    """Tridiagonal Toeplitz block of ``(B + h|B|) B^T``: 2 on the diagonal,
    ``-(1-h)`` above and ``-(1+h)`` below."""
    return (
        2.0 * np.eye(size)
        - (1 - h_vel) * np.eye(size, k=1)
        - (1 + h_vel) * np.eye(size, k=-1)
    )


def unit_damping_matrix(h_vel: float, n: int) -> np.ndarray:
    """``(B + h|B|) B^T`` built from the incidence matrix."""
    b = incidence(n)
    return (b + h_vel * np.abs(b)) @ b.T


@dataclass(frozen=True)
class SymbolAnalysis:
    h_vel: float
    zero_order: int
    derivative_at_one: float


def toeplitz_symbol(h_vel: float, t: complex) -> complex:
    return -(1 - h_vel) / t + 2 - (1 + h_vel) * t


def toeplitz_symbol_order(h_vel: float) -> SymbolAnalysis:
    """Order of the zero at ``t = 1`` of ``a(t) = -(1-h)/t + 2 - (1+h) t``."""
    if h_vel < 0:
        raise ValueError("h_vel must be >= 0")
    # a(1) = 0 for every h; a'(1) = (1-h) - (1+h) = -2h; a''(1) = -2(1-h)
    d1 = (1 - h_vel) - (1 + h_vel)
    return SymbolAnalysis(h_vel=h_vel, zero_order=1 if d1 != 0 else 2, derivative_at_one=d1)


@dataclass(frozen=True)
class ScalingBound:
    n: int
    sigma_min: float
    lower_bound: float | None
    upper_proxy: float | None
    regime: Regime


def scaling_bound(config: PlatoonConfig) -> ScalingBound:
    regime = classify_regime(config).regime
    lower = sigma_lower_bound(config) if config.h_pos == 0 else None
    upper = apav_sigma_envelope(config) if 0 < config.h_pos < 1 else None
    return ScalingBound(
        n=config.n,
        sigma_min=governing_sigma_min(config),
        lower_bound=lower,
        upper_proxy=upper,
        regime=regime,
    )


SIGMA_SCAN_HEADER = ("n", "h_vel", "h_pos", "sigma_min", "lemma1_lower", "apav_envelope")


def sigma_scan_rows(
    ns: Iterable[int], h_vels: Iterable[float], h_poss: Iterable[float] = (0.0,), base: PlatoonConfig | None = None
) -> list[dict]:
    """One row per (N, h_vel, h_pos); empty strings where a bound does not apply."""
    rows = []
    for hx in h_poss:
        for hv in h_vels:
            for n in ns:
                cfg = (base or PlatoonConfig.uniform(n)).replace(n=n, h_vel=hv, h_pos=hx)
                sb = scaling_bound(cfg)
                rows.append(
                    {
                        "n": n,
                        "h_vel": hv,
                        "h_pos": hx,
                        "sigma_min": sb.sigma_min,
                        "lemma1_lower": "" if sb.lower_bound is None else sb.lower_bound,
                        "apav_envelope": "" if sb.upper_proxy is None else sb.upper_proxy,
                    }
                )
    return rows
