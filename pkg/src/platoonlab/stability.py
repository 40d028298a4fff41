"""Finite-string stability: transfer-function recursion, Routh test and the
closed-loop eigenvalue oracle.

With unit masses and gains, vehicle ``i < N`` obeys
``X_i = G^- X_{i-1} + G^+ X_{i+1}`` and the last one ``X_N = G_N X_{N-1}``.
Eliminating from the tail gives ``G_i = G^- / (1 - G^+ G_{i+1})``.  Every
``G_i`` shares the denominator ``s^2 + 2 s + 2`` of ``G^-`` and ``G^+``, and
that common factor is removed exactly; nothing else is cancelled.  The
denominator of ``G_1`` of an ``N``-vehicle string is then the continuant
``det(s^2 I + s L_p + L_x)``, the characteristic polynomial of the string.

Polynomials are coefficient arrays in ascending powers of ``s``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from .model import PlatoonConfig, closed_loop_matrix


class Verdict(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"


def _trim(c) -> np.ndarray:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return np.zeros(1)
    return c[: nz[-1] + 1].copy()


@dataclass(frozen=True)
class RationalTF:
    """``num(s) / den(s)`` with ascending coefficients; never auto-reduced."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num, den = _trim(self.num), _trim(self.den)
        if not np.all(np.isfinite(num)) or not np.all(np.isfinite(den)):
            raise ValueError("non-finite coefficients")
        if den.size == 1 and den[0] == 0:
            raise ZeroDivisionError("zero denominator polynomial")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def __call__(self, s):
        return P.polyval(s, self.num) / P.polyval(s, self.den)

    def __mul__(self, other: "RationalTF") -> "RationalTF":
        return RationalTF(P.polymul(self.num, other.num), P.polymul(self.den, other.den))

    def __add__(self, other: "RationalTF") -> "RationalTF":
        if _same(self.den, other.den):
            return RationalTF(P.polyadd(self.num, other.num), self.den)
        return RationalTF(
            P.polyadd(P.polymul(self.num, other.den), P.polymul(other.num, self.den)),
            P.polymul(self.den, other.den),
        )

    def __neg__(self) -> "RationalTF":
        return RationalTF(-self.num, self.den)

    def __sub__(self, other: "RationalTF") -> "RationalTF":
        return self + (-other)

    def inverse(self) -> "RationalTF":
        return RationalTF(self.den, self.num)

    @classmethod
    def constant(cls, value: float) -> "RationalTF":
        return cls(np.array([value]), np.array([1.0]))

    def poles(self) -> np.ndarray:
        return P.polyroots(self.den) if self.den.size > 1 else np.array([])


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.all(a == b))


def boundary_tfs(h_vel: float, h_pos: float) -> tuple[RationalTF, RationalTF, RationalTF]:
    """``(G^-, G^+, G_N)`` for unit masses and gains."""
    d0 = np.array([2.0, 2.0, 1.0])
    g_minus = RationalTF(np.array([1 + h_pos, 1 + h_vel]), d0)
    g_plus = RationalTF(np.array([1 - h_pos, 1 - h_vel]), d0)
    g_last = RationalTF(np.array([1 + h_pos, 1 + h_vel]), np.array([1 + h_pos, 1 + h_vel, 1.0]))
    return g_minus, g_plus, g_last


def recursion_step(g_next: RationalTF, g_minus: RationalTF, g_plus: RationalTF) -> RationalTF:
    """``G_i = (1 - G^+ G_{i+1})^{-1} G^-``.

    When ``G^-`` and ``G^+`` share a denominator ``d0`` (always the case for
    :func:`boundary_tfs`), the result is formed as
    ``n^- b / (d0 b - n^+ a)`` for ``G_{i+1} = a / b``, which is exactly what
    the generic product reduces to after removing that shared ``d0``.
    """
    a, b = g_next.num, g_next.den
    if _same(g_minus.den, g_plus.den):
        d0 = g_minus.den
        num = P.polymul(g_minus.num, b)
        den = P.polysub(P.polymul(d0, b), P.polymul(g_plus.num, a))
        return RationalTF(num, den)
    one = RationalTF.constant(1.0)
    return (one - g_plus * g_next).inverse() * g_minus


def string_tfs(h_vel: float, h_pos: float, n: int) -> list[RationalTF]:
    """``[G_1, ..., G_N]`` of an ``n``-vehicle string."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g_minus, g_plus, g_last = boundary_tfs(h_vel, h_pos)
    out = [g_last]
    for _ in range(n - 1):
        out.append(recursion_step(out[-1], g_minus, g_plus))
    return out[::-1]


def characteristic_polynomial(h_vel: float, h_pos: float, n: int) -> np.ndarray:
    """Denominator of ``G_1`` for an ``n``-vehicle string (degree ``2n``)."""
    return string_tfs(h_vel, h_pos, n)[0].den


def second_last_denominator(h_vel: float, h_pos: float) -> np.ndarray:
    """Closed-form quartic denominator of ``G_{N-1}``, ascending powers."""
    hv, hx = h_vel, h_pos
    return np.array(
        [
            (1 + hx) ** 2,
            2 * (1 + hv) * (1 + hx),
            3 + hx + (1 + hv) ** 2,
            3 + hv,
            1.0,
        ]
    )


def routh_array(poly) -> list[np.ndarray]:
    """Rows of the Routh array of ``poly`` (ascending coefficients).

    Construction stops at the first zero pivot; the returned list then ends
    with the row carrying that zero.
    """
    c = _trim(poly)[::-1]
    if c.size == 1 and c[0] == 0:
        raise ValueError("zero polynomial")
    c = c / c[0]
    deg = c.size - 1
    width = deg // 2 + 1
    r0 = np.zeros(width)
    r1 = np.zeros(width)
    r0[: c[0::2].size] = c[0::2]
    r1[: c[1::2].size] = c[1::2]
    rows = [r0, r1]
    scale = np.abs(c).max()
    for _ in range(deg - 1):
        prev, cur = rows[-2], rows[-1]
        if abs(cur[0]) <= 1e-12 * scale:
            break
        nxt = np.zeros(width)
        for j in range(width - 1):
            nxt[j] = (cur[0] * prev[j + 1] - prev[0] * cur[j + 1]) / cur[0]
        rows.append(nxt)
    return rows[: deg + 1]


def _routh_column(desc: np.ndarray) -> tuple[np.ndarray, bool]:
    """First column of the complete Routh array (descending coefficients,
    positive leading term) and whether a degenerate row occurred.

    An all-zero row is replaced by the derivative of its auxiliary polynomial;
    a lone zero pivot by a small positive ``eps``.
    """
    deg = desc.size - 1
    width = deg // 2 + 1
    prev = np.zeros(width)
    cur = np.zeros(width)
    prev[: desc[0::2].size] = desc[0::2]
    cur[: desc[1::2].size] = desc[1::2]
    scale = np.abs(desc).max()
    tol = 1e-12 * scale
    eps = 1e-7 * scale
    column = [prev[0]]
    degenerate = False
    for i in range(1, deg + 1):
        if np.all(np.abs(cur) <= tol):
            # auxiliary polynomial of order deg - i + 1 sits in ``prev``
            order = deg - i + 1
            cur = np.array([prev[j] * (order - 2 * j) for j in range(width)])
            degenerate = True
        if abs(cur[0]) <= tol:
            cur = cur.copy()
            cur[0] = eps
            degenerate = True
        column.append(cur[0])
        nxt = np.zeros(width)
        for j in range(width - 1):
            nxt[j] = (cur[0] * prev[j + 1] - prev[0] * cur[j + 1]) / cur[0]
        prev, cur = cur, nxt
    return np.array(column), degenerate


def hurwitz_stable(poly) -> Verdict:
    """Routh test.

    A negative coefficient already rules out stability.  Otherwise the full
    Routh array is built, with the auxiliary-polynomial rule for a row of
    zeros and the ``eps`` rule for a lone zero pivot.  Sign changes in the
    first column mean ``UNSTABLE``; none, but a degenerate row on the way,
    means roots on the imaginary axis (``MARGINAL``).
    """
    c = _trim(poly)
    if c.size == 1:
        if c[0] == 0:
            raise ValueError("zero polynomial")
        raise ValueError("degree must be >= 1")
    c = c / c[-1]
    if np.any(c < -1e-12 * np.abs(c).max()):
        return Verdict.UNSTABLE
    column, degenerate = _routh_column(c[::-1])
    if np.any(np.diff(np.sign(column)) != 0):
        return Verdict.UNSTABLE
    return Verdict.MARGINAL if degenerate else Verdict.STABLE


def two_vehicle_instability_bounds(h_vel: float) -> tuple[float, float | None]:
    """Thresholds on ``h_pos`` above which strings of two or more vehicles are
    unstable; the second exists only for ``h_vel > 1``."""
    h = h_vel
    b1 = (2 * h**4 + 12 * h**3 + 25 * h**2 + 30 * h + 11) / (3 * h**2 + 6 * h + 7)
    b2 = (h**3 + 5 * h**2 + 8 * h + 10) / (h - 1) if h > 1 else None
    return b1, b2


@dataclass
class StabilityReport:
    n: int
    h_vel: float
    h_pos: float
    stable: bool
    method: str
    verdict: Verdict = Verdict.STABLE
    witness: np.ndarray | complex | None = None
    n_stab: int | None = None
    anomalies: list[int] = field(default_factory=list)


EIG_MARGIN = 1e-9


def eigen_stable(config: PlatoonConfig) -> StabilityReport:
    """Stability from the spectrum of the ``2N x 2N`` closed-loop matrix.

    The matrix is strongly non-normal once ``rho**N`` is tiny, and dense
    eigenvalues then drift by far more than rounding (at ``h_vel = h_pos = 0.9``
    the computed abscissa is already 0.09 too large at ``N = 40``).  Up to
    ``N = 15`` it agrees with 50-digit eigenvalues to about 1e-9, apart from the
    exactly defective point ``h_vel = h_pos = 1``.
    """
    lam = np.linalg.eigvals(closed_loop_matrix(config))
    k = int(np.argmax(lam.real))
    worst = complex(lam[k])
    if worst.real < -EIG_MARGIN:
        verdict = Verdict.STABLE
    elif worst.real <= EIG_MARGIN:
        verdict = Verdict.MARGINAL
    else:
        verdict = Verdict.UNSTABLE
    return StabilityReport(
        n=config.n,
        h_vel=config.h_vel,
        h_pos=config.h_pos,
        stable=verdict is Verdict.STABLE,
        method="eigen",
        verdict=verdict,
        witness=worst,
    )


def routh_stable(h_vel: float, h_pos: float, n: int) -> StabilityReport:
    """Routh verdict on the recursion denominator of ``G_1`` (unit parameters)."""
    poly = characteristic_polynomial(h_vel, h_pos, n)
    verdict = hurwitz_stable(poly)
    return StabilityReport(
        n=n, h_vel=h_vel, h_pos=h_pos, stable=verdict is Verdict.STABLE,
        method="routh", verdict=verdict, witness=poly,
    )


def check_both(h_vel: float, h_pos: float, n: int) -> StabilityReport:
    """Run both tests; raises if they disagree on a non-marginal case."""
    r = routh_stable(h_vel, h_pos, n)
    e = eigen_stable(PlatoonConfig.uniform(n, h_vel=h_vel, h_pos=h_pos))
    if Verdict.MARGINAL in (r.verdict, e.verdict):
        verdict = Verdict.MARGINAL
    elif r.verdict != e.verdict:
        raise AssertionError(f"Routh {r.verdict} vs eigen {e.verdict} at h=({h_vel}, {h_pos}), n={n}")
    else:
        verdict = r.verdict
    return StabilityReport(
        n=n, h_vel=h_vel, h_pos=h_pos, stable=verdict is Verdict.STABLE, method="both",
        verdict=verdict, witness=r.witness if verdict is Verdict.UNSTABLE else e.witness,
    )


def max_stable_length(h_vel: float, h_pos: float, n_max: int = 15, base: PlatoonConfig | None = None) -> StabilityReport:
    """Scan N = 1..n_max with the eigenvalue oracle.

    ``n_stab`` is one below the first N that is not strictly stable (marginal
    counts as not stable).  Any stable N beyond that onset is listed in
    ``anomalies`` instead of being folded into ``n_stab``.
    """
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    base = base or PlatoonConfig.uniform(1)
    first_bad = None
    witness = None
    anomalies = []
    for n in range(1, n_max + 1):
        rep = eigen_stable(base.replace(n=n, h_vel=h_vel, h_pos=h_pos))
        if first_bad is None:
            if not rep.stable:
                first_bad = n
                witness = rep.witness
        elif rep.stable:
            anomalies.append(n)
    n_stab = n_max if first_bad is None else first_bad - 1
    return StabilityReport(
        n=n_max, h_vel=h_vel, h_pos=h_pos, stable=first_bad is None, method="eigen",
        verdict=Verdict.STABLE if first_bad is None else Verdict.UNSTABLE,
        witness=witness, n_stab=n_stab, anomalies=anomalies,
    )


def locate_flip(h_vel: float, n: int, lo: float, hi: float, method: str = "routh", tol: float = 1e-4) -> float:
    """Bisection on ``h_pos`` for the stable/unstable boundary in ``[lo, hi]``;
    ``lo`` must be stable and ``hi`` unstable."""

    def unstable(hx):
        if method == "routh":
            return routh_stable(h_vel, hx, n).verdict is Verdict.UNSTABLE
        return eigen_stable(PlatoonConfig.uniform(n, h_vel=h_vel, h_pos=hx)).verdict is Verdict.UNSTABLE

    if unstable(lo) or not unstable(hi):
        raise ValueError("interval does not bracket a stable-to-unstable flip")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if unstable(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


STABILITY_MAP_HEADER = ("h_vel", "h_pos", "n_stab", "censored")


def stability_map(h_vels, h_poss, n_max: int = 15) -> list[dict]:
    rows = []
    for hv in h_vels:
        for hx in h_poss:
            rep = max_stable_length(float(hv), float(hx), n_max)
            rows.append(
                {
                    "h_vel": float(hv),
                    "h_pos": float(hx),
                    "n_stab": rep.n_stab,
                    "censored": int(rep.n_stab == n_max),
                    "anomalies": rep.anomalies,
                }
            )
    return rows


def default_grid(step: float = 0.05, top: float = 3.0) -> np.ndarray:
    k = int(round(top / step))
    return np.round(np.arange(k + 1) * step, 10)


def poly_roots_max_real(poly) -> float:
    r = P.polyroots(_trim(poly))
    return float(r.real.max()) if r.size else -math.inf
