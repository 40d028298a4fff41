"""Platoon configuration and the structural coupling matrices.

A string of ``n`` follower vehicles is driven by a virtual leader (index 0).
Vehicle ``i`` feels

    F_i = (1+h_v) r_i (v_{i-1} - v_i) - (1-h_v) r_{i+1} (v_i - v_{i+1})
        + (1+h_x) a_i Delta_i - (1-h_x) a_{i+1} Delta_{i+1}

where ``Delta_i = x_{i-1} - x_i - ref_i`` and the last vehicle has no follower
terms.  In matrix form ``F = -(B + h_v|B|) R B^T v~ + (B + h_x|B|) A Delta``
with ``B`` upper bidiagonal (1 on the diagonal, -1 above it).

All coupling matrices are tri- or bidiagonal, so :class:`CouplingSet` keeps
only their bands and materialises dense arrays on request.
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for an invalid platoon parameterisation."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def _per_vehicle(name: str, value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"{name}: expected a scalar or {n} values, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PlatoonConfig:
    """Parameters of one vehicle string.

    Per-vehicle sequences are stored as read-only float arrays of length ``n``.
    Use :meth:`uniform` for the common identical-vehicle case.
    """

    n: int
    masses: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    h_vel: float = 0.0
    h_pos: float = 0.0
    ref_distances: np.ndarray = field(default=None)  # type: ignore[assignment]
    leader_velocity: float = 0.0

    def __post_init__(self):
        n = self.n
        if isinstance(n, bool) or int(n) != n or n < 1:
            raise ConfigError(f"n must be a positive integer, got {n!r}")
        n = int(n)
        object.__setattr__(self, "n", n)
        for name in ("masses", "damping", "stiffness"):
            arr = _per_vehicle(name, getattr(self, name), n)
            bad = np.flatnonzero(~(np.isfinite(arr) & (arr > 0)))
            if bad.size:
                i = int(bad[0])
                raise ConfigError(
                    f"{name}[{i}] (vehicle {i + 1}) must be finite and > 0, got {arr[i]}"
                )
            object.__setattr__(self, name, _frozen(arr))
        ref = 0.0 if self.ref_distances is None else self.ref_distances
        ref = _per_vehicle("ref_distances", ref, n)
        bad = np.flatnonzero(~(np.isfinite(ref) & (ref >= 0)))
        if bad.size:
            i = int(bad[0])
            raise ConfigError(f"ref_distances[{i}] (vehicle {i + 1}) must be >= 0, got {ref[i]}")
        object.__setattr__(self, "ref_distances", _frozen(ref))
        for name in ("h_vel", "h_pos"):
            h = float(getattr(self, name))
            if not np.isfinite(h) or h < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {h}")
            object.__setattr__(self, name, h)
        v0 = float(self.leader_velocity)
        if not np.isfinite(v0):
            raise ConfigError(f"leader_velocity must be finite, got {v0}")
        object.__setattr__(self, "leader_velocity", v0)

    @classmethod
    def uniform(
        cls,
        n: int,
        mass: float = 1.0,
        damping: float = 1.0,
        stiffness: float = 1.0,
        h_vel: float = 0.0,
        h_pos: float = 0.0,
        ref_distance: float = 0.0,
        leader_velocity: float = 0.0,
    ) -> "PlatoonConfig":
        if isinstance(n, bool) or int(n) != n or n < 1:
            raise ConfigError(f"n must be a positive integer, got {n!r}")
        n = int(n)
        return cls(
            n=n,
            masses=np.full(n, mass, dtype=float),
            damping=np.full(n, damping, dtype=float),
            stiffness=np.full(n, stiffness, dtype=float),
            h_vel=h_vel,
            h_pos=h_pos,
            ref_distances=np.full(n, ref_distance, dtype=float),
            leader_velocity=leader_velocity,
        )

    def replace(self, **changes) -> "PlatoonConfig":
        """Copy with some fields changed; scalar per-vehicle values are broadcast."""
        kw = {
            "n": self.n,
            "masses": self.masses,
            "damping": self.damping,
            "stiffness": self.stiffness,
            "h_vel": self.h_vel,
            "h_pos": self.h_pos,
            "ref_distances": self.ref_distances,
            "leader_velocity": self.leader_velocity,
        }
        kw.update(changes)
        if "n" in changes and changes["n"] != self.n:
            for name in ("masses", "damping", "stiffness", "ref_distances"):
                if name not in changes:
                    vals = np.asarray(kw[name])
                    if not np.all(vals == vals[0]):
                        raise ConfigError(f"cannot resize heterogeneous {name}; pass it explicitly")
                    kw[name] = float(vals[0])
        return PlatoonConfig(**kw)

    @property
    def monotone_damping_ok(self) -> bool:
        """True when damping gains are nonincreasing along the string."""
        return bool(np.all(self.damping[:-1] >= self.damping[1:]))

    @property
    def rho(self) -> float:
        """Ratio (1 - h_pos) / (1 + h_pos) of consecutive scaling weights."""
        return (1.0 - self.h_pos) / (1.0 + self.h_pos)


class Regime(str, enum.Enum):
    SPSV = "SPSV"
    SPAV = "SPAV"
    APAV = "APAV"


class RegimeLabel(NamedTuple):
    regime: Regime
    pos_exceeds_vel: bool


def classify_regime(config: PlatoonConfig) -> RegimeLabel:
    if config.h_pos > 0:
        regime = Regime.APAV
    elif config.h_vel > 0:
        regime = Regime.SPAV
    else:
        regime = Regime.SPSV
    return RegimeLabel(regime, config.h_pos > config.h_vel)


def incidence(n: int) -> np.ndarray:
    """Dense ``B``: ones on the diagonal, -1 on the first superdiagonal."""
    return np.eye(n) - np.eye(n, k=1)


def _tridiag(lower, diag, upper) -> np.ndarray:
    return np.diag(diag) + np.diag(upper, 1) + np.diag(lower, -1)


@dataclass(frozen=True)
class CouplingSet:
    """Band storage of the coupling matrices of one configuration.

    ``vel_*`` are the three diagonals of ``L_p = (B + h_v|B|) R B^T``;
    ``pos_*`` the two diagonals of ``(B + h_x|B|) A``; ``e_diag`` the
    geometric weights ``rho**k`` (``None`` when ``h_pos >= 1``).
    """

    n: int
    vel_lower: np.ndarray
    vel_diag: np.ndarray
    vel_upper: np.ndarray
    pos_diag: np.ndarray
    pos_upper: np.ndarray
    inv_mass: np.ndarray
    e_diag: np.ndarray | None

    @property
    def b(self) -> np.ndarray:
        return incidence(self.n)

    @property
    def b_abs(self) -> np.ndarray:
        return np.abs(incidence(self.n))

    @property
    def vel_laplacian(self) -> np.ndarray:
        return _tridiag(self.vel_lower, self.vel_diag, self.vel_upper)

    @property
    def pos_coupling(self) -> np.ndarray:
        return np.diag(self.pos_diag) + np.diag(self.pos_upper, 1)

    @property
    def scaling_e(self) -> np.ndarray:
        if self.e_diag is None:
            raise ConfigError("scaling matrix E needs h_pos < 1")
        return np.diag(self.e_diag)

    def banded(self, name: str) -> tuple[tuple[int, int], np.ndarray]:
        """LAPACK band layout ``((l, u), ab)`` of ``vel_laplacian``,
        ``pos_coupling`` or ``scaled_vel_laplacian`` (``E L_p``)."""
        n = self.n
        if name == "vel_laplacian":
            ab = np.zeros((3, n))
            ab[0, 1:] = self.vel_upper
            ab[1] = self.vel_diag
            ab[2, :-1] = self.vel_lower
            return (1, 1), ab
        if name == "scaled_vel_laplacian":
            if self.e_diag is None:
                raise ConfigError("scaling matrix E needs h_pos < 1")
            e = self.e_diag
            ab = np.zeros((3, n))
            ab[0, 1:] = e[:-1] * self.vel_upper
            ab[1] = e * self.vel_diag
            ab[2, :-1] = e[1:] * self.vel_lower
            return (1, 1), ab
        if name == "pos_coupling":
            ab = np.zeros((2, n))
            ab[0, 1:] = self.pos_upper
            ab[1] = self.pos_diag
            return (0, 1), ab
        raise KeyError(name)

    def vel_matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.vel_diag * x
        y[:-1] += self.vel_upper * x[1:]
        y[1:] += self.vel_lower * x[:-1]
        return y

    def pos_matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.pos_diag * x
        y[:-1] += self.pos_upper * x[1:]
        return y


def build_coupling_set(config: PlatoonConfig) -> CouplingSet:
    r, a = config.damping, config.stiffness
    hv, hx = config.h_vel, config.h_pos
    # interior rows see both neighbours, the last row only its predecessor
    vel_diag = (1 + hv) * r
    vel_diag[:-1] += (1 - hv) * r[1:]
    e_diag = None
    if hx < 1:
        e_diag = _frozen(config.rho ** np.arange(config.n))
    return CouplingSet(
        n=config.n,
        vel_lower=_frozen(-(1 + hv) * r[1:]),
        vel_diag=_frozen(vel_diag),
        vel_upper=_frozen(-(1 - hv) * r[1:]),
        pos_diag=_frozen((1 + hx) * a),
        pos_upper=_frozen(-(1 - hx) * a[1:]),
        inv_mass=_frozen(1.0 / config.masses),
        e_diag=e_diag,
    )


def closed_loop_matrix(config: PlatoonConfig) -> np.ndarray:
    """State matrix of ``(p~, Delta)`` for a constant leader velocity.

    Blocks: ``[[-L_p M^-1, (B + h_x|B|) A], [-B^T M^-1, 0]]``.
    """
    cs = build_coupling_set(config)
    n = config.n
    minv = np.diag(cs.inv_mass)
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = -cs.vel_laplacian @ minv
    out[:n, n:] = cs.pos_coupling
    out[n:, :n] = -incidence(n).T @ minv
    return out


CONFIG_KEYS = (
    "n",
    "mass",
    "damping",
    "stiffness",
    "h_vel",
    "h_pos",
    "ref_distance",
    "leader_velocity",
)


def config_from_mapping(data: dict[str, Any]) -> PlatoonConfig:
    """Build a config from the flat key set used in config files."""
    unknown = set(data) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "n" not in data:
        raise ConfigError("config is missing 'n'")
    n = data["n"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError(f"n must be a positive integer, got {n!r}")
    return PlatoonConfig(
        n=n,
        masses=_per_vehicle("mass", data.get("mass", 1.0), n),
        damping=_per_vehicle("damping", data.get("damping", 1.0), n),
        stiffness=_per_vehicle("stiffness", data.get("stiffness", 1.0), n),
        h_vel=data.get("h_vel", 0.0),
        h_pos=data.get("h_pos", 0.0),
        ref_distances=_per_vehicle("ref_distance", data.get("ref_distance", 0.0), n),
        leader_velocity=data.get("leader_velocity", 0.0),
    )


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path: str | Path) -> PlatoonConfig:
    """Read a TOML platoon config; other tables (e.g. ``[sweep]``) are ignored."""
    data = load_toml(path)
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    return config_from_mapping(flat)


def _toml_value(values: np.ndarray) -> str:
    if np.all(values == values[0]):
        return repr(float(values[0]))
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def dump_config(config: PlatoonConfig) -> str:
    lines = [
        f"n = {config.n}",
        f"mass = {_toml_value(config.masses)}",
        f"damping = {_toml_value(config.damping)}",
        f"stiffness = {_toml_value(config.stiffness)}",
        f"h_vel = {config.h_vel!r}",
        f"h_pos = {config.h_pos!r}",
        f"ref_distance = {_toml_value(config.ref_distances)}",
        f"leader_velocity = {config.leader_velocity!r}",
    ]
    return "\n".join(lines) + "\n"
