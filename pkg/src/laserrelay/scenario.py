"""Physical model of the laser-charged UAV relay.

Holds the immutable scenario description (geometry, timing, laser constants,
power and energy limits) and evaluates the channel, laser-transfer and
flying-energy formulas on top of it.  All quantities are SI internally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class ScenarioError(ValueError):
    """Raised when a scenario violates its structural invariants."""


class Weather(str, enum.Enum):
    CLEAR_AIR = "ClearAir"
    HAZE = "Haze"
    FOG = "Fog"


# (epsilon, chi [nm], visibility [km]); the size-distribution exponent is
# handled separately because for haze it depends on the visibility.
_WEATHER_TABLE = {
    Weather.CLEAR_AIR: (3.92, 550.0, 10.0),
    Weather.HAZE: (3.92, 550.0, 3.0),
    Weather.FOG: (3.92, 550.0, 0.4),
}

# wavelength [nm] -> (a1, b1, a2, b2) for a GaAs receiver at 25 C
_WAVELENGTH_TABLE = {
    810: (0.445, -0.75, 0.5414, -0.2313),
    1550: (0.34, -1.1, 0.4979, -0.2989),
}


def _size_distribution(weather: Weather, visibility_km: float) -> float:
    if weather is Weather.CLEAR_AIR:
        return 1.3
    if weather is Weather.HAZE:
        return 0.16 * visibility_km + 0.34
    return 0.0


@dataclass(frozen=True)
class LaserParams:
    """Laser link constants: receiver fit (a1, b1, a2, b2) and attenuation model."""

    wavelength_nm: float
    a1: float
    b1: float
    a2: float
    b2: float
    epsilon: float
    chi_nm: float
    kappa_visibility_km: float
    varrho: float
    weather: Weather = Weather.CLEAR_AIR

    @classmethod
    def preset(cls, wavelength_nm: int = 810, weather: Weather | str = Weather.CLEAR_AIR) -> "LaserParams":
        weather = Weather(weather)
        try:
            a1, b1, a2, b2 = _WAVELENGTH_TABLE[int(wavelength_nm)]
        except KeyError:
            raise ScenarioError(
                f"no laser preset for wavelength {wavelength_nm} nm "
                f"(available: {sorted(_WAVELENGTH_TABLE)})"
            ) from None
        eps, chi, kappa = _WEATHER_TABLE[weather]
        return cls(
            wavelength_nm=float(wavelength_nm),
            a1=a1, b1=b1, a2=a2, b2=b2,
            epsilon=eps, chi_nm=chi, kappa_visibility_km=kappa,
            varrho=_size_distribution(weather, kappa),
            weather=weather,
        )


def attenuation_alpha(lp: LaserParams) -> float:
    """Attenuation coefficient in 1/m.

    ``alpha = (epsilon / kappa) * (lambda / chi) ** (-varrho)`` with the
    visibility in km, so the raw value is per km and is converted here.
    """
    per_km = (lp.epsilon / lp.kappa_visibility_km) * (lp.wavelength_nm / lp.chi_nm) ** (-lp.varrho)
    return per_km / 1000.0


def circuit_power(p_dac: float, p_mix: float, p_filt: float, p_syn: float,
                  p_lna: float, p_ifa: float, p_filr: float, p_adc: float) -> float:
    """Constant link-on power from transceiver circuit blocks (all in watts)."""
    return 2 * (p_dac + p_mix + p_filt) + 3 * p_syn + 2 * (p_lna + p_mix + p_ifa + p_filr + p_adc)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _vec2(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (2,):
        raise ScenarioError(f"expected a 2D coordinate, got {v!r}")
    return a


@dataclass(frozen=True)
class Scenario:
    """Immutable problem configuration.  Defaults are the nominal setup."""

    source_pos: tuple = (0.0, 0.0)
    dest_pos: tuple = (1000.0, 0.0)
    pb_pos: tuple = (500.0, 800.0)
    altitude_H: float = 100.0
    q_init: tuple = (0.0, 500.0)
    q_final: tuple = (1000.0, 500.0)
    T_total: float = 120.0
    delta_t: float = 4.0
    N: int = 30
    v_max: float = 15.0
    gamma0: float = 1e8
    p_max_s: float = 0.1
    p_max_r: float = 0.1
    P_min_s: float = 10.0
    P_max_s: float = 100.0
    laser: LaserParams = field(default_factory=LaserParams.preset)
    mass_M: float = 9.7
    energy_budget_E: float = 1e5
    energy_floor_theta: float = 1e3
    upsilon_s: float = 5.0
    upsilon_r: float = 5.0
    P_on: float = 0.37
    R_sum: float = 100.0
    gamma_weight: float = 1.0

    def __post_init__(self):
        for name in ("source_pos", "dest_pos", "pb_pos", "q_init", "q_final"):
            object.__setattr__(self, name, tuple(float(x) for x in _vec2(getattr(self, name))))
        object.__setattr__(self, "N", int(self.N))
        if self.N < 2:
            raise ScenarioError("N must be at least 2")
        if not math.isclose(self.N * self.delta_t, self.T_total, rel_tol=1e-9, abs_tol=1e-9):
            raise ScenarioError(
                f"N * delta_t = {self.N * self.delta_t} does not equal T_total = {self.T_total}"
            )
        positive = ("altitude_H", "delta_t", "gamma0", "p_max_s", "p_max_r", "P_min_s",
                    "P_max_s", "mass_M", "energy_budget_E", "energy_floor_theta", "P_on")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive, got {getattr(self, name)}")
        if self.v_max < 0:
            raise ScenarioError("v_max must be non-negative")
        if self.P_min_s > self.P_max_s:
            raise ScenarioError("P_min_s exceeds P_max_s")
        if self.upsilon_s < 1 or self.upsilon_r < 1:
            raise ScenarioError("amplifier inefficiencies must be >= 1")
        if self.energy_floor_theta >= self.energy_budget_E:
            raise ScenarioError("energy floor theta must be below the budget E")
        if self.R_sum < 0 or self.gamma_weight < 0:
            raise ScenarioError("R_sum and gamma_weight must be non-negative")
        span = float(np.linalg.norm(self.qF - self.qI))
        if self.v_max * self.T_total < span * (1 - 1e-12):
            raise ScenarioError(
                f"v_max = {self.v_max} m/s cannot cover {span:.1f} m in {self.T_total} s "
                "(no mobility-feasible trajectory)"
            )

    # array views -----------------------------------------------------------
    @property
    def qS(self) -> np.ndarray:
        return np.array(self.source_pos)

    @property
    def qD(self) -> np.ndarray:
        return np.array(self.dest_pos)

    @property
    def qP(self) -> np.ndarray:
        return np.array(self.pb_pos)

    @property
    def qI(self) -> np.ndarray:
        return np.array(self.q_init)

    @property
    def qF(self) -> np.ndarray:
        return np.array(self.q_final)

    @property
    def omega(self) -> float:
        """Flying-energy weight 0.5 * M * delta_t (J s^2 / m^2)."""
        return 0.5 * self.mass_M * self.delta_t

    @property
    def alpha(self) -> float:
        return attenuation_alpha(self.laser)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass
class Trajectory:
    """UAV waypoints, shape (N, 2), altitude fixed by the scenario."""

    waypoints: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError(f"waypoints must have shape (N, 2), got {self.waypoints.shape}")

    @property
    def N(self) -> int:
        return self.waypoints.shape[0]

    def velocities(self, delta_t: float) -> np.ndarray:
        """Per-slot velocity vectors, shape (N, 2); the last slot has none (zero)."""
        v = np.zeros_like(self.waypoints)
        v[:-1] = np.diff(self.waypoints, axis=0) / delta_t
        return v

    def speeds(self, delta_t: float) -> np.ndarray:
        return np.linalg.norm(self.velocities(delta_t), axis=1)

    @classmethod
    def straight_line(cls, sc: Scenario) -> "Trajectory":
        s = np.linspace(0.0, 1.0, sc.N)[:, None]
        return cls((1 - s) * sc.qI + s * sc.qF)


@dataclass
class PowerSchedule:
    """Per-slot source power, relay power and power-beacon laser power (W)."""

    p_s: np.ndarray
    p_r: np.ndarray
    P_s: np.ndarray

    def __post_init__(self):
        self.p_s = np.asarray(self.p_s, dtype=float).copy()
        self.p_r = np.asarray(self.p_r, dtype=float).copy()
        self.P_s = np.asarray(self.P_s, dtype=float).copy()
        if not (self.p_s.shape == self.p_r.shape == self.P_s.shape) or self.p_s.ndim != 1:
            raise ValueError("power vectors must be 1-D with equal length")

    @property
    def N(self) -> int:
        return self.p_s.shape[0]

    @classmethod
    def constant(cls, sc: Scenario, p_s: float, p_r: float, P_s: float) -> "PowerSchedule":
        ps = np.full(sc.N, float(p_s))
        pr = np.full(sc.N, float(p_r))
        ps[-1] = 0.0
        pr[0] = 0.0
        return cls(ps, pr, np.full(sc.N, float(P_s)))


# --- physics ---------------------------------------------------------------

def _sqdist(q, c) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.sum((q - c) ** 2, axis=-1)


def rate_source_to_uav(p_s, q, sc: Scenario):
    """Achievable source-to-UAV rate in bps/Hz (vectorised over slots)."""
    snr = np.asarray(p_s, dtype=float) * sc.gamma0 / (sc.altitude_H ** 2 + _sqdist(q, sc.qS))
    return np.log2(1.0 + snr)


def rate_uav_to_dest(p_r, q, sc: Scenario):
    """Achievable UAV-to-destination rate in bps/Hz (vectorised over slots)."""
    snr = np.asarray(p_r, dtype=float) * sc.gamma0 / (sc.altitude_H ** 2 + _sqdist(q, sc.qD))
    return np.log2(1.0 + snr)


def laser_efficiency(q, sc: Scenario):
    """Transmission efficiency exp(-alpha * d) over the 3D UAV-PB distance."""
    d = np.sqrt(sc.altitude_H ** 2 + _sqdist(q, sc.qP))
    return np.exp(-sc.alpha * d)


def received_laser_power(P_s, q, sc: Scenario, clamp: bool = False):
    """Power harvested by the UAV for beacon power ``P_s``.

    Zero below the activation threshold ``P_min_s``; otherwise the affine
    receiver fit.  The affine branch may go negative for tiny efficiencies;
    pass ``clamp=True`` for physical (non-negative) bookkeeping.
    """
    lp = sc.laser
    P_s = np.asarray(P_s, dtype=float)
    eta = laser_efficiency(q, sc)
    pr = lp.a1 * lp.a2 * eta * P_s + lp.a2 * lp.b1 * eta + lp.b2
    pr = np.where(P_s >= sc.P_min_s, pr, 0.0)
    if clamp:
        pr = np.maximum(pr, 0.0)
    return pr if pr.ndim else float(pr)


def flying_energy(v, sc: Scenario):
    """omega * ||v||^2 per slot (J); ``v`` may be a single vector or (N, 2)."""
    v = np.asarray(v, dtype=float)
    return sc.omega * np.sum(v ** 2, axis=-1)


def _check_lengths(traj: Trajectory, pw: PowerSchedule, sc: Scenario):
    if traj.N != sc.N or pw.N != sc.N:
        raise ValueError(f"schedules must have length N = {sc.N}")


def comm_power_total(pw: PowerSchedule, sc: Scenario) -> float:
    """Denominator of the information energy efficiency (W)."""
    return (sc.upsilon_s * np.sum(pw.p_s[:-1]) + sc.upsilon_r * np.sum(pw.p_r[1:])
            + sc.N * sc.P_on)


def f_EE(traj: Trajectory, pw: PowerSchedule, sc: Scenario) -> float:
    """Relayed bits per Hz over total communication power."""
    _check_lengths(traj, pw, sc)
    rates = rate_uav_to_dest(pw.p_r, traj.waypoints, sc)
    return float(np.sum(rates[1:]) / comm_power_total(pw, sc))


def f_PE(traj: Trajectory, pw: PowerSchedule, sc: Scenario, clamp: bool = True) -> float:
    """Received over transmitted laser energy across the flight."""
    _check_lengths(traj, pw, sc)
    total = float(np.sum(pw.P_s))
    if total <= 0:
        raise ValueError("laser power-transfer efficiency undefined: zero total beacon power")
    return float(np.sum(received_laser_power(pw.P_s, traj.waypoints, sc, clamp=clamp)) / total)
