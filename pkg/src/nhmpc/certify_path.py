"""Continuous-time stabilizing-horizon certificate for predictive path
following.

A single open-loop maneuver (turn toward the path, drive to it, align,
ride the path to its end) yields a piecewise cost-ratio profile c(t).
Its running integral, capped by the identity, is the value-function growth
bound B(t); two exponential integrals of 1/B give the sampled-data
performance index, and the minimal stabilizing horizon is the first
sampling multiple where that index turns positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

G_HAT_GRID = 10_000
ALPHA_POS_TOL = 1e-9


class PathCertificateError(RuntimeError):
    pass


@dataclass
class PathSpec:
    """Geometric reference y = rho(x) over [lambda_bar, 0] plus the boxes.

    ``rho``, ``rho_d`` and ``rho_dd`` are the value and first/second
    derivative handles.  The augmented input box is U x [0, g_bar].
    """

    rho: Callable[[float], float]
    rho_d: Callable[[float], float]
    rho_dd: Callable[[float], float]
    lambda_bar: float
    y_bar: float
    v_bar: float
    omega_bar: float
    g_bar: float

    def __post_init__(self):
        if self.lambda_bar >= 0:
            raise PathCertificateError("path start must be negative")
        lam = np.linspace(self.lambda_bar, 0.0, 512)
        vals = np.array([self.rho(v) for v in lam])
        if np.any(np.abs(vals) > self.y_bar + 1e-9):
            raise PathCertificateError("path leaves the state box")

    @property
    def x_bar(self) -> float:
        return -self.lambda_bar

    @staticmethod
    def sinusoid(amplitude: float, frequency: float, lambda_bar: float,
                 y_bar: float, v_bar: float, omega_bar: float, g_bar: float) -> "PathSpec":
        spec = PathSpec(
            rho=lambda lam: amplitude * math.sin(frequency * lam),
            rho_d=lambda lam: amplitude * frequency * math.cos(frequency * lam),
            rho_dd=lambda lam: -amplitude * frequency ** 2 * math.sin(frequency * lam),
            lambda_bar=lambda_bar, y_bar=y_bar,
            v_bar=v_bar, omega_bar=omega_bar, g_bar=g_bar,
        )
        spec.sinusoid_params = (amplitude, frequency)
        return spec

    def point(self, lam: float) -> np.ndarray:
        """Path point (x, y, heading) at parameter lam."""
        return np.array([lam, self.rho(lam), math.atan(self.rho_d(lam))])


def path_reference(path: PathSpec, lam: float, g: float) -> tuple[float, float]:
    """Feedforward input pair that keeps the robot exactly on the path
    when the timing variable advances at rate g."""
    d = path.rho_d(lam)
    one_p = 1.0 + d * d
    return g * math.sqrt(one_p), g * path.rho_dd(lam) / one_p


def g_hat(path: PathSpec) -> float:
    """Largest constant timing rate whose feedforward stays inside U,
    found on a dense parameter grid."""
    lam = np.linspace(path.lambda_bar, 0.0, G_HAT_GRID)
    d = np.array([path.rho_d(v) for v in lam])
    dd = np.array([path.rho_dd(v) for v in lam])
    one_p = 1.0 + d * d
    g = min(path.g_bar, float(path.v_bar / np.max(np.sqrt(one_p))))
    curv = np.max(np.abs(dd / one_p))
    if curv > 0:
        g = min(g, float(path.omega_bar / curv))
    return g


@dataclass
class PathCertificateParams:
    """Weights, segment length, sampling period, and maneuver times."""

    epsilon: float
    q1: float
    q2: float
    q3: float
    q_hat: float
    r1: float
    r2: float
    r_hat: float
    delta: float
    t_r: float
    t_l: float
    t_g: float
    v_bar: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise PathCertificateError("epsilon must be positive")
        if self.r2 > self.q3 / 2 * (1 + 1e-12):
            raise PathCertificateError("need r2 <= q3/2")
        if min(self.t_r, self.t_l, self.t_g, self.delta) <= 0:
            raise PathCertificateError("times must be positive")

    @staticmethod
    def from_setup(path: PathSpec, epsilon: float, delta: float,
                   q1: float, q2: float, q3: float, q_hat: float,
                   r1: float, r2: float, r_hat: float) -> "PathCertificateParams":
        if epsilon >= path.x_bar:
            raise PathCertificateError("epsilon must be below the box width")
        t_r = (math.pi / 2) / path.omega_bar
        t_l = math.sqrt(4 * path.y_bar ** 2 + (path.lambda_bar + epsilon) ** 2) / path.v_bar
        t_g = abs(path.lambda_bar) / g_hat(path)
        return PathCertificateParams(
            epsilon=epsilon, q1=q1, q2=q2, q3=q3, q_hat=q_hat,
            r1=r1, r2=r2, r_hat=r_hat, delta=delta,
            t_r=t_r, t_l=t_l, t_g=t_g, v_bar=path.v_bar,
        )

    @property
    def breakpoints(self) -> tuple[float, float, float, float]:
        b1 = self.t_r
        b2 = self.t_r + self.t_l
        b3 = 2 * self.t_r + self.t_l
        b4 = 2 * self.t_r + self.t_l + self.t_g
        return b1, b2, b3, b4


def c_of_t(p: PathCertificateParams, t: float) -> float:
    """Piecewise cost-ratio profile of the path-reaching maneuver.

    The last branch decays quadratically over exactly the ride-the-path
    interval; the intermediate-turn quadratic is kept with its printed
    four-turn-time offset.
    """
    if t < 0:
        raise PathCertificateError("time must be nonnegative")
    b1, b2, b3, b4 = p.breakpoints
    k_turn = p.q3 * math.pi ** 2 / (4 * p.t_r ** 2 * p.q_hat * p.epsilon ** 2)
    if t < b1:
        return 1.0 + k_turn * (t * t + 6 * p.t_r * t + 0.5)
    if t < b2:
        return 1.0 + (p.q3 * (1.5 * math.pi) ** 2 + p.r1 * p.v_bar ** 2) / (p.q_hat * p.epsilon ** 2)
    if t < b3:
        u = 4 * p.t_r + p.t_l - t
        return 1.0 + k_turn * (u * u + 0.5)
    if t < b4:
        u = b4 - t
        return (u * u + p.r_hat / p.q_hat) / (p.t_g ** 2)
    return 0.0


def c_integral(p: PathCertificateParams, t: float) -> float:
    """Closed-form running integral of c (piecewise polynomial)."""
    if t <= 0:
        return 0.0
    b1, b2, b3, b4 = p.breakpoints
    k_turn = p.q3 * math.pi ** 2 / (4 * p.t_r ** 2 * p.q_hat * p.epsilon ** 2)
    total = 0.0
    # branch 1
    u = min(t, b1)
    total += u + k_turn * (u ** 3 / 3 + 3 * p.t_r * u * u + 0.5 * u)
    if t <= b1:
        return total
    # branch 2 (constant)
    c2 = 1.0 + (p.q3 * (1.5 * math.pi) ** 2 + p.r1 * p.v_bar ** 2) / (p.q_hat * p.epsilon ** 2)
    total += c2 * (min(t, b2) - b1)
    if t <= b2:
        return total
    # branch 3: 1 + k*((a - t)^2 + 0.5), a = 4 t_r + t_l
    a = 4 * p.t_r + p.t_l
    hi = min(t, b3)
    total += (hi - b2) * (1.0 + 0.5 * k_turn)
    total += k_turn * ((a - b2) ** 3 - (a - hi) ** 3) / 3.0
    if t <= b3:
        return total
    # branch 4: ((b4 - t)^2 + r_hat/q_hat) / t_g^2
    hi = min(t, b4)
    total += ((b4 - b3) ** 3 - (b4 - hi) ** 3) / (3.0 * p.t_g ** 2)
    total += (p.r_hat / p.q_hat) * (hi - b3) / p.t_g ** 2
    return total


def growth_B(p: PathCertificateParams, t: float) -> float:
    """Growth bound: the smaller of the elapsed time and the maneuver's
    accumulated cost ratio."""
    if t < 0:
        raise PathCertificateError("time must be nonnegative")
    return min(t, c_integral(p, t))


def _crossovers(p: PathCertificateParams) -> list[float]:
    """Times where the identity and the accumulated integral swap roles."""
    b4 = p.breakpoints[3]
    ts = np.linspace(1e-9, b4 + 1.0, 4096)
    f = np.array([c_integral(p, t) - t for t in ts])
    out = []
    for i in range(len(ts) - 1):
        if f[i] == 0.0:
            out.append(float(ts[i]))
        elif f[i] * f[i + 1] < 0:
            out.append(float(brentq(lambda t: c_integral(p, t) - t, ts[i], ts[i + 1])))
    return out


def _inv_B_integral(p: PathCertificateParams, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    pts = [b for b in p.breakpoints if lo < b < hi]
    pts += [c for c in _crossovers(p) if lo < c < hi]
    val, _ = quad(lambda t: 1.0 / growth_B(p, t), lo, hi,
                  points=sorted(pts) or None, limit=200, epsabs=1e-10, epsrel=1e-10)
    return val


def alpha_T_delta(p: PathCertificateParams, T: float, delta: float) -> float:
    """Sampled-data performance index for horizon T and period delta."""
    if delta >= T:
        raise PathCertificateError("need delta < T")
    i1 = _inv_B_integral(p, delta, T)
    i2 = _inv_B_integral(p, T - delta, T)
    e1 = math.exp(-i1)
    e2 = math.exp(-i2)
    den = (1.0 - e1) * (1.0 - e2)
    if den <= 0:
        return -math.inf
    return 1.0 - e1 * e2 / den


def minimal_T(p: PathCertificateParams, n_cap: int = 10_000) -> float:
    """Smallest horizon that is a multiple of the sampling period with a
    positive performance index."""
    for n in range(2, n_cap + 1):
        T = n * p.delta
        if alpha_T_delta(p, T, p.delta) > ALPHA_POS_TOL:
            return T
    raise PathCertificateError(f"no stabilizing horizon up to {n_cap} periods")


def alpha_sweep(p: PathCertificateParams, T_values) -> list[dict]:
    rows = []
    for T in T_values:
        try:
            a = alpha_T_delta(p, float(T), p.delta)
        except PathCertificateError:
            a = float("nan")
        rows.append({"T": float(T), "alpha": a})
    return rows
