"""Motion and measurement models for the robot fleet.

All models are exact, deterministic functions of their inputs.  Planar
robots use the unicycle kinematics (x, y, theta) driven by linear and
angular speed; the relative-localization models work on a 4-DOF relative
pose (x, y, z, theta) between an observed and an observing robot.  Angles
are stored unnormalized; ``wrap_to_pi`` exists for measurement comparison
only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Switch point between the rotational and straight-line branch of the
# exact unicycle step.  Continuity at the switch is asserted in tests.
OMEGA_EPS = 1e-8


@dataclass(frozen=True)
class RobotState:
    """Planar pose: position in meters, heading in radians (unnormalized)."""

    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @staticmethod
    def from_array(a) -> "RobotState":
        return RobotState(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlInput:
    """Unicycle input: linear speed v (m/s) and angular speed omega (rad/s)."""

    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega], dtype=float)


@dataclass(frozen=True)
class RelState:
    """Relative pose of an observed robot in the observing robot's frame."""

    x: float
    y: float
    z: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta], dtype=float)

    @staticmethod
    def from_array(a) -> "RelState":
        return RelState(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class RelVelocities:
    """Body velocities (vx, vy, vz, wz) of one robot."""

    vx: float
    vy: float
    vz: float
    wz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz, self.wz], dtype=float)


@dataclass(frozen=True)
class Measurement:
    """Range / azimuth / elevation observation of a relative position.

    Invariant: r >= 0 and both angles lie in (-pi, pi].
    """

    r: float
    phi: float
    alpha: float

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"range must be nonnegative, got {self.r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.phi, self.alpha], dtype=float)


@dataclass(frozen=True)
class BoxConstraints:
    """Per-dimension lower/upper bounds; lower <= upper componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("bound shapes differ")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")

    @staticmethod
    def symmetric(*half_widths: float) -> "BoxConstraints":
        h = np.array(half_widths, dtype=float)
        return BoxConstraints(-h, h)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lower, self.upper)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise ValueError("non-finite input")


def wrap_to_pi(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def exact_step(s: RobotState, u: ControlInput, delta: float) -> RobotState:
    """Advance the unicycle by one sampling period under constant input.

    Uses the closed-form integral of the kinematics; for |omega| below
    OMEGA_EPS the straight-line limit is taken.
    """
    _check_finite(s.as_array(), u.as_array(), delta)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if abs(u.omega) < OMEGA_EPS:
        return RobotState(
            s.x + delta * u.v * math.cos(s.theta),
            s.y + delta * u.v * math.sin(s.theta),
            s.theta + delta * u.omega,
        )
    ratio = u.v / u.omega
    th1 = s.theta + delta * u.omega
    return RobotState(
        s.x + ratio * (math.sin(th1) - math.sin(s.theta)),
        s.y + ratio * (math.cos(s.theta) - math.cos(th1)),
        th1,
    )


def euler_step(s: RobotState, u: ControlInput, delta: float) -> RobotState:
    """Forward-Euler unicycle step."""
    _check_finite(s.as_array(), u.as_array(), delta)
    if delta <= 0:
        raise ValueError("delta must be positive")
    return RobotState(
        s.x + delta * u.v * math.cos(s.theta),
        s.y + delta * u.v * math.sin(s.theta),
        s.theta + delta * u.omega,
    )


def rel_step(
    s: RelState,
    u: RelVelocities,
    w: RelVelocities,
    delta: float,
    ground: bool = False,
) -> RelState:
    """Euler step of the relative kinematics.

    ``u`` holds the observed robot's body velocities, ``w`` the observing
    robot's.  The coupling terms +y*wz_o and -x*wz_o account for the
    rotation of the observer frame.  In ``ground`` mode the z channel is
    frozen at zero.
    """
    _check_finite(s.as_array(), u.as_array(), w.as_array(), delta)
    if delta <= 0:
        raise ValueError("delta must be positive")
    c, si = math.cos(s.theta), math.sin(s.theta)
    vz, vz_o = (0.0, 0.0) if ground else (u.vz, w.vz)
    z = 0.0 if ground else s.z
    dx = u.vx * c - u.vy * si - w.vx + s.y * w.wz
    dy = u.vy * c + u.vx * si - w.vy - s.x * w.wz
    dz = vz - vz_o
    dth = u.wz - w.wz
    return RelState(s.x + delta * dx, s.y + delta * dy, z + delta * dz, s.theta + delta * dth)


def measure(s: RelState) -> Measurement:
    """Map a relative position to range / azimuth / elevation.

    Bearings use the full-quadrant atan2 convention with range (-pi, pi].
    Noise, where needed, is added by the caller.
    """
    _check_finite(s.as_array())
    rho2 = s.x * s.x + s.y * s.y
    r = math.sqrt(rho2 + s.z * s.z)
    if r == 0.0:
        raise ValueError("bearing undefined at zero relative position")
    return Measurement(r, math.atan2(s.y, s.x), math.atan2(s.z, math.sqrt(rho2)))


def inverse_measure(m: Measurement) -> RelState:
    """Back out a relative position from a measurement; theta is set to 0."""
    _check_finite(m.as_array())
    ca = math.cos(m.alpha)
    return RelState(
        m.r * ca * math.cos(m.phi),
        m.r * ca * math.sin(m.phi),
        m.r * math.sin(m.alpha),
        0.0,
    )
