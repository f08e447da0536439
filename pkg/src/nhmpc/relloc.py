"""Relative localization and tracking in a heterogeneous robot team.

A moving-horizon estimator fits the relative-motion model to a sliding
window of range/azimuth/elevation measurements and measured body speeds,
anchored by an arrival cost whose weight is refresed from an EKF-style
covariance recursion.  A centralized tracking controller steers all
observed robots along time-varying relative references while keeping
them clear of each other and of the observer.  An EKF baseline and a
Monte-Carlo RMSE harness support the estimator comparison study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels, ocp
from .dynamics import Measurement, RelState, RelVelocities, inverse_measure, measure, rel_step

MHE_MAX_ITER = 150
MHE_LINE_SEARCH = 50
MHE_TOL_STEP = 1e-9
MHE_TOL_GRAD = 1e-7
COV_JITTER = 1e-9
COV_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor and actuation noise magnitudes (standard deviations)."""

    sigma_r: float
    sigma_phi: float
    sigma_alpha: float
    sigma_v: float = 0.01           # linear odometry channels, both robots
    sigma_w: float = 0.0873         # yaw-rate odometry channels
    # per-step model-mismatch noise on the relative state; the reference
    # study never states this magnitude, so it is an overridable default
    process_std: tuple = (0.01, 0.01, 0.01, 0.02)

    def __post_init__(self):
        if min(self.sigma_r, self.sigma_phi, self.sigma_alpha,
               self.sigma_v, self.sigma_w) < 0:
            raise ValueError("noise magnitudes must be nonnegative")

    @staticmethod
    def case(index: int) -> "NoiseConfig":
        table = {
            1: (0.0068, 0.0036, 0.0036),
            2: (0.0167, 0.0175, 0.0175),
            3: (0.1466, 0.1000, 0.1000),
        }
        r, p, a = table[index]
        return NoiseConfig(sigma_r=r, sigma_phi=p, sigma_alpha=a)

    @property
    def meas_cov(self) -> np.ndarray:
        return np.diag([max(self.sigma_r, 1e-6) ** 2,
                        max(self.sigma_phi, 1e-6) ** 2,
                        max(self.sigma_alpha, 1e-6) ** 2])

    @property
    def input_cov(self) -> np.ndarray:
        sv, sw = max(self.sigma_v, 1e-6), max(self.sigma_w, 1e-6)
        return np.diag([sv * sv] * 3 + [sw * sw] + [sv * sv] * 3 + [sw * sw])

    @property
    def process_cov(self) -> np.ndarray:
        return np.diag(np.square(self.process_std))

    @property
    def output_weight(self) -> np.ndarray:
        """Diagonal of the measurement-residual weight (reciprocal stds)."""
        return np.array([1.0 / max(self.sigma_r, 1e-6),
                         1.0 / max(self.sigma_phi, 1e-6),
                         1.0 / max(self.sigma_alpha, 1e-6)])

    @property
    def input_weight(self) -> np.ndarray:
        sv, sw = max(self.sigma_v, 1e-6), max(self.sigma_w, 1e-6)
        return np.array([1.0 / sv] * 3 + [1.0 / sw] + [1.0 / sv] * 3 + [1.0 / sw])


# ---------------------------------------------------------------------------
# Analytic model Jacobians (shared by the EKF and the arrival-cost update)
# ---------------------------------------------------------------------------


def motion_jacobians(x, u, w, delta: float, ground: bool = False):
    """State and input Jacobians of the discrete relative-motion map."""
    th = x[3]
    c, s = math.cos(th), math.sin(th)
    F = np.eye(4)
    F[0, 1] = delta * w[3]
    F[0, 3] = delta * (-u[0] * s - u[1] * c)
    F[1, 0] = -delta * w[3]
    F[1, 3] = delta * (-u[1] * s + u[0] * c)
    G = np.zeros((4, 8))
    G[0, 0] = delta * c
    G[0, 1] = -delta * s
    G[0, 4] = -delta
    G[0, 7] = delta * x[1]
    G[1, 0] = delta * s
    G[1, 1] = delta * c
    G[1, 5] = -delta
    G[1, 7] = -delta * x[0]
    G[2, 2] = delta
    G[2, 6] = -delta
    G[3, 3] = delta
    G[3, 7] = -delta
    if ground:
        F[2, :] = 0.0
        G[2, :] = 0.0
    return F, G


def measurement_jacobian(x) -> np.ndarray:
    """Jacobian of the range/azimuth/elevation map."""
    px, py, pz = x[0], x[1], x[2]
    rho2 = px * px + py * py
    rho = math.sqrt(rho2)
    r2 = rho2 + pz * pz
    r = math.sqrt(r2)
    H = np.zeros((3, 4))
    H[0, 0] = px / r
    H[0, 1] = py / r
    H[0, 2] = pz / r
    H[1, 0] = -py / rho2
    H[1, 1] = px / rho2
    H[2, 0] = -px * pz / (r2 * rho)
    H[2, 1] = -py * pz / (r2 * rho)
    H[2, 2] = rho / r2
    return H


def _symmetrize(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if np.any(np.linalg.eigvalsh(P) <= 0):
        P = P + COV_JITTER * np.eye(P.shape[0])
    return P


def ekf_step(mean, cov, u_meas, w_meas, y_meas, cfg: NoiseConfig,
             delta: float, ground: bool = False):
    """One predict/update cycle of the EKF baseline."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    u = np.asarray(u_meas, dtype=float)
    w = np.asarray(w_meas, dtype=float)
    F, G = motion_jacobians(mean, u, w, delta, ground)
    pred = rel_step(RelState(*mean), RelVelocities(*u), RelVelocities(*w),
                    delta, ground=ground).as_array()
    P = F @ cov @ F.T + G @ cfg.input_cov @ G.T + cfg.process_cov
    P = _symmetrize(P)
    H = measurement_jacobian(pred)
    R = cfg.meas_cov
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    innovation = np.asarray(y_meas, dtype=float) - measure(RelState(*pred)).as_array()
    # wrap angular innovations into (-pi, pi]
    for idx in (1, 2):
        innovation[idx] = math.atan2(math.sin(innovation[idx]), math.cos(innovation[idx]))
    mean_new = pred + K @ innovation
    P_new = (np.eye(4) - K @ H) @ P
    return mean_new, _symmetrize(P_new)


# ---------------------------------------------------------------------------
# Moving horizon estimation
# ---------------------------------------------------------------------------


@dataclass
class MheWindow:
    """Sliding estimation window plus arrival-cost state."""

    horizon: int
    cfg: NoiseConfig
    delta: float
    ground: bool = False
    state_lo: np.ndarray = field(default_factory=lambda: np.full(4, -np.inf))
    state_hi: np.ndarray = field(default_factory=lambda: np.full(4, np.inf))
    input_lo: np.ndarray = field(default_factory=lambda: np.full(4, -1e9))
    input_hi: np.ndarray = field(default_factory=lambda: np.full(4, 1e9))
    observer_lo: np.ndarray = field(default_factory=lambda: np.full(4, -1e9))
    observer_hi: np.ndarray = field(default_factory=lambda: np.full(4, 1e9))

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("estimation horizon must be at least 1")
        self.y_buf: list[np.ndarray] = []
        self.u_buf: list[np.ndarray] = []
        self.w_buf: list[np.ndarray] = []
        self.anchor: Optional[np.ndarray] = None
        self.arrival_weight = np.full(4, 1e-3)
        self.arrival_cov = np.diag([1.0, 1.0, 1.0, 4.0])
        self.current_cov = self.arrival_cov.copy()
        self._z_prev: Optional[np.ndarray] = None
        self.solver_failed = False

    @property
    def warm(self) -> bool:
        return len(self.y_buf) >= self.horizon + 1

    def _solve(self):
        K = len(self.u_buf)
        n = 4 + 8 * K
        y = np.asarray(self.y_buf, dtype=float)
        u = np.asarray(self.u_buf, dtype=float)
        w = np.asarray(self.w_buf, dtype=float)
        lo = np.concatenate([self.state_lo, np.tile(self.input_lo, K), np.tile(self.observer_lo, K)])
        hi = np.concatenate([self.state_hi, np.tile(self.input_hi, K), np.tile(self.observer_hi, K)])
        if self._z_prev is not None and self._z_prev.size == n:
            z0 = self._z_prev
        else:
            z0 = np.concatenate([self.anchor, u.ravel(), w.ravel()])
        arrival_on = self.anchor is not None
        box_finite = np.any(np.isfinite(self.state_lo)) or np.any(np.isfinite(self.state_hi))
        xlo = np.where(np.isfinite(self.state_lo), self.state_lo, -np.inf)
        xhi = np.where(np.isfinite(self.state_hi), self.state_hi, np.inf)
        weights = (1e2, 1e3, 1e4, 1e5, 1e6) if box_finite else (0.0,)
        z = np.clip(z0, lo, hi)
        status = 0
        for penw in weights:
            args = (y, u, w, np.asarray(self.anchor, dtype=float),
                    self.arrival_weight.astype(float), self.cfg.output_weight,
                    self.cfg.input_weight, float(self.delta), K, self.ground,
                    xlo, xhi, arrival_on, float(penw))
            z, _, status = kernels.spg_mhe(z, lo, hi, args, MHE_MAX_ITER,
                                           MHE_LINE_SEARCH, MHE_TOL_STEP, MHE_TOL_GRAD)
        self._z_prev = z
        X = kernels.mhe_rollout(z, self.delta, K, self.ground)
        u_hat = z[4:4 + 4 * K].reshape(K, 4)
        w_hat = z[4 + 4 * K:].reshape(K, 4)
        return np.asarray(X), u_hat, w_hat, status

    def _arrival_update(self, x_disc, u_disc, w_disc, new_anchor):
        """Refresh the arrival weight by one covariance propagate/update
        over the discarded oldest sample."""
        F, G = motion_jacobians(x_disc, u_disc, w_disc, self.delta, self.ground)
        P = F @ self.arrival_cov @ F.T + G @ self.cfg.input_cov @ G.T + self.cfg.process_cov
        P = _symmetrize(P)
        H = measurement_jacobian(np.maximum(np.abs(new_anchor), 1e-6) * np.sign(
            np.where(new_anchor == 0, 1.0, new_anchor)))
        S = H @ P @ H.T + self.cfg.meas_cov
        Kg = P @ H.T @ np.linalg.inv(S)
        P = _symmetrize((np.eye(4) - Kg @ H) @ P)
        self.arrival_cov = P
        self.arrival_weight = 1.0 / np.maximum(np.diag(P), COV_FLOOR)

    def step(self, y_new, u_new=None, w_new=None):
        """Ingest one measurement (and, after the first step, the input
        pair measured over the preceding interval); return the current
        estimate and the fitted input sequences.

        Before the window fills the estimator runs on all data so far.
        The very first estimate is the back-projected measurement with
        zero yaw.
        """
        y_new = np.asarray(y_new, dtype=float)
        self.y_buf.append(y_new)
        if u_new is not None:
            self.u_buf.append(np.asarray(u_new, dtype=float))
            self.w_buf.append(np.asarray(w_new, dtype=float))
        if len(self.y_buf) != len(self.u_buf) + 1:
            raise ValueError("need exactly one more measurement than input pairs")
        if len(self.y_buf) == 1:
            est = inverse_measure(Measurement(*y_new)).as_array()
            self.anchor = est.copy()
            self.current_cov = self.arrival_cov.copy()
            return est, np.zeros((0, 4)), np.zeros((0, 4))
        # slide the window once full
        if len(self.y_buf) > self.horizon + 1:
            self.y_buf.pop(0)
            u0 = self.u_buf.pop(0)
            w0 = self.w_buf.pop(0)
            # shift warm start: drop the first input pair, reuse the rest
            zp = self._z_prev
            K_prev = (zp.size - 4) // 8
            x1 = kernels.mhe_rollout(zp, self.delta, K_prev, self.ground)[1]
            u_prev = zp[4:4 + 4 * K_prev].reshape(K_prev, 4)
            w_prev = zp[4 + 4 * K_prev:].reshape(K_prev, 4)
            K = len(self.u_buf)
            u_shift = np.vstack([u_prev[1:], self.u_buf[-1][None, :]])[:K]
            w_shift = np.vstack([w_prev[1:], self.w_buf[-1][None, :]])[:K]
            self._z_prev = np.concatenate([np.asarray(x1), u_shift.ravel(), w_shift.ravel()])
            old_anchor = self.anchor
            self.anchor = np.asarray(x1)
            self._arrival_update(old_anchor, u0, w0, self.anchor)
        else:
            # growing window: extend the warm start by the new input pair
            if self._z_prev is not None:
                self._z_prev = np.concatenate([
                    self._z_prev[:4],
                    np.vstack([self._z_prev[4:4 + 4 * (len(self.u_buf) - 1)].reshape(-1, 4),
                               self.u_buf[-1][None, :]]).ravel(),
                    np.vstack([self._z_prev[4 + 4 * (len(self.u_buf) - 1):].reshape(-1, 4),
                               self.w_buf[-1][None, :]]).ravel(),
                ])
        X, u_hat, w_hat, _ = self._solve()
        # covariance surrogate at the window head for the 3-sigma envelope
        P = self.arrival_cov.copy()
        for k in range(len(self.u_buf)):
            F, G = motion_jacobians(X[k], self.u_buf[k], self.w_buf[k], self.delta, self.ground)
            P = F @ P @ F.T + G @ self.cfg.input_cov @ G.T + self.cfg.process_cov
            H = measurement_jacobian(X[k + 1])
            S = H @ P @ H.T + self.cfg.meas_cov
            Kg = P @ H.T @ np.linalg.inv(S)
            P = _symmetrize((np.eye(4) - Kg @ H) @ P)
        self.current_cov = P
        return X[-1], u_hat, w_hat


# ---------------------------------------------------------------------------
# Centralized tracking control
# ---------------------------------------------------------------------------


@dataclass
class MrsScenario:
    """Team layout, relative references, and controller/estimator settings."""

    n_observed: int
    observer_speeds: np.ndarray            # (4,) constant observer body speeds
    state_refs: Callable[[float], np.ndarray]   # t -> (M, 4) relative state refs
    speed_refs: Callable[[float], np.ndarray]   # t -> (M, 4) relative speed refs
    initial_states: np.ndarray             # (M, 4) true relative states at t=0
    noise: NoiseConfig
    delta: float
    duration: float
    est_horizon: int = 20
    ctrl_horizon: int = 20
    q_diag: tuple = (10.0, 10.0, 10.0, 0.1)
    r_diag: tuple = (25.0, 25.0, 25.0, 25.0)
    p_diag: tuple = (50.0, 50.0, 50.0, 0.5)
    r_c: float = 0.225
    r_p: float = 0.3
    state_lo: np.ndarray = field(default_factory=lambda: np.array([0.0, -3.0, 0.0, -np.inf]))
    state_hi: np.ndarray = field(default_factory=lambda: np.array([6.0, 3.0, 1.0, np.inf]))
    input_lo: np.ndarray = field(default_factory=lambda: np.array([-0.25, 0.0, -0.25, -0.7]))
    input_hi: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.0, 0.6, 0.7]))
    ground: bool = False
    n_observers: int = 1
    seed: int = 0

    def __post_init__(self):
        self.observer_speeds = np.asarray(self.observer_speeds, dtype=float)
        self.initial_states = np.asarray(self.initial_states, dtype=float)
        if self.n_observers != 1:
            raise ValueError("the combined loop supports a single observing robot")
        if self.initial_states.shape != (self.n_observed, 4):
            raise ValueError("initial states must be (M, 4)")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.delta))


def _stacked_tracking_spec(sc: MrsScenario, x0_stack, w_now, xref, uref) -> ocp.OcpSpec:
    m = sc.n_observed
    nx = 4 * m
    delta = sc.delta
    q = np.tile(sc.q_diag, m)
    r = np.tile(sc.r_diag, m)
    p = np.tile(sc.p_diag, m)
    w_now = np.asarray(w_now, dtype=float)

    def dyn(x, u):
        out = np.empty(nx)
        for i in range(m):
            b = 4 * i
            nxt = rel_step(RelState(*x[b:b + 4]), RelVelocities(*u[b:b + 4]),
                           RelVelocities(*w_now), delta, ground=sc.ground)
            out[b:b + 4] = nxt.as_array()
        return out

    def cost(x, u, k=None):
        raise NotImplementedError  # replaced below; kernel path is used

    qfull = np.concatenate([q, r, p])
    kern = ocp.KernelSpec(
        model=kernels.MODEL_REL_STACK, delta=delta,
        mp=np.array([m, 1.0 if sc.ground else 0.0, *w_now]),
        cost_id=kernels.COST_TRACK_REF, cp=qfull,
        xref=np.ascontiguousarray(xref), uref=np.ascontiguousarray(uref),
        con_id=kernels.CON_REL_COLLISION,
        cnp=np.array([m, 4.0 * sc.r_c ** 2, (sc.r_c + sc.r_p) ** 2]),
        stage_con=np.zeros((sc.ctrl_horizon, 1, 3)),
    )

    def py_cost_factory():
        counter = {"k": 0}
        # python stage cost mirrors the kernel; used only for re-evaluation,
        # which walks stages in order
        def stage(x, u):
            k = counter["k"]
            ex = x - xref[k]
            eu = u - uref[k]
            counter["k"] = (k + 1) % sc.ctrl_horizon
            return float(np.sum(q * ex * ex) + np.sum(r * eu * eu))
        return stage

    def terminal(x):
        e = x - xref[sc.ctrl_horizon]
        return float(np.sum(p * e * e))

    return ocp.OcpSpec(
        n_steps=sc.ctrl_horizon, state_dim=nx, control_dim=nx,
        x0=np.asarray(x0_stack, dtype=float),
        dynamics=dyn, stage_cost=py_cost_factory(), terminal_cost=terminal,
        state_box=(np.tile(sc.state_lo, m), np.tile(sc.state_hi, m)),
        control_box=(np.tile(sc.input_lo, m), np.tile(sc.input_hi, m)),
        kernel=kern,
    )


def tracking_mpc(sc: MrsScenario, x_hat_stack, w_now, xref, uref, warm=None):
    """Centralized one-shot solve; returns the stacked first controls and
    the shifted warm start for the next step."""
    spec = _stacked_tracking_spec(sc, x_hat_stack, w_now, xref, uref)
    try:
        sol = ocp.solve(spec, warm_start=warm)
    except ocp.OcpError:
        m = sc.n_observed
        return np.zeros(4 * m), None, False
    nxt = np.vstack([sol.controls[1:], sol.controls[-1:]])
    return sol.controls[0], nxt, True


# ---------------------------------------------------------------------------
# Reference construction and the combined estimation-control loop
# ---------------------------------------------------------------------------


def circular_reference(offsets, radii, rates, z_levels, observer_speeds, ground=False):
    """Relative sinusoid references of the simulation studies, plus the
    feedforward speeds obtained from the inverse kinematics.

    Each observed robot follows x = ox + R sin(w t), y = oy + R cos(w t)
    at constant relative altitude; the yaw reference is the direction of
    the required body-frame velocity, which keeps the forward-speed
    channel active (the observability guard).
    """
    offsets = np.asarray(offsets, dtype=float)
    radii = np.asarray(radii, dtype=float)
    rates = np.asarray(rates, dtype=float)
    z_levels = np.asarray(z_levels, dtype=float)
    wx, wy, wz, wwz = (float(v) for v in observer_speeds)
    m = offsets.shape[0]

    def pos(t):
        out = np.empty((m, 3))
        out[:, 0] = offsets[:, 0] + radii * np.sin(rates * t)
        out[:, 1] = offsets[:, 1] + radii * np.cos(rates * t)
        out[:, 2] = 0.0 if ground else z_levels
        return out

    def vel(t):
        out = np.empty((m, 3))
        out[:, 0] = radii * rates * np.cos(rates * t)
        out[:, 1] = -radii * rates * np.sin(rates * t)
        out[:, 2] = 0.0
        return out

    def theta_and_speed(t):
        p = pos(t)
        v = vel(t)
        ax = v[:, 0] + wx - p[:, 1] * wwz
        ay = v[:, 1] + wy + p[:, 0] * wwz
        vx = np.hypot(ax, ay)
        th = np.arctan2(ay, ax)
        return p, th, vx

    def state_refs(t):
        p, th, _ = theta_and_speed(t)
        return np.column_stack([p, th])

    def speed_refs(t, h=1e-4):
        _, th0, vx = theta_and_speed(t)
        _, th1, _ = theta_and_speed(t + h)
        dth = np.arctan2(np.sin(th1 - th0), np.cos(th1 - th0)) / h
        out = np.zeros((m, 4))
        out[:, 0] = vx
        out[:, 3] = dth + wwz
        return out

    return state_refs, speed_refs


def _unwrap_refs(sc: MrsScenario, n_total: int):
    """Tabulate references on the step grid with unwrapped yaw."""
    m = sc.n_observed
    xs = np.empty((n_total, m, 4))
    us = np.empty((n_total, m, 4))
    for k in range(n_total):
        t = k * sc.delta
        xs[k] = sc.state_refs(t)
        us[k] = sc.speed_refs(t)
    for i in range(m):
        xs[:, i, 3] = np.unwrap(xs[:, i, 3])
    return xs, us


@dataclass
class MrsRun:
    truth: np.ndarray        # (n+1, M, 4)
    estimates: np.ndarray    # (n, M, 4)
    references: np.ndarray   # (n, M, 4)
    controls: np.ndarray     # (n, M, 4)
    sigma3: np.ndarray       # (n, M, 4) three-sigma envelopes
    applied_w: np.ndarray    # (n, 4)

    def tracking_pos_error(self) -> np.ndarray:
        d = self.truth[1:, :, :3] - self.references[:, :, :3]
        return np.linalg.norm(d, axis=2)

    def estimation_error(self) -> np.ndarray:
        return self.truth[:-1] - self.estimates

    def sigma3_coverage(self) -> float:
        err = np.abs(self.estimation_error())
        return float(np.mean(err <= self.sigma3))


def run_mrs(sc: MrsScenario) -> MrsRun:
    """Algorithm: per step, estimate every observed robot from its noisy
    window, stack the estimates, solve the centralized tracker, apply the
    first inputs to the noisy truth."""
    rng = np.random.default_rng(sc.seed)
    m = sc.n_observed
    n_steps = sc.n_steps
    xs_ref, us_ref = _unwrap_refs(sc, n_steps + sc.ctrl_horizon + 1)
    truth = np.empty((n_steps + 1, m, 4))
    truth[0] = sc.initial_states
    estims = np.empty((n_steps, m, 4))
    sigma3 = np.empty((n_steps, m, 4))
    controls = np.empty((n_steps, m, 4))
    applied_w = np.empty((n_steps, 4))
    windows = [MheWindow(sc.est_horizon, sc.noise, sc.delta, ground=sc.ground,
                         state_lo=sc.state_lo, state_hi=sc.state_hi,
                         input_lo=sc.input_lo, input_hi=sc.input_hi,
                         observer_lo=sc.input_lo, observer_hi=sc.input_hi)
               for _ in range(m)]
    warm = None
    u_prev = [None] * m
    w_prev = None
    w_true = sc.observer_speeds
    for n in range(n_steps):
        x_hat = np.empty((m, 4))
        for i in range(m):
            y = measure(RelState(*truth[n, i])).as_array()
            y += rng.normal(0.0, [sc.noise.sigma_r, sc.noise.sigma_phi, sc.noise.sigma_alpha])
            y[0] = max(y[0], 0.0)
            est, _, _ = windows[i].step(y, u_prev[i], w_prev if u_prev[i] is not None else None)
            x_hat[i] = est
            sigma3[n, i] = 3.0 * np.sqrt(np.maximum(np.diag(windows[i].current_cov), 0.0))
        estims[n] = x_hat
        xref = xs_ref[n:n + sc.ctrl_horizon + 1].reshape(sc.ctrl_horizon + 1, 4 * m)
        uref = us_ref[n:n + sc.ctrl_horizon].reshape(sc.ctrl_horizon, 4 * m)
        w_meas = w_true + rng.normal(0.0, [sc.noise.sigma_v] * 3 + [sc.noise.sigma_w])
        u0, warm, ok = tracking_mpc(sc, x_hat.reshape(-1), w_meas, xref, uref, warm)
        u0 = u0.reshape(m, 4)
        controls[n] = u0
        applied_w[n] = w_meas
        references_now = xs_ref[n + 1]
        for i in range(m):
            nxt = rel_step(RelState(*truth[n, i]), RelVelocities(*u0[i]),
                           RelVelocities(*w_true), sc.delta, ground=sc.ground).as_array()
            nxt += rng.normal(0.0, sc.noise.process_std)
            if sc.ground:
                nxt[2] = 0.0
            truth[n + 1, i] = nxt
            u_prev[i] = u0[i] + rng.normal(0.0, [sc.noise.sigma_v] * 3 + [sc.noise.sigma_w])
        w_prev = w_meas
    return MrsRun(truth=truth, estimates=estims, references=xs_ref[1:n_steps + 1],
                  controls=controls, sigma3=sigma3, applied_w=applied_w)


# ---------------------------------------------------------------------------
# Monte-Carlo estimator comparison
# ---------------------------------------------------------------------------


@dataclass
class RmseReport:
    time: np.ndarray
    mhe_pos: np.ndarray
    ekf_pos: np.ndarray
    mhe_yaw: np.ndarray
    ekf_yaw: np.ndarray

    @property
    def mhe_avg(self) -> float:
        return float(np.mean(self.mhe_pos))

    @property
    def ekf_avg(self) -> float:
        return float(np.mean(self.ekf_pos))


def _comparison_truth(n_steps: int, delta: float, m: int):
    """Open-loop truth inputs for the estimator study: forward speed held
    away from zero (observability), distinct turn rates and climbs."""
    u = np.zeros((n_steps, m, 4))
    t = np.arange(n_steps)[:, None] * delta
    base = np.array([0.35, 0.3, 0.4])[:m]
    turn = np.array([0.25, -0.2, 0.15])[:m]
    u[:, :, 0] = base + 0.1 * np.sin(0.3 * t + np.arange(m))
    u[:, :, 3] = turn + 0.1 * np.cos(0.25 * t)
    u[:, :, 2] = 0.05 * np.sin(0.2 * t + np.arange(m))
    return u


def rmse_harness(cfg: NoiseConfig, n_mc: int = 15, n_steps: int = 60,
                 delta: float = 0.1, m: int = 3, est_horizon: int = 30,
                 seed: int = 12345) -> RmseReport:
    """Pooled positional/yaw RMSE over robots and trials, per time step,
    for the moving-horizon estimator against the EKF on identical data."""
    x0 = np.array([[2.0, 1.0, 0.5, 0.3],
                   [3.0, -1.0, 0.7, -0.4],
                   [2.5, 0.5, 0.6, 0.8]])[:m]
    w_true = np.array([0.1, 0.0, 0.0, 0.0])
    u_prof = _comparison_truth(n_steps, delta, m)
    sq_mhe_pos = np.zeros(n_steps)
    sq_ekf_pos = np.zeros(n_steps)
    sq_mhe_yaw = np.zeros(n_steps)
    sq_ekf_yaw = np.zeros(n_steps)
    root = np.random.default_rng(seed)
    trial_seeds = root.integers(0, 2 ** 63 - 1, size=n_mc)
    for trial in range(n_mc):
        rng = np.random.default_rng(trial_seeds[trial])
        for i in range(m):
            x = x0[i].copy()
            win = MheWindow(est_horizon, cfg, delta)
            ekf_mean = None
            ekf_cov = np.diag([0.2, 0.2, 0.2, 1.0])
            u_meas_prev = None
            w_meas_prev = None
            for n in range(n_steps):
                y = measure(RelState(*x)).as_array()
                y += rng.normal(0.0, [cfg.sigma_r, cfg.sigma_phi, cfg.sigma_alpha])
                y[0] = max(y[0], 0.0)
                est, _, _ = win.step(y, u_meas_prev, w_meas_prev)
                if ekf_mean is None:
                    ekf_mean = inverse_measure(Measurement(*y)).as_array()
                else:
                    ekf_mean, ekf_cov = ekf_step(ekf_mean, ekf_cov, u_meas_prev,
                                                 w_meas_prev, y, cfg, delta)
                for store_pos, store_yaw, mean in ((sq_mhe_pos, sq_mhe_yaw, est),
                                                   (sq_ekf_pos, sq_ekf_yaw, ekf_mean)):
                    e = mean - x
                    store_pos[n] += float(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
                    ang = math.atan2(math.sin(e[3]), math.cos(e[3]))
                    store_yaw[n] += ang * ang
                u_true = u_prof[n, i]
                x = rel_step(RelState(*x), RelVelocities(*u_true),
                             RelVelocities(*w_true), delta).as_array()
                x += rng.normal(0.0, cfg.process_std)
                u_meas_prev = u_true + rng.normal(0.0, [cfg.sigma_v] * 3 + [cfg.sigma_w])
                w_meas_prev = w_true + rng.normal(0.0, [cfg.sigma_v] * 3 + [cfg.sigma_w])
    count = n_mc * m
    return RmseReport(
        time=np.arange(n_steps) * delta,
        mhe_pos=np.sqrt(sq_mhe_pos / count),
        ekf_pos=np.sqrt(sq_ekf_pos / count),
        mhe_yaw=np.sqrt(sq_mhe_yaw / count),
        ekf_yaw=np.sqrt(sq_ekf_yaw / count),
    )


# ---------------------------------------------------------------------------
# Run analysis
# ---------------------------------------------------------------------------


def collision_windows(sc: MrsScenario, margin: float = 0.2, dilate_s: float = 3.0) -> np.ndarray:
    """Boolean mask of steps whose references put robots inside (or near)
    the keep-out radii; the tracking controller must deviate there."""
    n = sc.n_steps
    xs, _ = _unwrap_refs(sc, n + 1)
    mask = np.zeros(n, dtype=bool)
    for k in range(n):
        pos = xs[k + 1, :, :3]
        close = False
        for i in range(sc.n_observed):
            if np.linalg.norm(pos[i]) < sc.r_c + sc.r_p + margin:
                close = True
            for j in range(i + 1, sc.n_observed):
                if np.linalg.norm(pos[i] - pos[j]) < 2 * sc.r_c + margin:
                    close = True
        mask[k] = close
    width = int(round(dilate_s / sc.delta))
    if width > 0:
        idx = np.flatnonzero(mask)
        for k in idx:
            mask[max(0, k - width):k + width + 1] = True
    return mask


def collision_residuals(sc: MrsScenario, states: np.ndarray) -> float:
    """Largest realized violation of the pairwise / observer keep-outs."""
    worst = -math.inf
    four_rc2 = 4.0 * sc.r_c ** 2
    rcrp2 = (sc.r_c + sc.r_p) ** 2
    for k in range(states.shape[0]):
        pos = states[k, :, :3]
        for i in range(sc.n_observed):
            worst = max(worst, 1.0 - float(pos[i] @ pos[i]) / rcrp2)
            for j in range(i + 1, sc.n_observed):
                d2 = float(np.sum((pos[i] - pos[j]) ** 2))
                worst = max(worst, 1.0 - d2 / four_rc2)
    return worst


def mrs_report(sc: MrsScenario, run: MrsRun, settle_s: float = 15.0) -> dict:
    """Tracking/estimation summary used by the acceptance assertions."""
    mask = collision_windows(sc)
    settle = int(round(settle_s / sc.delta))
    err = run.tracking_pos_error()
    steady = np.ones(err.shape[0], dtype=bool)
    steady[:settle] = False
    steady &= ~mask[:err.shape[0]]
    steady_err = float(np.max(err[steady])) if np.any(steady) else float("nan")
    in_box = bool(
        np.all(run.controls >= np.tile(sc.input_lo, (run.controls.shape[0], sc.n_observed, 1)) - 1e-9)
        and np.all(run.controls <= np.tile(sc.input_hi, (run.controls.shape[0], sc.n_observed, 1)) + 1e-9)
    )
    return {
        "steady_state_pos_error": steady_err,
        "mean_pos_error": float(np.mean(err[steady])) if np.any(steady) else float("nan"),
        "sigma3_coverage": run.sigma3_coverage(),
        "controls_in_box": in_box,
        "max_collision_residual": collision_residuals(sc, run.truth),
        "collision_window_fraction": float(np.mean(mask)),
    }
