"""Closed-loop simulators: quartic-cost regulation and predictive path
following, with relaxed-Lyapunov and convergence monitors.

Each step solves the finite-horizon problem warm-started from the shifted
previous solution, applies the first input to the (nominal, noise-free)
plant, and logs the achieved value function and stage cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels, ocp
from .certify_regulation import CertificateParams
from .certify_path import PathCertificateParams, PathSpec
from .dynamics import ControlInput, RobotState, exact_step

ON_PATH_TOL = 1e-3
SQUIRCLE_SMOOTHING = 1e-6


@dataclass
class ClosedLoopTrace:
    states: np.ndarray        # (n+1, nx) realized plant states
    controls: np.ndarray      # (n, nu) applied inputs
    values: np.ndarray        # (n,) achieved optimal cost at each step
    stage_costs: np.ndarray   # (n,) running cost of the applied step
    status: str               # converged | step-cap | solver-failure
    steps: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class RegulationScenario:
    x0: np.ndarray
    params: CertificateParams
    horizon: int
    reference: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max_steps: int = 400
    v_threshold: float = 1e-9
    cost: str = "quartic"          # quartic | quadratic

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        if self.horizon < 2:
            raise ValueError("need a prediction horizon of at least 2")
        if self.cost not in ("quartic", "quadratic"):
            raise ValueError(f"unknown cost type {self.cost!r}")


def stage_cost_quartic(p: CertificateParams, ref: np.ndarray, x, u) -> float:
    ex, ey, et = x[0] - ref[0], x[1] - ref[1], x[2] - ref[2]
    return (p.q1 * ex ** 4 + p.q2 * ey ** 2 + p.q3 * et ** 4
            + p.r1 * u[0] ** 4 + p.r2 * u[1] ** 4)


def stage_cost_quadratic(p: CertificateParams, ref: np.ndarray, x, u) -> float:
    ex, ey, et = x[0] - ref[0], x[1] - ref[1], x[2] - ref[2]
    return (p.q1 * ex ** 2 + p.q2 * ey ** 2 + p.q3 * et ** 2
            + p.r1 * u[0] ** 2 + p.r2 * u[1] ** 2)


def min_stage_cost(sc: RegulationScenario, x) -> float:
    """One-step optimal running cost; zero input is optimal for both
    cost families since the input box contains the origin."""
    fn = stage_cost_quartic if sc.cost == "quartic" else stage_cost_quadratic
    return fn(sc.params, sc.reference, x, np.zeros(2))


def make_regulation_ocp(sc: RegulationScenario, x0, horizon: Optional[int] = None) -> ocp.OcpSpec:
    p = sc.params
    n = sc.horizon if horizon is None else horizon
    delta = p.delta
    ref = sc.reference

    def dyn(x, u):
        s = exact_step(RobotState(x[0], x[1], x[2]), ControlInput(u[0], u[1]), delta)
        return s.as_array()

    if sc.cost == "quartic":
        cost = lambda x, u: stage_cost_quartic(p, ref, x, u)
        kern = ocp.KernelSpec(
            model=kernels.MODEL_UNICYCLE_EXACT, delta=delta,
            cost_id=kernels.COST_QUARTIC_REG,
            cp=np.array([p.q1, p.q2, p.q3, p.r1, p.r2, ref[0], ref[1], ref[2]]),
        )
    else:
        cost = lambda x, u: stage_cost_quadratic(p, ref, x, u)
        kern = ocp.KernelSpec(
            model=kernels.MODEL_UNICYCLE_EXACT, delta=delta,
            cost_id=kernels.COST_QUAD_DIAG,
            cp=np.concatenate([[p.q1, p.q2, p.q3], [p.r1, p.r2], ref]),
        )
    big = np.inf
    return ocp.OcpSpec(
        n_steps=n, state_dim=3, control_dim=2, x0=np.asarray(x0, dtype=float),
        dynamics=dyn, stage_cost=cost,
        state_box=(np.array([-p.x_bar, -p.y_bar, -big]), np.array([p.x_bar, p.y_bar, big])),
        control_box=(np.array([-p.v_bar, -p.omega_bar]), np.array([p.v_bar, p.omega_bar])),
        kernel=kern,
    )


def run_regulation(sc: RegulationScenario) -> ClosedLoopTrace:
    """Receding-horizon regulation of the unicycle to the reference pose."""
    x = np.asarray(sc.x0, dtype=float).copy()
    states = [x.copy()]
    controls, values, cells = [], [], []
    warm = None
    status = "step-cap"
    delta = sc.params.delta
    for step in range(sc.max_steps):
        spec = make_regulation_ocp(sc, x)
        sol = ocp.solve(spec, warm_start=warm)
        u0 = sol.controls[0]
        values.append(sol.objective)
        cost_fn = stage_cost_quartic if sc.cost == "quartic" else stage_cost_quadratic
        cells.append(cost_fn(sc.params, sc.reference, x, u0))
        x = exact_step(RobotState(*x), ControlInput(*u0), delta).as_array()
        states.append(x.copy())
        controls.append(u0.copy())
        warm = np.vstack([sol.controls[1:], np.zeros((1, 2))])
        if sol.objective <= sc.v_threshold:
            status = "converged"
            break
    return ClosedLoopTrace(np.asarray(states), np.asarray(controls),
                           np.asarray(values), np.asarray(cells), status, len(controls))


def relaxed_lyapunov_check(trace: ClosedLoopTrace, alpha: float, tol: float = 1e-8) -> dict:
    """Check V(n+1) <= V(n) - alpha * running_cost(n) + tol along the trace."""
    if trace.values.size < 2:
        raise ValueError("need at least two recorded steps")
    v = trace.values
    ell = trace.stage_costs
    ok = v[1:] <= v[:-1] - alpha * ell[:-1] + tol
    return {
        "satisfied": ok,
        "fraction": float(np.mean(ok)),
        "all": bool(np.all(ok)),
        "worst_violation": float(np.max(v[1:] - (v[:-1] - alpha * ell[:-1]))),
    }


def value_growth_study(sc: RegulationScenario, n_values) -> np.ndarray:
    """Open-loop V_N(x0) / min-stage-cost(x0) over a horizon sweep.

    Horizons are solved in increasing order, each warm-started from the
    previous solution extended by one idle step.
    """
    n_values = sorted(int(n) for n in n_values)
    lstar = min_stage_cost(sc, sc.x0)
    if lstar <= 0:
        raise ValueError("x0 coincides with the reference")
    out = np.empty(len(n_values))
    warm = None
    prev_n = 0
    for i, n in enumerate(n_values):
        if warm is not None:
            warm = np.vstack([warm, np.zeros((n - prev_n, 2))])
        spec = make_regulation_ocp(sc, sc.x0, horizon=n)
        sol = ocp.solve(spec, warm_start=warm)
        out[i] = sol.objective / lstar
        warm = sol.controls
        prev_n = n
    return out


# ---------------------------------------------------------------------------
# Predictive path following
# ---------------------------------------------------------------------------


@dataclass
class MpfcScenario:
    path: PathSpec
    cert: PathCertificateParams
    horizon_T: float
    x0: np.ndarray
    max_steps: int = 2000
    v_threshold: float = 1e-6

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        ratio = self.horizon_T / self.cert.delta
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("horizon must be a multiple of the sampling period")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T / self.cert.delta))


def initial_path_parameter(path: PathSpec, x0, epsilon: float, grid: int = 4001) -> float:
    """Closest-point initialization restricted to [lambda_bar, -epsilon]."""
    lam = np.linspace(path.lambda_bar, -epsilon, grid)
    x0 = np.asarray(x0, dtype=float)
    best, best_l = math.inf, lam[0]
    for v in lam:
        d = float(np.linalg.norm(x0 - path.point(v)))
        if d < best:
            best, best_l = d, float(v)
    return best_l


def mpfc_stage_cost(sc: MpfcScenario, z, w) -> float:
    c = sc.cert
    path = sc.path
    lam = z[3]
    g = w[2]
    rho = path.rho(lam)
    rho_d = path.rho_d(lam)
    one_p = 1.0 + rho_d * rho_d
    v_ref = g * math.sqrt(one_p)
    w_ref = g * path.rho_dd(lam) / one_p
    val = (c.q1 * (z[0] - lam) ** 2 + c.q2 * (z[1] - rho) ** 2
           + c.q3 * (z[2] - math.atan(rho_d)) ** 2 + c.q_hat * lam * lam
           + c.r1 * (w[0] - v_ref) ** 2 + c.r2 * (w[1] - w_ref) ** 2
           + c.r_hat * g * g)
    return c.delta * val


def _mpfc_set_residual(sc: MpfcScenario, z) -> float:
    """Largest violated residual of the box-or-on-path state set."""
    path = sc.path
    eps = sc.cert.epsilon
    lam = z[3]
    worst = max(lam, path.lambda_bar - lam)
    if lam <= -eps:
        worst = max(worst, z[0] + eps, -path.x_bar - z[0],
                    z[1] - path.y_bar, -path.y_bar - z[1])
    else:
        worst = max(worst, float(np.linalg.norm(z[:3] - path.point(lam))) - ON_PATH_TOL)
    return worst


def make_mpfc_ocp(sc: MpfcScenario, z0) -> ocp.OcpSpec:
    path = sc.path
    c = sc.cert
    delta = c.delta

    def dyn(z, w):
        s = exact_step(RobotState(z[0], z[1], z[2]), ControlInput(w[0], w[1]), delta)
        return np.array([s.x, s.y, s.theta, z[3] + delta * w[2]])

    kern = None
    if hasattr(path, "sinusoid_params"):
        amp, freq = path.sinusoid_params
        kern = ocp.KernelSpec(
            model=kernels.MODEL_MPFC, delta=delta,
            cost_id=kernels.COST_MPFC,
            cp=np.array([c.q1, c.q2, c.q3, c.q_hat, c.r1, c.r2, c.r_hat, amp, freq, delta]),
            con_id=kernels.CON_MPFC_SET,
            cnp=np.array([c.epsilon, path.x_bar, path.y_bar, path.lambda_bar,
                          ON_PATH_TOL, amp, freq]),
            stage_con=np.zeros((sc.n_steps, 1, 3)),
        )
    return ocp.OcpSpec(
        n_steps=sc.n_steps, state_dim=4, control_dim=3, x0=np.asarray(z0, dtype=float),
        dynamics=dyn, stage_cost=lambda z, w: mpfc_stage_cost(sc, z, w),
        control_box=(np.array([-path.v_bar, -path.omega_bar, 0.0]),
                     np.array([path.v_bar, path.omega_bar, path.g_bar])),
        path_constraints=(lambda z: _mpfc_set_residual(sc, z),),
        kernel=kern,
    )


PATH_GATE = 0.05
ALIGN_TOL = 1e-3


def _rider_candidate(sc: MpfcScenario, z0, base: np.ndarray) -> np.ndarray:
    """Replace the tail of a candidate plan with align-then-ride feedforward.

    Wherever the rolled prediction sits on the path, first turn in place to
    the (unwrapped) path tangent, then apply the feedforward that advances
    the timing variable at the largest admissible rate.  Handing this to
    the solver avoids the flat parked-on-the-path plateau of the penalty
    landscape, including the reverse-heading variant of it.
    """
    from .certify_path import path_reference

    path = sc.path
    delta = sc.cert.delta
    cand = base.copy()
    z = np.asarray(z0, dtype=float).copy()
    for k in range(sc.n_steps):
        lam = z[3]
        target = path.point(lam)
        pos_err = math.hypot(z[0] - target[0], z[1] - target[1])
        ang_err = target[2] - z[2]
        if pos_err <= PATH_GATE and lam < 0.0:
            if abs(ang_err) > ALIGN_TOL:
                rate = max(-path.omega_bar, min(path.omega_bar, ang_err / delta))
                cand[k] = (0.0, rate, 0.0)
            else:
                # largest timing rate admissible at this path point, backed
                # off while the tracking error is still being pulled in
                rho_d = path.rho_d(lam)
                one_p = 1.0 + rho_d * rho_d
                tangent = target[2]
                e_lat = (-math.sin(tangent) * (z[0] - target[0])
                         + math.cos(tangent) * (z[1] - target[1]))
                e_head = tangent - z[2]
                g = min(path.g_bar, path.v_bar / math.sqrt(one_p), -lam / delta)
                curv = abs(path.rho_dd(lam)) / one_p
                if curv > 0:
                    g = min(g, path.omega_bar / curv)
                g *= min(1.0, max(0.05, 1.0 - 20.0 * abs(e_lat) - 5.0 * abs(e_head)))
                v_ref, w_ref = path_reference(path, lam, g * (1.0 - 1e-12))
                w_cmd = w_ref + 3.0 * e_head - 1.0 * e_lat
                w_cmd = max(-path.omega_bar, min(path.omega_bar, w_cmd))
                cand[k] = (v_ref, w_cmd, g)
        s = exact_step(RobotState(z[0], z[1], z[2]),
                       ControlInput(cand[k, 0], cand[k, 1]), delta)
        z = np.array([s.x, s.y, s.theta, z[3] + delta * cand[k, 2]])
    return cand


def run_mpfc(sc: MpfcScenario) -> ClosedLoopTrace:
    """Sampled-data path-following loop on the augmented state (x, lam).

    The virtual state is initialized by closest-point projection and then,
    as in the receding-horizon scheme itself, taken from the first step of
    the last predicted trajectory.  Each solve is warm-started from the
    better of the shifted previous plan and its path-riding variant.
    """
    lam = initial_path_parameter(sc.path, sc.x0, sc.cert.epsilon)
    z = np.concatenate([sc.x0, [lam]])
    delta = sc.cert.delta
    states = [z.copy()]
    controls, values, cells = [], [], []
    warm = np.zeros((sc.n_steps, 3))
    status = "step-cap"
    for step in range(sc.max_steps):
        spec = make_mpfc_ocp(sc, z)
        rider = _rider_candidate(sc, z, warm)
        if ocp.penalized_objective(spec, rider) < ocp.penalized_objective(spec, warm):
            start = rider
        else:
            start = warm
        sol = ocp.solve(spec, warm_start=start)
        w0 = sol.controls[0]
        values.append(sol.objective)
        cells.append(mpfc_stage_cost(sc, z, w0))
        x_next = exact_step(RobotState(z[0], z[1], z[2]), ControlInput(w0[0], w0[1]), delta)
        z = np.array([x_next.x, x_next.y, x_next.theta, sol.states[1, 3]])
        states.append(z.copy())
        controls.append(w0.copy())
        warm = np.vstack([sol.controls[1:], sol.controls[-1:]])
        if sol.objective <= sc.v_threshold:
            status = "converged"
            break
    return ClosedLoopTrace(np.asarray(states), np.asarray(controls),
                           np.asarray(values), np.asarray(cells), status, len(controls))


def trace_to_rows(trace: ClosedLoopTrace, augmented: bool) -> list[dict]:
    """Flatten a trace for CSV emission."""
    rows = []
    for k in range(trace.steps):
        row = {
            "step": k,
            "x": trace.states[k, 0], "y": trace.states[k, 1], "theta": trace.states[k, 2],
            "v": trace.controls[k, 0], "omega": trace.controls[k, 1],
            "V": trace.values[k], "ell": trace.stage_costs[k],
        }
        if augmented:
            row["lambda"] = trace.states[k, 3]
            row["g"] = trace.controls[k, 2]
        rows.append(row)
    return rows
