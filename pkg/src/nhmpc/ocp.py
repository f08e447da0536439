"""Finite-horizon optimal control problems and a small dense solver.

The solver is deliberately simple: single shooting with the controls as
decision variables, control boxes enforced by projection inside the line
search, state boxes and scalar path inequalities handled as smooth
quadratic exterior penalties on a fixed weight schedule.  It returns a
local minimizer together with the residual constraint violation; all
closed-loop acceptance tests are written against that contract.

``OcpSpec`` describes a problem through plain Python handles.  Problems
built by the simulator modules additionally attach a ``KernelSpec`` so the
whole solve runs inside the compiled kernels; the returned solution is
always re-evaluated through the Python handles, so both paths satisfy the
same rollout/objective invariants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

PENALTY_WEIGHTS = (1e2, 1e3, 1e4, 1e5, 1e6)
EXTRA_PENALTY_WEIGHTS = (1e7, 1e8)
MAX_OUTER_ITER = 200
MAX_LINE_SEARCH = 50
TOL_STEP = 1e-8
TOL_GRAD = 1e-6
FEASIBILITY_TOL = 1e-4
BRUTE_FORCE_BUDGET = 10_000_000


class OcpError(RuntimeError):
    pass


@dataclass
class KernelSpec:
    """Integer ids plus parameter arrays describing a compiled problem."""

    model: int
    delta: float
    mp: np.ndarray = field(default_factory=lambda: np.zeros(1))
    cost_id: int = kernels.COST_QUAD_DIAG
    cp: np.ndarray = field(default_factory=lambda: np.zeros(1))
    xref: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    uref: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    con_id: int = kernels.CON_NONE
    cnp: np.ndarray = field(default_factory=lambda: np.zeros(1))
    stage_con: np.ndarray = field(default_factory=lambda: np.zeros((1, 1, 3)))


@dataclass
class OcpSpec:
    """Discrete-time OCP over horizon ``n_steps``.

    ``dynamics(x, u) -> x_next`` and ``stage_cost(x, u) -> float`` operate
    on 1-D float arrays.  ``path_constraints`` are scalar handles
    ``g(x) <= 0`` applied at stages 1..N.
    """

    n_steps: int
    state_dim: int
    control_dim: int
    x0: np.ndarray
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    stage_cost: Callable[[np.ndarray, np.ndarray], float]
    terminal_cost: Optional[Callable[[np.ndarray], float]] = None
    state_box: Optional[tuple] = None
    control_box: Optional[tuple] = None
    path_constraints: Sequence[Callable[[np.ndarray], float]] = ()
    kernel: Optional[KernelSpec] = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("horizon must be at least 1")
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (self.state_dim,):
            raise ValueError("initial state has wrong dimension")
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("non-finite initial state")
        for box, dim, name in ((self.state_box, self.state_dim, "state"),
                               (self.control_box, self.control_dim, "control")):
            if box is not None:
                lo, hi = (np.asarray(b, dtype=float) for b in box)
                if lo.shape != (dim,) or hi.shape != (dim,):
                    raise ValueError(f"{name} box has wrong dimension")
                if np.any(lo > hi):
                    raise ValueError(f"inconsistent {name} box")
        if self.state_box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.state_box)
            # soft-constraint philosophy: tolerate closed-loop-sized spill
            if np.any(self.x0 < lo - 1e-3) or np.any(self.x0 > hi + 1e-3):
                raise ValueError("initial state outside state box")

    def _control_bounds(self):
        if self.control_box is None:
            big = 1e18
            return np.full(self.control_dim, -big), np.full(self.control_dim, big)
        lo, hi = self.control_box
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def _state_bounds(self):
        if self.state_box is None:
            return (np.full(self.state_dim, -np.inf), np.full(self.state_dim, np.inf))
        lo, hi = self.state_box
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    @property
    def constrained(self) -> bool:
        if self.path_constraints:
            return True
        if self.kernel is not None and self.kernel.con_id != kernels.CON_NONE:
            return True
        if self.state_box is not None:
            lo, hi = self._state_bounds()
            return bool(np.any(np.isfinite(lo)) or np.any(np.isfinite(hi)))
        return False


@dataclass
class OcpSolution:
    controls: np.ndarray          # (N, nu)
    states: np.ndarray            # (N+1, nx)
    objective: float
    status: str                   # converged | max-iter | infeasible-relaxed | infeasible
    iterations: int
    max_violation: float


def evaluate_cost(spec: OcpSpec, controls) -> tuple[float, np.ndarray]:
    """Roll the controls through the dynamics handle and sum stage costs."""
    U = np.asarray(controls, dtype=float)
    if U.shape != (spec.n_steps, spec.control_dim):
        raise ValueError(f"control sequence must have shape "
                         f"({spec.n_steps}, {spec.control_dim}), got {U.shape}")
    X = np.empty((spec.n_steps + 1, spec.state_dim))
    X[0] = spec.x0
    total = 0.0
    for k in range(spec.n_steps):
        total += float(spec.stage_cost(X[k], U[k]))
        X[k + 1] = spec.dynamics(X[k], U[k])
    if spec.terminal_cost is not None:
        total += float(spec.terminal_cost(X[spec.n_steps]))
    return total, X


def _python_objective(spec: OcpSpec, z: np.ndarray, penw: float) -> float:
    U = z.reshape(spec.n_steps, spec.control_dim)
    xlo, xhi = spec._state_bounds()
    x = spec.x0
    total = 0.0
    pen = 0.0
    for k in range(spec.n_steps):
        total += float(spec.stage_cost(x, U[k]))
        x = np.asarray(spec.dynamics(x, U[k]), dtype=float)
        if not np.all(np.isfinite(x)):
            return math.inf
        lo_v = np.maximum(0.0, xlo - x)
        hi_v = np.maximum(0.0, x - xhi)
        pen += float(np.sum(lo_v[np.isfinite(lo_v)] ** 2))
        pen += float(np.sum(hi_v[np.isfinite(hi_v)] ** 2))
        for gfun in spec.path_constraints:
            g = float(gfun(x))
            if g > 0.0:
                pen += g * g
    if spec.terminal_cost is not None:
        total += float(spec.terminal_cost(x))
    if not math.isfinite(total):
        return math.inf
    return total + penw * pen


def _python_violation(spec: OcpSpec, z: np.ndarray) -> float:
    U = z.reshape(spec.n_steps, spec.control_dim)
    xlo, xhi = spec._state_bounds()
    x = spec.x0
    mx = 0.0
    for k in range(spec.n_steps):
        x = np.asarray(spec.dynamics(x, U[k]), dtype=float)
        with np.errstate(invalid="ignore"):
            lo_v = xlo - x
            hi_v = x - xhi
        for v in np.concatenate([lo_v, hi_v]):
            if np.isfinite(v) and v > mx:
                mx = float(v)
        for gfun in spec.path_constraints:
            g = float(gfun(x))
            if g > mx:
                mx = g
    return mx


def _spg_python(objective, z0, lo, hi, max_iter, ls_max, tol_step, tol_grad):
    """Reference implementation of the projected-gradient loop in kernels."""

    def project(v):
        return np.minimum(np.maximum(v, lo), hi)

    def grad(zz, fz):
        g = np.empty_like(zz)
        zt = zz.copy()
        for i in range(zz.shape[0]):
            h = kernels.FD_REL_STEP * max(1.0, abs(zz[i]))
            zi = zt[i]
            zt[i] = zi + h
            g[i] = (objective(zt) - fz) / h
            zt[i] = zi
        return g

    z = project(np.asarray(z0, dtype=float))
    f = objective(z)
    g = grad(z, f)
    gn = float(np.linalg.norm(g))
    alpha = 1.0 / gn if gn > 1.0 else 1.0
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        d = project(z - alpha * g) - z
        gtd = float(g @ d)
        if float(np.linalg.norm(d)) < tol_step or gtd >= 0.0:
            status = 0
            break
        t = 1.0
        accepted = False
        ft = f
        for _ in range(ls_max):
            ft = objective(z + t * d)
            if ft <= f + kernels.ARMIJO_C1 * t * gtd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = 0
            break
        z_new = z + t * d
        f = ft
        g_new = grad(z_new, f)
        s = t * d
        y = g_new - g
        sty = float(s @ y)
        if sty > 1e-14:
            alpha = float(np.clip((s @ s) / sty, 1e-8, 1e8))
        else:
            alpha = min(alpha * 2.0, 1e8)
        z, g = z_new, g_new
        if float(np.linalg.norm(project(z - g) - z)) < tol_grad:
            status = 0
            break
    return z, it, status


def _kernel_args(spec: OcpSpec, penw: float):
    k = spec.kernel
    xlo, xhi = spec._state_bounds()
    return (
        k.model,
        np.ascontiguousarray(k.mp, dtype=float),
        np.ascontiguousarray(spec.x0, dtype=float),
        float(k.delta),
        spec.n_steps,
        spec.state_dim,
        spec.control_dim,
        k.cost_id,
        np.ascontiguousarray(k.cp, dtype=float),
        np.ascontiguousarray(k.xref, dtype=float),
        np.ascontiguousarray(k.uref, dtype=float),
        k.con_id,
        np.ascontiguousarray(k.cnp, dtype=float),
        np.ascontiguousarray(k.stage_con, dtype=float),
        np.ascontiguousarray(xlo, dtype=float),
        np.ascontiguousarray(xhi, dtype=float),
        float(penw),
    )


def penalized_objective(spec: OcpSpec, controls, penalty_weight: float = PENALTY_WEIGHTS[-1]) -> float:
    """Objective plus weighted squared constraint violations of a plan.

    Used to rank warm-start candidates without running the solver.
    """
    z = np.asarray(controls, dtype=float).reshape(spec.n_steps * spec.control_dim)
    if spec.kernel is not None:
        return float(kernels.ocp_objective(z, _kernel_args(spec, penalty_weight)))
    return _python_objective(spec, z, penalty_weight)


def solve(spec: OcpSpec, warm_start=None) -> OcpSolution:
    """Locally minimize the transcribed OCP.

    The warm start, when given, is the starting point after projection
    onto the control box; otherwise all-zero controls are used.
    """
    nz = spec.n_steps * spec.control_dim
    ulo, uhi = spec._control_bounds()
    lo = np.tile(ulo, spec.n_steps)
    hi = np.tile(uhi, spec.n_steps)
    if warm_start is None:
        z = np.zeros(nz)
    else:
        z = np.asarray(warm_start, dtype=float).reshape(nz).copy()
    z = np.minimum(np.maximum(z, lo), hi)

    iterations = 0
    status_code = 0

    def run_stage(zz, w):
        nonlocal iterations, status_code
        if spec.kernel is not None:
            zz, it, status_code = kernels.spg_ocp(
                zz, lo, hi, _kernel_args(spec, w),
                MAX_OUTER_ITER, MAX_LINE_SEARCH, TOL_STEP, TOL_GRAD)
        else:
            zz, it, status_code = _spg_python(
                lambda v: _python_objective(spec, v, w),
                zz, lo, hi, MAX_OUTER_ITER, MAX_LINE_SEARCH, TOL_STEP, TOL_GRAD)
        iterations += int(it)
        return zz

    def violation(zz):
        if spec.kernel is not None:
            _, v, _ = kernels.ocp_diagnostics(zz, _kernel_args(spec, 0.0))
            return float(v)
        return _python_violation(spec, zz)

    if not spec.constrained:
        final_w = 0.0
        weights = (0.0,)
    else:
        # A feasible warm start skips the loose stages: on nonconvex
        # avoidance constraints they let plans tunnel through keep-out
        # regions before the tight weights can block the branch.
        final_w = PENALTY_WEIGHTS[-1]
        if violation(z) <= FEASIBILITY_TOL:
            weights = PENALTY_WEIGHTS[-1:]
        else:
            weights = PENALTY_WEIGHTS
    def objective_at(zz, w):
        if spec.kernel is not None:
            return float(kernels.ocp_objective(zz, _kernel_args(spec, w)))
        return _python_objective(spec, zz, w)

    rounds = 0
    for w in weights:
        z = run_stage(z, w)
        rounds += 1
    # keep the total budget of the full schedule: restarts with fresh step
    # sizing recover the refinement depth the staged loop used to provide,
    # but stop once a restart no longer improves anything
    f_prev = objective_at(z, final_w)
    while rounds < len(PENALTY_WEIGHTS):
        z = run_stage(z, final_w)
        rounds += 1
        f_now = objective_at(z, final_w)
        if status_code == 0 and f_prev - f_now <= 1e-9 * max(1.0, abs(f_prev)):
            break
        f_prev = f_now
    viol = violation(z)
    if spec.constrained:
        for w in EXTRA_PENALTY_WEIGHTS:
            if viol <= FEASIBILITY_TOL:
                break
            z = run_stage(z, w)
            viol = violation(z)

    U = z.reshape(spec.n_steps, spec.control_dim)
    objective, X = evaluate_cost(spec, U)
    if not math.isfinite(objective):
        raise OcpError("non-finite cost at solver result")
    if viol > FEASIBILITY_TOL:
        status = "infeasible-relaxed"
    elif status_code == 0:
        status = "converged"
    else:
        status = "max-iter"
    return OcpSolution(U, X, objective, status, iterations, viol)


def brute_force_solve(spec: OcpSpec, grid_points_per_control_dim: int) -> OcpSolution:
    """Exhaustive test oracle over a tensor grid of control sequences.

    Rollouts violating the state box or a path constraint by more than
    1e-9 are discarded; the grid-optimal feasible sequence is returned.
    """
    if spec.n_steps > 4:
        raise OcpError("brute force restricted to horizons of at most 4")
    if spec.control_box is None:
        raise OcpError("brute force needs a bounded control box")
    g = int(grid_points_per_control_dim)
    n_seq = float(g) ** (spec.control_dim * spec.n_steps)
    if n_seq > BRUTE_FORCE_BUDGET:
        raise OcpError(f"enumeration budget exceeded: {n_seq:.3g} sequences")
    ulo, uhi = spec._control_bounds()
    axes = [np.linspace(ulo[d], uhi[d], g) for d in range(spec.control_dim)]
    xlo, xhi = spec._state_bounds()
    tol = 1e-9

    best_cost = math.inf
    best_seq = None
    n_vars = spec.control_dim * spec.n_steps
    for flat in product(*(axes[d % spec.control_dim] for d in range(n_vars))):
        U = np.asarray(flat, dtype=float).reshape(spec.n_steps, spec.control_dim)
        x = spec.x0
        cost = 0.0
        feasible = True
        for k in range(spec.n_steps):
            cost += float(spec.stage_cost(x, U[k]))
            x = np.asarray(spec.dynamics(x, U[k]), dtype=float)
            if np.any(x < xlo - tol) or np.any(x > xhi + tol):
                feasible = False
                break
            ok = True
            for gfun in spec.path_constraints:
                if float(gfun(x)) > tol:
                    ok = False
                    break
            if not ok:
                feasible = False
                break
        if not feasible:
            continue
        if spec.terminal_cost is not None:
            cost += float(spec.terminal_cost(x))
        if cost < best_cost:
            best_cost = cost
            best_seq = U
    if best_seq is None:
        U = np.clip(np.zeros((spec.n_steps, spec.control_dim)), ulo, uhi)
        _, X = evaluate_cost(spec, U)
        return OcpSolution(U, X, math.inf, "infeasible", 0, _python_violation(spec, U.ravel()))
    objective, X = evaluate_cost(spec, best_seq)
    return OcpSolution(best_seq, X, objective, "converged", 0,
                       _python_violation(spec, best_seq.ravel()))
