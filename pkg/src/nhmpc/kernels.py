"""Compiled hot loops: rollouts, penalty objectives, and the projected
gradient solver they feed.

Everything here operates on plain float64 arrays plus small integer ids so
that numba can compile the full solve (rollout, cost, penalties,
finite-difference gradient, line search) as one unit.  The same source runs
un-jitted when ``NHMPC_NUMBA=0``; see ``_accel``.

Model ids
    0  unicycle, exact discrete step
    1  unicycle, forward Euler
    2  stacked relative 4-DOF models, observer speeds in ``mp``
    3  single integrator (tests)
    4  path-following augmented state (x, y, theta, lam)

Cost ids
    0  quartic regulation cost, params [q1 q2 q3 r1 r2 xr yr thr]
    1  diagonal quadratic, params [Qdiag(nx) Rdiag(nu) xr(nx)]
    2  path-following tracking cost on a sinusoid path,
       params [q1 q2 q3 qhat r1 r2 rhat amp freq scale]
    3  time-varying reference tracking with terminal weight,
       params [Qdiag(nx) Rdiag(nu) Pdiag(nx)], refs passed separately

Constraint ids (evaluated at stages 1..N; row k of ``stage_con`` belongs
to predicted stage k+1)
    0  none
    1  squircle keep-out around moving cell centers,
       params [psi eps_smooth], stage_con[k, m] = [cx, cy, active]
    2  pairwise + origin collision avoidance for stacked relative states,
       params [M, 4*rc^2, (rc+rp)^2]
    3  path-following state set: box-or-on-path branch plus lam bounds,
       params [eps xbar ybar lambar tol amp freq]
"""

import math

import numpy as np

from ._accel import jit

OMEGA_EPS = 1e-8

MODEL_UNICYCLE_EXACT = 0
MODEL_UNICYCLE_EULER = 1
MODEL_REL_STACK = 2
MODEL_SINGLE_INTEGRATOR = 3
MODEL_MPFC = 4

COST_QUARTIC_REG = 0
COST_QUAD_DIAG = 1
COST_MPFC = 2
COST_TRACK_REF = 3

CON_NONE = 0
CON_SQUIRCLE = 1
CON_REL_COLLISION = 2
CON_MPFC_SET = 3

_SQUIRCLE_SHRINK = 2.0 ** (-0.75)


@jit
def _step(model, mp, X, k, u, delta):
    """Advance row k of the trajectory buffer X to row k+1."""
    if model == 0:  # unicycle exact
        v = u[0]
        w = u[1]
        th = X[k, 2]
        if abs(w) < OMEGA_EPS:
            X[k + 1, 0] = X[k, 0] + delta * v * math.cos(th)
            X[k + 1, 1] = X[k, 1] + delta * v * math.sin(th)
        else:
            th1 = th + delta * w
            X[k + 1, 0] = X[k, 0] + v / w * (math.sin(th1) - math.sin(th))
            X[k + 1, 1] = X[k, 1] + v / w * (math.cos(th) - math.cos(th1))
        X[k + 1, 2] = th + delta * w
    elif model == 1:  # unicycle Euler
        th = X[k, 2]
        X[k + 1, 0] = X[k, 0] + delta * u[0] * math.cos(th)
        X[k + 1, 1] = X[k, 1] + delta * u[0] * math.sin(th)
        X[k + 1, 2] = th + delta * u[1]
    elif model == 2:  # stacked relative models
        n_rob = int(mp[0])
        ground = mp[1] > 0.5
        wx = mp[2]
        wy = mp[3]
        wz = mp[4]
        wwz = mp[5]
        for i in range(n_rob):
            b = 4 * i
            th = X[k, b + 3]
            c = math.cos(th)
            s = math.sin(th)
            vx = u[b + 0]
            vy = u[b + 1]
            vz = u[b + 2]
            uz = u[b + 3]
            X[k + 1, b + 0] = X[k, b + 0] + delta * (vx * c - vy * s - wx + X[k, b + 1] * wwz)
            X[k + 1, b + 1] = X[k, b + 1] + delta * (vy * c + vx * s - wy - X[k, b + 0] * wwz)
            if ground:
                X[k + 1, b + 2] = 0.0
            else:
                X[k + 1, b + 2] = X[k, b + 2] + delta * (vz - wz)
            X[k + 1, b + 3] = X[k, b + 3] + delta * (uz - wwz)
    elif model == 3:  # single integrator
        for j in range(X.shape[1]):
            X[k + 1, j] = X[k, j] + u[j]
    else:  # path-following augmented state
        v = u[0]
        w = u[1]
        th = X[k, 2]
        if abs(w) < OMEGA_EPS:
            X[k + 1, 0] = X[k, 0] + delta * v * math.cos(th)
            X[k + 1, 1] = X[k, 1] + delta * v * math.sin(th)
        else:
            th1 = th + delta * w
            X[k + 1, 0] = X[k, 0] + v / w * (math.sin(th1) - math.sin(th))
            X[k + 1, 1] = X[k, 1] + v / w * (math.cos(th) - math.cos(th1))
        X[k + 1, 2] = th + delta * w
        X[k + 1, 3] = X[k, 3] + delta * u[2]


@jit
def _stage_cost(cost_id, cp, xref, uref, X, k, u):
    if cost_id == 0:
        ex = X[k, 0] - cp[5]
        ey = X[k, 1] - cp[6]
        et = X[k, 2] - cp[7]
        return (
            cp[0] * ex ** 4
            + cp[1] * ey ** 2
            + cp[2] * et ** 4
            + cp[3] * u[0] ** 4
            + cp[4] * u[1] ** 4
        )
    elif cost_id == 1:
        nx = X.shape[1]
        nu = u.shape[0]
        val = 0.0
        for j in range(nx):
            e = X[k, j] - cp[nx + nu + j]
            val += cp[j] * e * e
        for j in range(nu):
            val += cp[nx + j] * u[j] * u[j]
        return val
    elif cost_id == 2:
        amp = cp[7]
        freq = cp[8]
        lam = X[k, 3]
        g = u[2]
        rho = amp * math.sin(freq * lam)
        rho_d = amp * freq * math.cos(freq * lam)
        rho_dd = -amp * freq * freq * math.sin(freq * lam)
        one_p = 1.0 + rho_d * rho_d
        v_ref = g * math.sqrt(one_p)
        w_ref = g * rho_dd / one_p
        ex = X[k, 0] - lam
        ey = X[k, 1] - rho
        et = X[k, 2] - math.atan(rho_d)
        val = (
            cp[0] * ex * ex
            + cp[1] * ey * ey
            + cp[2] * et * et
            + cp[3] * lam * lam
            + cp[4] * (u[0] - v_ref) ** 2
            + cp[5] * (u[1] - w_ref) ** 2
            + cp[6] * g * g
        )
        return cp[9] * val
    else:
        nx = X.shape[1]
        nu = u.shape[0]
        val = 0.0
        for j in range(nx):
            e = X[k, j] - xref[k, j]
            val += cp[j] * e * e
        for j in range(nu):
            e = u[j] - uref[k, j]
            val += cp[nx + j] * e * e
        return val


@jit
def _terminal_cost(cost_id, cp, xref, X, n_steps):
    if cost_id == 3:
        nx = X.shape[1]
        val = 0.0
        for j in range(nx):
            e = X[n_steps, j] - xref[n_steps, j]
            val += cp[2 * nx + j] * e * e  # nu == nx for the stacked model
        return val
    return 0.0


@jit
def _smooth_abs(e, eps):
    return math.sqrt(e * e + eps)


@jit
def squircle_residual_raw(px, py, cx, cy, psi, eps_smooth):
    """Signed keep-out residual; <= 0 means the point is clear of the cell."""
    dx = px - cx
    dy = py - cy
    dist = math.sqrt(dx * dx + dy * dy)
    if dist < 1e-12:
        return psi * _SQUIRCLE_SHRINK
    beta = math.atan2(dy, dx)
    rad = psi * math.sqrt(_smooth_abs(math.cos(beta), eps_smooth)
                          + _smooth_abs(math.sin(beta), eps_smooth)) * _SQUIRCLE_SHRINK
    return rad - dist


@jit
def _stage_violations(con_id, cnp, stage_con, X, k):
    """Sum of squared positive residuals and the max residual at stage k."""
    pen = 0.0
    mx = 0.0
    if con_id == 1:
        psi = cnp[0]
        eps_s = cnp[1]
        row = k - 1
        for m in range(stage_con.shape[1]):
            if stage_con[row, m, 2] > 0.5:
                g = squircle_residual_raw(
                    X[k, 0], X[k, 1], stage_con[row, m, 0], stage_con[row, m, 1], psi, eps_s
                )
                if g > 0.0:
                    pen += g * g
                if g > mx:
                    mx = g
    elif con_id == 2:
        n_rob = int(cnp[0])
        four_rc2 = cnp[1]
        rcrp2 = cnp[2]
        for i in range(n_rob):
            bi = 4 * i
            for j in range(i + 1, n_rob):
                bj = 4 * j
                d2 = (
                    (X[k, bi] - X[k, bj]) ** 2
                    + (X[k, bi + 1] - X[k, bj + 1]) ** 2
                    + (X[k, bi + 2] - X[k, bj + 2]) ** 2
                )
                g = 1.0 - d2 / four_rc2
                if g > 0.0:
                    pen += g * g
                if g > mx:
                    mx = g
            d2o = X[k, bi] ** 2 + X[k, bi + 1] ** 2 + X[k, bi + 2] ** 2
            g = 1.0 - d2o / rcrp2
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
    elif con_id == 3:
        eps = cnp[0]
        xbar = cnp[1]
        ybar = cnp[2]
        lambar = cnp[3]
        tol = cnp[4]
        amp = cnp[5]
        freq = cnp[6]
        lam = X[k, 3]
        g = lam  # lam <= 0
        if g > 0.0:
            pen += g * g
        if g > mx:
            mx = g
        g = lambar - lam
        if g > 0.0:
            pen += g * g
        if g > mx:
            mx = g
        if lam <= -eps:
            g = X[k, 0] + eps  # x <= -eps
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
            g = -xbar - X[k, 0]
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
            g = X[k, 1] - ybar
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
            g = -ybar - X[k, 1]
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
        else:
            rho = amp * math.sin(freq * lam)
            rho_d = amp * freq * math.cos(freq * lam)
            ex = X[k, 0] - lam
            ey = X[k, 1] - rho
            et = X[k, 2] - math.atan(rho_d)
            g = math.sqrt(ex * ex + ey * ey + et * et) - tol
            if g > 0.0:
                pen += g * g
            if g > mx:
                mx = g
    return pen, mx


@jit
def _rollout(model, mp, x0, z, delta, n_steps, nx, nu):
    X = np.empty((n_steps + 1, nx))
    for j in range(nx):
        X[0, j] = x0[j]
    for k in range(n_steps):
        _step(model, mp, X, k, z[k * nu:(k + 1) * nu], delta)
    return X


@jit
def ocp_objective(z, args):
    """Penalized single-shooting objective for a flattened control vector."""
    (model, mp, x0, delta, n_steps, nx, nu, cost_id, cp, xref, uref,
     con_id, cnp, stage_con, xlo, xhi, penw) = args
    X = _rollout(model, mp, x0, z, delta, n_steps, nx, nu)
    val = 0.0
    for k in range(n_steps):
        val += _stage_cost(cost_id, cp, xref, uref, X, k, z[k * nu:(k + 1) * nu])
        if not math.isfinite(val):
            return math.inf
    val += _terminal_cost(cost_id, cp, xref, X, n_steps)
    pen = 0.0
    for k in range(1, n_steps + 1):
        for j in range(nx):
            lo = xlo[j] - X[k, j]
            if lo > 0.0:
                pen += lo * lo
            hi = X[k, j] - xhi[j]
            if hi > 0.0:
                pen += hi * hi
        if con_id != 0:
            p, _ = _stage_violations(con_id, cnp, stage_con, X, k)
            pen += p
    return val + penw * pen


@jit
def ocp_diagnostics(z, args):
    """Unpenalized cost and max constraint violation of a control vector."""
    (model, mp, x0, delta, n_steps, nx, nu, cost_id, cp, xref, uref,
     con_id, cnp, stage_con, xlo, xhi, penw) = args
    X = _rollout(model, mp, x0, z, delta, n_steps, nx, nu)
    val = 0.0
    for k in range(n_steps):
        val += _stage_cost(cost_id, cp, xref, uref, X, k, z[k * nu:(k + 1) * nu])
    val += _terminal_cost(cost_id, cp, xref, X, n_steps)
    mx = 0.0
    for k in range(1, n_steps + 1):
        for j in range(nx):
            lo = xlo[j] - X[k, j]
            if lo > mx:
                mx = lo
            hi = X[k, j] - xhi[j]
            if hi > mx:
                mx = hi
        if con_id != 0:
            _, m = _stage_violations(con_id, cnp, stage_con, X, k)
            if m > mx:
                mx = m
    return val, mx, X


@jit
def mhe_objective(z, args):
    """Arrival + output + input least-squares cost over one estimation window.

    Decision layout: [x_start(4), u(0..K-1) flat, w(0..K-1) flat].
    """
    (y_meas, u_meas, w_meas, anchor, a_diag, b_diag, c_diag,
     delta, n_win, ground, xlo, xhi, arrival_on, penw) = args
    X = np.empty((n_win + 1, 4))
    for j in range(4):
        X[0, j] = z[j]
    for k in range(n_win):
        ub = 4 + 4 * k
        wb = 4 + 4 * n_win + 4 * k
        th = X[k, 3]
        c = math.cos(th)
        s = math.sin(th)
        X[k + 1, 0] = X[k, 0] + delta * (z[ub] * c - z[ub + 1] * s - z[wb] + X[k, 1] * z[wb + 3])
        X[k + 1, 1] = X[k, 1] + delta * (z[ub + 1] * c + z[ub] * s - z[wb + 1] - X[k, 0] * z[wb + 3])
        if ground:
            X[k + 1, 2] = 0.0
        else:
            X[k + 1, 2] = X[k, 2] + delta * (z[ub + 2] - z[wb + 2])
        X[k + 1, 3] = X[k, 3] + delta * (z[ub + 3] - z[wb + 3])
    val = 0.0
    if arrival_on:
        for j in range(4):
            e = z[j] - anchor[j]
            val += a_diag[j] * e * e
    for k in range(n_win + 1):
        rho2 = X[k, 0] ** 2 + X[k, 1] ** 2
        r = math.sqrt(rho2 + X[k, 2] ** 2)
        phi = math.atan2(X[k, 1], X[k, 0])
        alp = math.atan2(X[k, 2], math.sqrt(rho2))
        er = r - y_meas[k, 0]
        ep = phi - y_meas[k, 1]
        ea = alp - y_meas[k, 2]
        val += b_diag[0] * er * er + b_diag[1] * ep * ep + b_diag[2] * ea * ea
    for k in range(n_win):
        ub = 4 + 4 * k
        wb = 4 + 4 * n_win + 4 * k
        for j in range(4):
            e = z[ub + j] - u_meas[k, j]
            val += c_diag[j] * e * e
            e = z[wb + j] - w_meas[k, j]
            val += c_diag[4 + j] * e * e
    pen = 0.0
    for k in range(1, n_win + 1):
        for j in range(4):
            lo = xlo[j] - X[k, j]
            if lo > 0.0:
                pen += lo * lo
            hi = X[k, j] - xhi[j]
            if hi > 0.0:
                pen += hi * hi
    return val + penw * pen


@jit
def mhe_rollout(z, delta, n_win, ground):
    X = np.empty((n_win + 1, 4))
    for j in range(4):
        X[0, j] = z[j]
    for k in range(n_win):
        ub = 4 + 4 * k
        wb = 4 + 4 * n_win + 4 * k
        th = X[k, 3]
        c = math.cos(th)
        s = math.sin(th)
        X[k + 1, 0] = X[k, 0] + delta * (z[ub] * c - z[ub + 1] * s - z[wb] + X[k, 1] * z[wb + 3])
        X[k + 1, 1] = X[k, 1] + delta * (z[ub + 1] * c + z[ub] * s - z[wb + 1] - X[k, 0] * z[wb + 3])
        if ground:
            X[k + 1, 2] = 0.0
        else:
            X[k + 1, 2] = X[k, 2] + delta * (z[ub + 2] - z[wb + 2])
        X[k + 1, 3] = X[k, 3] + delta * (z[ub + 3] - z[wb + 3])
    return X


# ---------------------------------------------------------------------------
# Spectral projected gradient with Armijo backtracking.  Two copies so both
# stay disk-cacheable top-level jitted functions (numba cannot cache
# closures); the algorithm is identical.
# ---------------------------------------------------------------------------

FD_REL_STEP = 1e-6
ARMIJO_C1 = 1e-4


@jit
def _project(z, lo, hi):
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        v = z[i]
        if v < lo[i]:
            v = lo[i]
        if v > hi[i]:
            v = hi[i]
        out[i] = v
    return out


@jit
def spg_ocp(z0, lo, hi, args, max_iter, ls_max, tol_step, tol_grad):
    """Projected gradient descent with BB step sizing on ocp_objective.

    Returns (z, iterations, status) with status 0 = tolerance reached,
    1 = iteration cap.
    """
    n = z0.shape[0]
    z = _project(z0, lo, hi)
    f = ocp_objective(z, args)
    g = np.empty(n)
    zt = z.copy()
    for i in range(n):
        h = FD_REL_STEP * max(1.0, abs(z[i]))
        zi = z[i]
        zt[i] = zi + h
        g[i] = (ocp_objective(zt, args) - f) / h
        zt[i] = zi
    alpha = 1.0
    gn = 0.0
    for i in range(n):
        gn += g[i] * g[i]
    gn = math.sqrt(gn)
    if gn > 1.0:
        alpha = 1.0 / gn
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        d = _project(z - alpha * g, lo, hi) - z
        dn = 0.0
        gtd = 0.0
        for i in range(n):
            dn += d[i] * d[i]
            gtd += g[i] * d[i]
        dn = math.sqrt(dn)
        if dn < tol_step or gtd >= 0.0:
            status = 0
            break
        t = 1.0
        accepted = False
        ft = f
        for _ in range(ls_max):
            zt2 = z + t * d
            ft = ocp_objective(zt2, args)
            if ft <= f + ARMIJO_C1 * t * gtd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = 0
            break
        z_new = z + t * d
        f = ft
        g_new = np.empty(n)
        for i in range(n):
            h = FD_REL_STEP * max(1.0, abs(z_new[i]))
            zi = z_new[i]
            z_new[i] = zi + h
            g_new[i] = (ocp_objective(z_new, args) - f) / h
            z_new[i] = zi
        sty = 0.0
        sts = 0.0
        for i in range(n):
            s_i = t * d[i]
            y_i = g_new[i] - g[i]
            sty += s_i * y_i
            sts += s_i * s_i
        if sty > 1e-14:
            alpha = sts / sty
            if alpha < 1e-8:
                alpha = 1e-8
            elif alpha > 1e8:
                alpha = 1e8
        else:
            alpha = min(alpha * 2.0, 1e8)
        z = z_new
        g = g_new
        pgn = 0.0
        pg = _project(z - g, lo, hi) - z
        for i in range(n):
            pgn += pg[i] * pg[i]
        if math.sqrt(pgn) < tol_grad:
            status = 0
            break
    return z, it, status


@jit
def spg_mhe(z0, lo, hi, args, max_iter, ls_max, tol_step, tol_grad):
    """Same algorithm as spg_ocp on the estimation objective."""
    n = z0.shape[0]
    z = _project(z0, lo, hi)
    f = mhe_objective(z, args)
    g = np.empty(n)
    zt = z.copy()
    for i in range(n):
        h = FD_REL_STEP * max(1.0, abs(z[i]))
        zi = z[i]
        zt[i] = zi + h
        g[i] = (mhe_objective(zt, args) - f) / h
        zt[i] = zi
    alpha = 1.0
    gn = 0.0
    for i in range(n):
        gn += g[i] * g[i]
    gn = math.sqrt(gn)
    if gn > 1.0:
        alpha = 1.0 / gn
    status = 1
    it = 0
    while it < max_iter:
        it += 1
        d = _project(z - alpha * g, lo, hi) - z
        dn = 0.0
        gtd = 0.0
        for i in range(n):
            dn += d[i] * d[i]
            gtd += g[i] * d[i]
        dn = math.sqrt(dn)
        if dn < tol_step or gtd >= 0.0:
            status = 0
            break
        t = 1.0
        accepted = False
        ft = f
        for _ in range(ls_max):
            zt2 = z + t * d
            ft = mhe_objective(zt2, args)
            if ft <= f + ARMIJO_C1 * t * gtd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = 0
            break
        z_new = z + t * d
        f = ft
        g_new = np.empty(n)
        for i in range(n):
            h = FD_REL_STEP * max(1.0, abs(z_new[i]))
            zi = z_new[i]
            z_new[i] = zi + h
            g_new[i] = (mhe_objective(z_new, args) - f) / h
            z_new[i] = zi
        sty = 0.0
        sts = 0.0
        for i in range(n):
            s_i = t * d[i]
            y_i = g_new[i] - g[i]
            sty += s_i * y_i
            sts += s_i * s_i
        if sty > 1e-14:
            alpha = sts / sty
            if alpha < 1e-8:
                alpha = 1e-8
            elif alpha > 1e8:
                alpha = 1e8
        else:
            alpha = min(alpha * 2.0, 1e8)
        z = z_new
        g = g_new
        pgn = 0.0
        pg = _project(z - g, lo, hi) - z
        for i in range(n):
            pgn += pg[i] * pg[i]
        if math.sqrt(pgn) < tol_grad:
            status = 0
            break
    return z, it, status
