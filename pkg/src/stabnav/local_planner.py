"""LIP step dynamics and a waypoint-tracking MPC with velocity constraints.

Decision variables are the step controls ``u_q = (u_f, u_dphi)`` for
``q = 0..N``; states ``x_0..x_{N+1}`` follow by roll-out.  The velocity
constraint ``|v_q|/v* + |u_dphi_q|/(w* T) <= 1`` is written as four linear
inequalities per step (one per sign pattern).  At ``q = 0`` the velocity is
fixed by the initial state, so the constraint becomes a bound on ``u_dphi_0``.
The terminal velocity ``v_{N+1}`` is held to the last step's ``v*``; without
that bound the optimum defers all motion to one large final step and the
receding-horizon loop never starts walking.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from .errors import ParameterError

_SIGNS = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))


def wrap(a):
    """Wrap to (-pi, pi]; angles already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % (2 * math.pi)


@dataclass(frozen=True)
class LipParams:
    T: float = 0.4
    H: float = 0.9
    g: float = 9.81

    def __post_init__(self):
        if not (self.T > 0 and self.H > 0 and self.g > 0):
            raise ParameterError("T, H and g must be positive")

    @property
    def omega(self) -> float:
        return math.sqrt(self.g / self.H)


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    phi: float
    v_loc: float

    def as_tuple(self):
        return (self.x, self.y, self.phi, self.v_loc)


@dataclass(frozen=True)
class Control:
    u_f: float
    u_dphi: float


def lip_local(v_loc, u_f, params: LipParams):
    """Sagittal displacement over one step and the next step's start velocity."""
    w = params.omega
    wT = w * params.T
    c, s = math.cosh(wT), math.sinh(wT)
    dx = v_loc * s / w + (1.0 - c) * u_f
    v_next = c * v_loc - w * s * u_f
    return dx, v_next


def lip_step(state: RobotState, control: Control, params: LipParams = LipParams()) -> RobotState:
    dx, v_next = lip_local(state.v_loc, control.u_f, params)
    return RobotState(state.x + dx * math.cos(state.phi),
                      state.y + dx * math.sin(state.phi),
                      wrap(state.phi + control.u_dphi),
                      v_next)


@dataclass
class MpcConfig:
    horizon: int = 5
    w_g: float = 1.0
    w_phi: float = 5.0
    w_r: float = 0.1
    u_f_max: float = 0.6
    u_dphi_max: float = 0.5
    max_iter: int = 200
    tol: float = 1e-6

    def validate(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if min(self.w_g, self.w_phi, self.w_r) < 0:
            raise ParameterError("weights must be non-negative")


@dataclass
class MpcProblem:
    x0: RobotState
    goal: tuple              # (x_g, y_g, phi_g)
    commands: np.ndarray     # (N+1, 2) of (v*, w*) per step
    config: MpcConfig = field(default_factory=MpcConfig)
    params: LipParams = field(default_factory=LipParams)

    def __post_init__(self):
        n = self.config.horizon + 1
        c = np.asarray(self.commands, dtype=float)
        if c.ndim == 1:
            c = np.tile(c, (n, 1))
        if c.shape != (n, 2):
            raise ParameterError(f"commands must have shape ({n}, 2)")
        if np.any(c < 0.001 - 1e-12):
            raise ParameterError("commands must be >= 0.001")
        self.commands = c

    @property
    def n_steps(self):
        return self.config.horizon + 1

    def bounds(self):
        cfg, n = self.config, self.n_steps
        lo = np.concatenate([np.full(n, -cfg.u_f_max), np.full(n, -cfg.u_dphi_max)])
        hi = -lo
        v0 = self.x0.v_loc
        vs, ws = self.commands[0]
        b0 = max(0.0, 1.0 - abs(v0) / vs) * ws * self.params.T
        lo[n], hi[n] = max(lo[n], -b0), min(hi[n], b0)
        return lo, hi


def rollout(problem: MpcProblem, z):
    """States ``(N+2, 4)`` for controls ``z = [u_f_0..u_f_N, u_dphi_0..u_dphi_N]``."""
    n = problem.n_steps
    st = problem.x0
    out = [st.as_tuple()]
    for q in range(n):
        st = lip_step(st, Control(z[q], z[n + q]), problem.params)
        out.append(st.as_tuple())
    return np.array(out)


def constraint_residuals(problem: MpcProblem, z):
    """Per-step violation, ``max(0, |v_q|/v* + |u_dphi_q|/(w* T) - 1)``; step 0
    uses the controllable part only (its bound on ``u_dphi_0``), and the last
    entry is the terminal bound ``|v_{N+1}| <= v*_N``."""
    n = problem.n_steps
    X = rollout(problem, z)
    T = problem.params.T
    res = np.zeros(n + 1)
    vs0, ws0 = problem.commands[0]
    budget0 = max(0.0, 1.0 - abs(X[0, 3]) / vs0)
    res[0] = max(0.0, abs(z[n]) / (ws0 * T) - budget0)
    for q in range(1, n):
        vs, ws = problem.commands[q]
        res[q] = max(0.0, abs(X[q, 3]) / vs + abs(z[n + q]) / (ws * T) - 1.0)
    res[n] = max(0.0, abs(X[n, 3]) / problem.commands[n - 1][0] - 1.0)
    return res


def objective(problem: MpcProblem, z, mu: float = 0.0, grad: bool = True):
    """Terminal + running cost, plus ``mu`` times the squared constraint hinges.

    Returns ``(value, gradient)``; the gradient is computed by a backward pass
    through the roll-out.
    """
    cfg, prm = problem.config, problem.params
    n = problem.n_steps
    a, b = z[:n], z[n:]
    w = prm.omega
    wT = w * prm.T
    C, S = math.cosh(wT), math.sinh(wT)
    xs = np.empty(n + 1)
    ys = np.empty(n + 1)
    ph = np.empty(n + 1)
    vs = np.empty(n + 1)
    d = np.empty(n)
    x0 = problem.x0
    xs[0], ys[0], ph[0], vs[0] = x0.x, x0.y, x0.phi, x0.v_loc
    for q in range(n):
        d[q] = vs[q] * S / w + (1.0 - C) * a[q]
        xs[q + 1] = xs[q] + d[q] * math.cos(ph[q])
        ys[q + 1] = ys[q] + d[q] * math.sin(ph[q])
        ph[q + 1] = ph[q] + b[q]
        vs[q + 1] = C * vs[q] - w * S * a[q]
    xg, yg, phig = problem.goal
    ex, ey = xs[n] - xg, ys[n] - yg
    eph = wrap(ph[n] - phig)
    J = cfg.w_g * (ex * ex + ey * ey) + cfg.w_phi * eph * eph
    J += cfg.w_r * (float(np.sum(vs[:n] ** 2)) + float(np.sum(b ** 2)))
    pen_v = np.zeros(n + 1)
    pen_b = np.zeros(n)
    if mu > 0:
        for q in range(1, n):
            vstar, wstar = problem.commands[q]
            cv, cb = 1.0 / vstar, 1.0 / (wstar * prm.T)
            for s1, s2 in _SIGNS:
                g = s1 * cv * vs[q] + s2 * cb * b[q] - 1.0
                if g > 0:
                    J += mu * g * g
                    pen_v[q] += 2 * mu * g * s1 * cv
                    pen_b[q] += 2 * mu * g * s2 * cb
        cv = 1.0 / problem.commands[n - 1][0]
        for s1 in (1.0, -1.0):
            g = s1 * cv * vs[n] - 1.0
            if g > 0:
                J += mu * g * g
                pen_v[n] += 2 * mu * g * s1 * cv
    if not grad:
        return J
    gx, gy = 2 * cfg.w_g * ex, 2 * cfg.w_g * ey
    lam_phi = 2 * cfg.w_phi * eph
    lam_v = pen_v[n]
    ga = np.empty(n)
    gb = np.empty(n)
    for q in range(n - 1, -1, -1):
        cph, sph = math.cos(ph[q]), math.sin(ph[q])
        gd = gx * cph + gy * sph
        ga[q] = gd * (1.0 - C) - lam_v * w * S
        gb[q] = lam_phi + 2 * cfg.w_r * b[q] + pen_b[q]
        lam_phi = lam_phi + d[q] * (-gx * sph + gy * cph)
        lam_v = lam_v * C + gd * S / w + 2 * cfg.w_r * vs[q] + pen_v[q]
    return J, np.concatenate([ga, gb])


def _restore(problem: MpcProblem, z):
    """Push a nearly feasible solution onto the constraint set, step by step."""
    z = z.copy()
    n = problem.n_steps
    prm, cfg = problem.params, problem.config
    w = prm.omega
    wT = w * prm.T
    C, S = math.cosh(wT), math.sinh(wT)
    v = problem.x0.v_loc
    for q in range(1, n + 1):
        v_next = C * v - w * S * z[q - 1]
        vstar, wstar = problem.commands[min(q, n - 1)]
        if abs(v_next) > vstar:
            target = math.copysign(vstar, v_next)
            z[q - 1] = float(np.clip((C * v - target) / (w * S), -cfg.u_f_max, cfg.u_f_max))
            v_next = C * v - w * S * z[q - 1]
        if q == n:
            break
        lim = max(0.0, 1.0 - abs(v_next) / vstar) * wstar * prm.T
        z[n + q] = float(np.clip(z[n + q], -lim, lim))
        v = v_next
    return z


@dataclass
class MpcResult:
    controls: list
    states: np.ndarray
    objective: float
    converged: bool
    iterations: int
    max_residual: float
    kkt_residual: float
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def first(self) -> Control:
        return self.controls[0]


class _VelocitySpace:
    """Change of variables ``y = [v_1..v_{N+1}, u_dphi_0..u_dphi_N]``.

    The roll-out of ``v`` is badly conditioned in ``u_f`` (each step multiplies
    by cosh(wT) ~ 2), but ``u_f_q`` is affine in ``(v_q, v_{q+1})``, so in these
    variables the velocity constraints and the ``u_f`` box are all linear.
    """

    def __init__(self, problem: MpcProblem):
        self.problem = problem
        n = problem.n_steps
        prm, cfg = problem.params, problem.config
        w = prm.omega
        C, S = math.cosh(w * prm.T), math.sinh(w * prm.T)
        # u_f_q = (C v_q - v_{q+1}) / (w S)
        M = np.zeros((n, n))
        c = np.zeros(n)
        for q in range(n):
            M[q, q] = -1.0 / (w * S)
            if q == 0:
                c[0] = C * problem.x0.v_loc / (w * S)
            else:
                M[q, q - 1] = C / (w * S)
        self.n, self.M, self.c = n, M, c
        rows, ub = [], []
        for q in range(1, n):
            vstar, wstar = problem.commands[q]
            for s1, s2 in _SIGNS:
                r = np.zeros(2 * n)
                r[q - 1] = s1 / vstar
                r[n + q] = s2 / (wstar * prm.T)
                rows.append(r)
                ub.append(1.0)
        for s in (1.0, -1.0):
            r = np.zeros(2 * n)
            r[n - 1] = s / problem.commands[n - 1][0]
            rows.append(r)
            ub.append(1.0)
        for q in range(n):
            for s in (1.0, -1.0):
                r = np.zeros(2 * n)
                r[:n] = s * M[q]
                rows.append(r)
                ub.append(cfg.u_f_max - s * c[q])
        self.A, self.ub = np.array(rows), np.array(ub)
        lo, hi = problem.bounds()
        self.bounds = [(None, None)] * n + list(zip(lo[n:], hi[n:]))

    def to_controls(self, y):
        n = self.n
        return np.concatenate([self.M @ y[:n] + self.c, y[n:]])

    def from_controls(self, z):
        n = self.n
        return np.concatenate([np.linalg.solve(self.M, z[:n] - self.c), z[n:]])

    def fun(self, y):
        J, g = objective(self.problem, self.to_controls(y), 0.0)
        return J, np.concatenate([self.M.T @ g[:self.n], g[self.n:]])

    def kkt_residual(self, y, active_tol=1e-7):
        """Stationarity residual with non-negative multipliers on active rows."""
        _, g = self.fun(y)
        n = self.n
        act = [self.A[i] for i in np.nonzero(self.A @ y - self.ub > -active_tol)[0]]
        for i in range(n, 2 * n):
            lo, hi = self.bounds[i]
            for side, active in ((1.0, y[i] >= hi - active_tol), (-1.0, y[i] <= lo + active_tol)):
                if active:
                    e = np.zeros(2 * n)
                    e[i] = side
                    act.append(e)
        if not act:
            return float(np.linalg.norm(g))
        return float(nnls(np.array(act).T, -g)[1])


def mpc_solve(x0: RobotState, waypoint, commands, config: MpcConfig | None = None,
              params: LipParams | None = None, warm_start=None, record_trace: bool = False) -> MpcResult:
    """Solve one receding-horizon problem.  ``warm_start`` is a control vector."""
    config = config or MpcConfig()
    params = params or LipParams()
    config.validate()
    # robot-relative frame: the cost only depends on position differences
    gx, gy, gphi = waypoint
    local = RobotState(0.0, 0.0, x0.phi, x0.v_loc)
    prob = MpcProblem(local, (gx - x0.x, gy - x0.y, gphi), commands, config, params)
    n = prob.n_steps
    vs = _VelocitySpace(prob)
    lo, hi = prob.bounds()
    z_init = np.zeros(2 * n) if warm_start is None else np.clip(np.asarray(warm_start, dtype=float), lo, hi)
    y = vs.from_controls(z_init)

    trace = []
    cb = None
    if record_trace:
        def cb(yk):
            zk = vs.to_controls(yk)
            trace.append((len(trace), objective(prob, zk, 0.0, grad=False),
                          float(constraint_residuals(prob, zk).max())))

    with warnings.catch_warnings():
        # SLSQP clips its own trial points onto the bounds; harmless
        warnings.simplefilter("ignore", RuntimeWarning)
        r = minimize(vs.fun, y, jac=True, method="SLSQP", bounds=vs.bounds, callback=cb,
                     constraints=[{"type": "ineq", "fun": lambda yy: vs.ub - vs.A @ yy,
                                   "jac": lambda yy: -vs.A}],
                     options={"maxiter": config.max_iter, "ftol": config.tol * 1e-4})
    kkt = vs.kkt_residual(r.x)
    z = _restore(prob, vs.to_controls(r.x))
    J = objective(prob, z, 0.0, grad=False)
    zero = np.zeros(2 * n)
    if constraint_residuals(prob, zero).max() <= 0.0:
        J0 = objective(prob, zero, 0.0, grad=False)
        if J0 <= J:
            z, J = zero, J0
    states = rollout(prob, z)
    states[:, 0] += x0.x
    states[:, 1] += x0.y
    controls = [Control(float(z[q]), float(z[n + q])) for q in range(n)]
    converged = bool(r.success) or kkt <= config.tol
    return MpcResult(controls, states, float(J), converged, int(r.nit),
                     float(constraint_residuals(prob, z).max()), kkt, str(r.message), trace)


def write_trace_csv(result: MpcResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "objective", "max_residual"])
        wr.writerows(result.trace)
