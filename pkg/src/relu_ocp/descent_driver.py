"""Descent method for the reduced nonsmooth optimal control problem.

The problem is

    minimize  J(u) = 1/2 ||S(u) - g||^2 + alpha/2 ||u||^2   over  ua <= u <= ub,

where ``y = S(u)`` solves ``-Delta_h y + N(y) = u + f`` with a ReLU
network ``N``.  Each outer iteration computes a direction from a
quadratic model whose linear term uses smoothed directional derivatives,
certifies it against the exact directional derivative of ``J``, and
takes an Armijo step on the merit function ``J + kappa * violation``.
When the line search collapses, a few iterations on a smoothed copy of
the problem move the control away from the troublesome kink region.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .control_subproblem import (
    BoxBounds,
    CurvatureModel,
    SubproblemSolution,
    default_lambda,
    pdas_linear,
    solve_kkt_sub,
)
from .nonlinearity import SmoothedNonlinearity
from .pde_grid import Grid, assemble, inner, norm_hminus1, norm_l2, semismooth_newton, solve_state
from .smoothing import PIECEWISE_POLYNOMIAL, SmoothingFamily

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass
class DescentConfig:
    eta: float = 1e-16
    tau_min: float = 1e-16
    eps0: float = 0.1
    delta0: float = 0.1
    c: float = 0.6
    c1: float = 0.1
    c2: float = 0.1
    tilde_c: float = 0.5
    nu: float = 0.9
    kappa: float = 1.0
    beta: float = 1.1  # listed with the published parameters; nothing reads it
    h_stop: float = 1e-16
    max_outer: int = 200
    ns_tol: float = 1e-10
    lam: float | None = None
    shrink_cap: int = 30
    robust_budget: int = 20
    robustify: bool = True
    stall_iters: int = 5
    floor_rtol: float = 1e-10
    descent_rtol: float = 8 * _EPS
    state_tol: float = 1e-16
    state_max_iter: int = 50
    kkt_tol: float = 1e-16
    kkt_max_rounds: int = 50
    smoothing: str = PIECEWISE_POLYNOMIAL
    seed: int = 0

    def __post_init__(self):
        for name in ("c", "c1", "c2", "tilde_c", "nu"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.eta <= 0 or self.tau_min <= 0:
            raise ValueError("eta and tau_min must be positive")


@dataclass
class Problem:
    grid: Grid
    nonlin: object
    alpha: float
    g: np.ndarray
    f: np.ndarray
    bounds: BoxBounds
    u_exact: np.ndarray | None = None
    y_exact: np.ndarray | None = None
    name: str = ""
    u_ref: np.ndarray | None = None  # control the data were generated from, if any
    y_ref: np.ndarray | None = None

    def with_nonlinearity(self, nonlin) -> "Problem":
        return replace(self, nonlin=nonlin)


@dataclass
class IterRecord:
    k: int
    cost: float
    merit: float
    h_norm: float
    dJ: float
    tau: float
    eps: float
    delta: float
    robustified: bool
    nonsmooth_fraction: float
    eps_shrinks: int
    kkt_residual: float
    line_search_steps: int
    cpu_time: float
    merit_change: float = 0.0


CONVERGED_REASONS = ("h_stop", "precision_limit")
STAGNATION_REASONS = ("stagnation", "line_search_failed", "approximate_stationarity", "error")


@dataclass
class RunReport:
    records: list = field(default_factory=list)
    u: np.ndarray | None = None
    y: np.ndarray | None = None
    p: np.ndarray | None = None
    reason: str = ""
    converged: bool = False
    final_h_norm: float = np.inf
    cost: float = np.nan
    cpu_seconds: float = 0.0
    flags: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return sum(1 for r in self.records if not r.robustified)

    @property
    def stagnated(self) -> bool:
        """True when the run stopped because it could not make progress."""
        return self.reason in STAGNATION_REASONS

    def to_dict(self, with_fields=False) -> dict:
        out = {
            "reason": self.reason,
            "converged": self.converged,
            "stagnated": self.stagnated,
            "iterations": self.iterations,
            "final_h_norm": self.final_h_norm,
            "cost": self.cost,
            "cpu_seconds": self.cpu_seconds,
            "flags": self.flags,
            "records": [asdict(r) for r in self.records],
        }
        if with_fields:
            for name in ("u", "y", "p"):
                v = getattr(self, name)
                out[name] = None if v is None else v.tolist()
        return out

    def to_json(self, with_fields=False) -> str:
        return json.dumps(self.to_dict(with_fields))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(IterRecord.__dataclass_fields__)
        w = csv.writer(buf)
        w.writerow(names)
        for r in self.records:
            vals = [getattr(r, n) for n in names]
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in vals])
        return buf.getvalue()


# building blocks ---------------------------------------------------------

def cost(problem: Problem, u, y) -> float:
    grid = problem.grid
    r = y - problem.g
    return 0.5 * grid.cell * (r @ r) + 0.5 * problem.alpha * grid.cell * (u @ u)


def state(problem: Problem, u, y0=None, cfg: DescentConfig | None = None):
    cfg = cfg or DescentConfig()
    return solve_state(problem.grid, problem.nonlin, u + problem.f, y0,
                       tol=cfg.state_tol, max_iter=cfg.state_max_iter)


def reduced_objective(problem: Problem, u, y0=None, cfg=None):
    st = state(problem, u, y0, cfg)
    return cost(problem, u, st.y), st.y


def merit(problem: Problem, u, y, kappa) -> float:
    return cost(problem, u, y) + kappa * problem.bounds.violation(problem.grid, u)


def state_increment(problem: Problem, u, y, step, cfg: DescentConfig | None = None):
    """State change ``S(u + step) - S(u)`` solved directly in increment form.

    Solves ``-Delta_h dy + [N(y + dy) - N(y)] = step`` with ``y`` taken as
    the reference state.  Errors then scale with ``dy`` instead of with
    ``y``, so merit changes far below the merit's own rounding level stay
    measurable.  The residual already left in ``y`` is deliberately not
    fed back: it does not scale with the step and would swamp small
    changes.
    """
    cfg = cfg or DescentConfig()
    grid, nonlin = problem.grid, problem.nonlin
    A = grid.laplacian
    rhs = step
    rhs_scale = norm_hminus1(grid, rhs)

    def F(dy):
        return A @ dy + nonlin.increment(y, dy) - rhs

    def coef(dy):
        return np.maximum(nonlin.slope(y + dy), 0.0)

    def scale(dy):
        return rhs_scale + np.sqrt(max(grid.cell * dy @ (A @ dy), 0.0))

    tol = min(cfg.state_tol, 1e-3 * np.finfo(float).eps * rhs_scale)
    return semismooth_newton(grid, F, coef, np.zeros(grid.size), tol, cfg.state_max_iter,
                             "Hminus1", scale, stall_abs=0.0)


def merit_change(problem: Problem, u, y, step, dy, kappa, return_scale=False):
    """``E(u + step) - E(u)`` from the increments, without subtracting two merit values.

    With ``return_scale`` also returns the sum of absolute values of the
    terms, which bounds the rounding error of the result.
    """
    grid = problem.grid
    r = y - problem.g
    dJ = grid.cell * (dy @ (r + 0.5 * dy)) + problem.alpha * grid.cell * (step @ (u + 0.5 * step))
    viol = problem.bounds.violation
    out = float(dJ + kappa * (viol(grid, u + step) - viol(grid, u)))
    if not return_scale:
        return out
    scale = grid.cell * (np.abs(dy) @ (np.abs(r) + 0.5 * np.abs(dy)))
    scale += problem.alpha * grid.cell * (np.abs(step) @ (np.abs(u) + 0.5 * np.abs(step)))
    return out, float(scale)


def linearized_state(problem: Problem, y, h, z0=None):
    """Solve ``-Delta_h z + N'(y; z) = h`` with ``N'(y; .)`` the exact one-sided derivative.

    ``N'(y; z)`` is ``a_plus * z`` for ``z > 0`` and ``a_minus * z`` for
    ``z < 0``; Newton switches between the two slopes node by node.
    """
    grid = problem.grid
    A = grid.laplacian
    right, left = problem.nonlin.one_sided(y)

    def F(z):
        return A @ z + np.where(z > 0, right, left) * z - h

    def jac(z):
        return np.where(z > 0, right, np.where(z < 0, left, np.maximum(right, left)))

    def scale(z):
        return norm_l2(grid, h) / np.sqrt(grid.lambda_min) + norm_l2(grid, z)

    if z0 is None:
        z0 = assemble(grid, np.maximum(right, left)).solve(h)
    return semismooth_newton(grid, F, jac, z0, 1e-16, 50, "Hminus1", scale)


def reduced_dderiv(problem: Problem, u, y, h, return_scale=False):
    """Exact directional derivative ``J'(u; h) = <y - g, S'(u; h)> + alpha <u, h>``."""
    grid = problem.grid
    h = np.asarray(h, dtype=float)
    if not np.any(h):
        return (0.0, 0.0) if return_scale else 0.0
    z = linearized_state(problem, y, h).y
    a = inner(grid, y - problem.g, z)
    b = problem.alpha * inner(grid, u, h)
    if return_scale:
        # size of the terms whose cancellation limits the attainable precision
        scale = grid.cell * (np.abs(y - problem.g) @ np.abs(z)) + problem.alpha * grid.cell * (np.abs(u) @ np.abs(h))
        return a + b, scale
    return a + b


def nonsmooth_fraction(nonlin, y, ns_tol) -> float:
    """Share of nodes where the network may be nondifferentiable at ``y``."""
    if np.isinf(ns_tol):
        return 1.0
    return float(np.mean(nonlin.kink_distance(y) <= ns_tol))


@dataclass
class LineSearchResult:
    tau: float
    accepted: bool
    u: np.ndarray
    y: np.ndarray
    merit: float
    steps: int
    merit_change: float = 0.0


def armijo(problem: Problem, u, y, h, E0, dJ, cfg: DescentConfig, dJ_scale=0.0) -> LineSearchResult:
    """Backtracking on the merit function with floor ``min(tau_min, tilde_c ||h||)``.

    The merit change is evaluated in increment form and compared with
    ``nu * tau * dJ`` up to the rounding error of both sides
    (``dJ_scale`` is the absolute-value scale of ``dJ``).  Without that
    allowance exact ties, such as ``tau = 0.6`` at ``nu = 0.7`` on a
    quadratic, are decided by noise.  A step is never accepted if the
    merit goes up.
    """
    eta = min(cfg.tau_min, cfg.tilde_c * norm_l2(problem.grid, h))
    tau = 1.0
    steps = 0
    rnd = 16 * np.finfo(float).eps
    while True:
        step = tau * h
        ut = u + step
        inc = state_increment(problem, u, y, step, cfg)
        steps += 1
        if np.all(np.isfinite(inc.y)):
            dE, e_scale = merit_change(problem, u, y, step, inc.y, cfg.kappa, return_scale=True)
            slack = rnd * (e_scale + cfg.nu * tau * dJ_scale)
            if dE <= min(cfg.nu * tau * dJ + slack, 0.0):
                yt = y + inc.y
                return LineSearchResult(tau, True, ut, yt, merit(problem, ut, yt, cfg.kappa), steps, dE)
        if tau <= eta:
            return LineSearchResult(tau, False, u, y, E0, steps)
        tau *= cfg.c


def robustify(problem: Problem, u, delta, cfg: DescentConfig, budget=None):
    """A few descent iterations on the problem with a smoothed network.

    Returns ``(u_new, report)``.  The smoothed network is the same network
    with its ReLUs replaced by the configured smoothing at width ``delta``.
    """
    budget = cfg.robust_budget if budget is None else budget
    if budget <= 0:
        return np.array(u, dtype=float), None
    net = problem.nonlin.net
    fam = SmoothingFamily(cfg.smoothing, delta)
    smooth = problem.with_nonlinearity(SmoothedNonlinearity(net, fam, getattr(problem.nonlin, "frozen", None)))
    sub_cfg = replace(cfg, max_outer=budget, robustify=False)
    rep = run(smooth, sub_cfg, u0=u)
    if rep.u is None or not np.all(np.isfinite(rep.u)):
        log.warning("robustification failed; keeping the current control")
        return np.array(u, dtype=float), rep
    return rep.u, rep


def b_stationarity_residual(problem: Problem, u, y, n_dirs=16, seed=0, active_tol=1e-12) -> float:
    """Smallest ``J'(u; h)`` over sampled unit tangent directions.

    Directions are random fields projected onto the tangent cone of the
    box (nonnegative where ``u`` sits on the lower bound, nonpositive on
    the upper bound, zero where the bounds coincide), plus the projected
    negative weak gradient.  A clearly negative value certifies that ``u``
    is not stationary; values near zero are consistent with stationarity.
    """
    grid = problem.grid
    lo = u <= problem.bounds.ua + active_tol
    hi = u >= problem.bounds.ub - active_tol

    def project(v):
        v = np.where(lo, np.maximum(v, 0.0), v)
        v = np.where(hi, np.minimum(v, 0.0), v)
        return v

    model = CurvatureModel(grid, problem.nonlin, y)
    p = model.adjoint(y - problem.g)
    rng = np.random.default_rng(seed)
    cands = [-(p + problem.alpha * u)] + [rng.standard_normal(grid.size) for _ in range(n_dirs)]
    best = 0.0
    for v in cands:
        v = project(v)
        nv = norm_l2(grid, v)
        if nv == 0:
            continue
        best = min(best, reduced_dderiv(problem, u, y, v / nv))
    return best


# main loop ---------------------------------------------------------------

def run(problem: Problem, cfg: DescentConfig | None = None, u0=None) -> RunReport:
    cfg = cfg or DescentConfig()
    grid = problem.grid
    bounds = problem.bounds
    alpha = problem.alpha
    lam = cfg.lam if cfg.lam is not None else default_lambda(alpha)
    t_start = time.process_time()

    u = bounds.project(np.zeros(grid.size) if u0 is None else np.array(u0, dtype=float))
    st = state(problem, u, None, cfg)
    y = st.y
    E = merit(problem, u, y, cfg.kappa)
    eps, delta = cfg.eps0, cfg.delta0
    report = RunReport()
    report.flags = {"state_failures": 0 if st.converged else 1, "nonmonotone_clamped": False,
                    "robustifications": 0, "kkt_unconverged": 0}
    warm_d = np.zeros(grid.size)
    warm_p = np.zeros(grid.size)
    h_norm = np.inf
    mu = None
    h_prev = None
    stale = 0
    h_best = np.inf

    for k in range(cfg.max_outer):
        t0 = time.process_time()
        model = CurvatureModel(grid, problem.nonlin, y)
        p0 = model.adjoint(y - problem.g)
        lin = pdas_linear(model, u, p0, bounds, alpha, lam, h0=h_prev, mu0=mu)
        h, mu = lin.h, lin.mu
        frac = nonsmooth_fraction(problem.nonlin, y, cfg.ns_tol)
        shrinks = 0
        kkt_res = np.nan
        stop = None

        if frac > 0:
            while True:
                fam = SmoothingFamily(cfg.smoothing, eps)
                warm = SubproblemSolution(h, warm_d, warm_p, mu)
                sub = solve_kkt_sub(model, fam, u, problem.g, bounds, alpha, lam, warm,
                                    tol=cfg.kkt_tol, max_rounds=cfg.kkt_max_rounds)
                report.flags["nonmonotone_clamped"] |= sub.nonmonotone_clamped
                report.flags["kkt_unconverged"] += int(not sub.converged)
                h, mu, kkt_res = sub.h, sub.mu, sub.kkt_residual
                warm_d, warm_p = sub.d_eps, sub.p_eps
                h_norm = norm_l2(grid, h)
                if h_norm <= cfg.h_stop:
                    break
                dJ, scale = reduced_dderiv(problem, u, y, h, return_scale=True)
                if dJ < -cfg.descent_rtol * scale:
                    break
                if abs(dJ) <= cfg.descent_rtol * scale:
                    stop = "precision_limit"
                    break
                shrinks += 1
                eps *= cfg.c1
                if shrinks > cfg.shrink_cap:
                    stop = "approximate_stationarity"
                    break
        h_norm = norm_l2(grid, h)
        if stop is None and h_norm <= cfg.h_stop:
            stop = "h_stop"
        if stop is None and frac == 0:
            dJ, scale = reduced_dderiv(problem, u, y, h, return_scale=True)
            if dJ >= -cfg.descent_rtol * scale:
                stop = "precision_limit"
        if stop is not None:
            report.reason = stop
            break

        ls = armijo(problem, u, y, h, E, dJ, cfg, scale)
        # once the predicted decrease is at the rounding level of the merit
        # change, the sufficient-decrease test can no longer be decided
        unresolved = cfg.nu * abs(dJ) <= 16 * np.finfo(float).eps * scale
        if not ls.accepted and unresolved:
            report.reason = "precision_limit"
            break
        if not ls.accepted:
            if not cfg.robustify:
                report.reason = "line_search_failed"
                break
            u_new, _ = robustify(problem, u, delta, cfg)
            delta *= cfg.c2
            st = state(problem, u_new, y, cfg)
            u, y = u_new, st.y
            E = merit(problem, u, y, cfg.kappa)
            report.flags["robustifications"] += 1
            h_prev, mu = None, None
            report.records.append(IterRecord(k, cost(problem, u, y), E, h_norm, dJ, ls.tau, eps, delta, True,
                                             frac, shrinks, kkt_res, ls.steps, time.process_time() - t0))
            continue

        eps *= cfg.c1
        frozen = np.array_equal(ls.u, u)
        # ||h|| that stops improving while already at rounding level relative
        # to the control is the noise floor of the direction solve
        at_floor = unresolved or h_norm <= cfg.floor_rtol * norm_l2(grid, u)
        if h_norm >= 0.95 * h_best:
            stale += 1
        else:
            stale = 0
        h_best = min(h_best, h_norm)
        u, y, E = ls.u, ls.y, ls.merit
        h_prev = (1.0 - ls.tau) * h
        report.records.append(IterRecord(k, cost(problem, u, y), E, h_norm, dJ, ls.tau, eps, delta, False,
                                         frac, shrinks, kkt_res, ls.steps, time.process_time() - t0,
                                         ls.merit_change))
        log.debug("iter %d  J=%.10e  |h|=%.3e  tau=%.3g  frac=%.3f", k, report.records[-1].cost, h_norm, ls.tau, frac)
        if frozen:
            report.reason = "precision_limit"
            break
        if stale >= cfg.stall_iters:
            report.reason = "precision_limit" if at_floor else "stagnation"
            break
    else:
        report.reason = "max_outer"

    report.u, report.y = u, y
    report.p = CurvatureModel(grid, problem.nonlin, y).adjoint(y - problem.g)
    report.final_h_norm = h_norm
    report.cost = cost(problem, u, y)
    report.converged = report.reason in CONVERGED_REASONS
    report.cpu_seconds = time.process_time() - t_start
    return report
