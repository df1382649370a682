"""Direction-finding subproblems of the descent method.

Given a control ``u`` with state ``y``, a direction ``h`` is obtained by
minimizing ``q(h, h)/2 + <y - g, d(h)> + alpha <u, h>`` over the box
tangent cone.  ``d(h)`` is either the linearization through the weak
derivative ``D0`` (used for initialization) or the solution of the
smoothed linearized state equation ``-Delta d + D_eps(y; d) = h``.

The curvature model is ``Q = A0^{-2} + alpha I`` with
``A0 = -Delta_h + diag(max(D0(y), 0))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .pde_grid import Grid, LinearSolveError, assemble, norm_l2, semismooth_newton

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoxBounds:
    ua: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.ua) > np.asarray(self.ub)):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def constant(cls, grid: Grid, lo: float, hi: float) -> "BoxBounds":
        return cls(np.full(grid.size, float(lo)), np.full(grid.size, float(hi)))

    def project(self, u):
        return np.clip(u, self.ua, self.ub)

    def violation(self, grid: Grid, u) -> float:
        """``||max(0, u - ub)|| + ||min(0, u - ua)||`` in discrete L2."""
        return norm_l2(grid, np.maximum(u - self.ub, 0.0)) + norm_l2(grid, np.minimum(u - self.ua, 0.0))


@dataclass(frozen=True)
class ActiveSets:
    aplus: np.ndarray
    aminus: np.ndarray

    @property
    def inactive(self):
        return ~(self.aplus | self.aminus)

    def same_as(self, other) -> bool:
        return other is not None and np.array_equal(self.aplus, other.aplus) and np.array_equal(self.aminus, other.aminus)


@dataclass
class PdasResult:
    h: np.ndarray
    mu: np.ndarray
    sets: ActiveSets
    iters: int
    residual: float
    converged: bool


@dataclass
class SubproblemSolution:
    h: np.ndarray
    d_eps: np.ndarray
    p_eps: np.ndarray
    mu: np.ndarray
    outer_iters: int = 0
    kkt_residual: float = np.inf
    rows: tuple = ()
    converged: bool = False
    nonmonotone_clamped: bool = False
    sets: ActiveSets | None = None


def complementarity_residual(u, h, mu, bounds: BoxBounds, lam):
    return mu - np.maximum(0.0, mu + lam * (u + h - bounds.ub)) - np.minimum(0.0, mu + lam * (u + h - bounds.ua))


class CurvatureModel:
    """Linearization data at a fixed state ``y``.

    Holds ``A0 = -Delta_h + diag(max(D0(y), 0))`` with its factorization,
    the exact weak derivative and the sparse ``K = A0^2`` used by the
    reduced active-set system.
    """

    def __init__(self, grid: Grid, nonlin, y):
        self.grid = grid
        self.nonlin = nonlin
        self.y = np.asarray(y, dtype=float)
        self.d0 = nonlin.slope(self.y)
        self.op0 = assemble(grid, np.maximum(self.d0, 0.0))
        self._K = None
        self._adj_op = None

    @property
    def K(self):
        if self._K is None:
            M = self.op0.matrix
            self._K = sp.csc_matrix(M @ M)
        return self._K

    def pi0(self, h):
        return self.op0.solve(h)

    def q_apply(self, h, alpha):
        s = self.op0.solve(h)
        t = self.op0.solve(s)
        return t + alpha * h, self.grid.cell * (s @ s) + alpha * self.grid.cell * (h @ h)

    def adjoint_op(self):
        """``-Delta_h + diag(D0)``, with ``D0`` floored where it would break definiteness."""
        if self._adj_op is None:
            floor = -0.5 * self.grid.lambda_min
            self._adj_op = assemble(self.grid, np.maximum(self.d0, floor))
        return self._adj_op

    def adjoint(self, rhs):
        return self.adjoint_op().solve(rhs)


def pi0_apply(grid: Grid, nonlin, y, h):
    return CurvatureModel(grid, nonlin, y).pi0(h)


def q_apply(grid: Grid, nonlin, y, h, alpha):
    return CurvatureModel(grid, nonlin, y).q_apply(h, alpha)


def default_lambda(alpha: float) -> float:
    return 1e-6 if alpha <= 1e-12 else float(alpha)


def pdas_linear(model: CurvatureModel, u, p0, bounds: BoxBounds, alpha, lam=None,
                h0=None, mu0=None, tol=1e-16, max_iter=50) -> PdasResult:
    """Primal-dual active-set solve of ``Q h + p0 + alpha u + mu = 0`` with box complementarity.

    Each iteration solves the reduced system on the current partition,
    written as ``(alpha K + diag(1_I)) t = alpha E_A (bound - u) - E_I g``
    with ``g = p0 + alpha u`` (the usual form multiplied by ``alpha``,
    which keeps it well scaled for small ``alpha``).
    """
    lam = default_lambda(alpha) if lam is None else lam
    n = model.grid.size
    u = np.asarray(u, dtype=float)
    jp = np.asarray(p0, dtype=float) + alpha * u
    h = np.zeros(n) if h0 is None else np.array(h0, dtype=float)
    mu = np.zeros(n) if mu0 is None else np.array(mu0, dtype=float)
    sets = ActiveSets(mu + lam * (u + h - bounds.ub) > 0, mu + lam * (u + h - bounds.ua) < 0)
    prev = None
    res = np.inf
    K = model.K
    for it in range(1, max_iter + 1):
        ina = sets.inactive
        act = ~ina
        target = np.where(sets.aplus, bounds.ub - u, np.where(sets.aminus, bounds.ua - u, 0.0))
        rhs = alpha * target - np.where(ina, jp, 0.0)
        M = sp.csc_matrix(alpha * K + sp.diags(ina.astype(float)))
        try:
            t = spla.splu(M, permc_spec="MMD_AT_PLUS_A").solve(rhs)
        except RuntimeError as exc:
            raise LinearSolveError(f"reduced active-set system: {exc}") from exc
        h = np.where(ina, -(t + jp) / alpha, target)
        mu = np.where(act, -t - alpha * h - jp, 0.0)
        res = norm_l2(model.grid, complementarity_residual(u, h, mu, bounds, lam))
        prev, sets = sets, ActiveSets(mu + lam * (u + h - bounds.ub) > 0, mu + lam * (u + h - bounds.ua) < 0)
        if res < tol or sets.same_as(prev):
            # an unchanged partition means this solve satisfies every row exactly
            return PdasResult(h, mu, prev, it, res, True)
    log.warning("active-set iteration hit the cap of %d (residual %.3e)", max_iter, res)
    return PdasResult(h, mu, prev, max_iter, res, False)


def _kkt_rows(grid, nonlin, fam, model, y, g, u, alpha, lam, bounds, sol):
    A = grid.laplacian
    dv, dslope = nonlin.d_eps(fam, y, sol.d_eps)
    Qh, _ = model.q_apply(sol.h, alpha)
    r1 = A @ sol.d_eps + dv - sol.h
    r2 = A @ sol.p_eps + dslope * sol.p_eps - (y - g)
    r3 = Qh + sol.p_eps + sol.mu + alpha * u
    r4 = complementarity_residual(u, sol.h, sol.mu, bounds, lam)
    rows = tuple(norm_l2(grid, r) for r in (r1, r2, r3, r4))
    return float(np.sqrt(sum(r * r for r in rows))), rows


def kkt_residual(grid, nonlin, fam, model, y, g, u, alpha, bounds, sol, lam=None):
    lam = default_lambda(alpha) if lam is None else lam
    return _kkt_rows(grid, nonlin, fam, model, y, g, u, alpha, lam, bounds, sol)


def solve_kkt_sub(model: CurvatureModel, fam, u, g, bounds: BoxBounds, alpha, lam=None,
                  warm: SubproblemSolution | None = None, tol=1e-16, max_rounds=50,
                  newton_tol=1e-16, newton_max=50) -> SubproblemSolution:
    """Alternating solve of the smoothed direction-finding KKT system.

    Round structure: (i) Newton for the smoothed linearized state
    ``d_eps`` at the current ``h`` followed by the linear adjoint with
    coefficient ``dD_eps/dd``; (ii) active-set solve for ``(h, mu)`` with
    the adjoint frozen.  Rounds repeat until the residual of the full
    system is below ``tol``, stops improving, or ``max_rounds`` is hit.
    """
    grid, nonlin, y = model.grid, model.nonlin, model.y
    lam = default_lambda(alpha) if lam is None else lam
    n = grid.size
    A = grid.laplacian
    floor = -0.5 * grid.lambda_min
    if warm is None:
        warm = SubproblemSolution(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))
    sol = replace(warm, outer_iters=0, converged=False, nonmonotone_clamped=False)
    rhs_adj = y - g
    best = None
    prev_res = np.inf
    clamped_any = False
    for rnd in range(1, max_rounds + 1):
        h = sol.h

        def F(d):
            return A @ d + nonlin.d_eps(fam, y, d)[0] - h

        def jac(d):
            return np.maximum(nonlin.d_eps(fam, y, d)[1], floor)

        def scale(d):
            return norm_l2(grid, h) / np.sqrt(grid.lambda_min) + norm_l2(grid, d)

        nr = semismooth_newton(grid, F, jac, sol.d_eps, newton_tol, newton_max, "Hminus1", scale)
        d = nr.y
        slope = nonlin.d_eps(fam, y, d)[1]
        clamped = bool(np.any(slope < floor))
        clamped_any |= clamped
        p = assemble(grid, np.maximum(slope, floor)).solve(rhs_adj)
        pd = pdas_linear(model, u, p, bounds, alpha, lam, h0=sol.h, mu0=sol.mu)
        sol = SubproblemSolution(pd.h, d, p, pd.mu, rnd, sets=pd.sets, nonmonotone_clamped=clamped_any)
        res, rows = _kkt_rows(grid, nonlin, fam, model, y, g, u, alpha, lam, bounds, sol)
        sol.kkt_residual, sol.rows = res, rows
        if best is None or res < best.kkt_residual:
            best = sol
        if res < tol:
            sol.converged = True
            return sol
        if res >= 0.9 * prev_res and np.allclose(sol.h, h, rtol=1e-12, atol=0.0):
            break
        prev_res = res
    best.converged = best.kkt_residual < tol
    return best
