"""Finite differences on a rectangle with homogeneous Dirichlet data.

Unknowns live on interior nodes only.  Grid functions are flat numpy
arrays of length ``nx * ny`` ordered with the x index varying slowest,
i.e. ``field.reshape(nx, ny)[i, j]`` is the value at ``(x_i, y_j)``.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class LinearSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    ax: float
    bx: float
    ay: float
    by: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("need at least two interior nodes per direction")
        if not (self.bx > self.ax and self.by > self.ay):
            raise ValueError("empty domain")

    @classmethod
    def square(cls, length: float, n: int) -> "Grid":
        return cls(0.0, float(length), 0.0, float(length), int(n), int(n))

    @classmethod
    def from_dx(cls, length: float, dx: float) -> "Grid":
        """``length / dx`` interior nodes per direction on ``(0, length)^2``."""
        return cls.square(length, int(round(length / dx)))

    @property
    def hx(self) -> float:
        return (self.bx - self.ax) / (self.nx + 1)

    @property
    def hy(self) -> float:
        return (self.by - self.ay) / (self.ny + 1)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell(self) -> float:
        return self.hx * self.hy

    @cached_property
    def coords(self):
        x = self.ax + self.hx * np.arange(1, self.nx + 1)
        y = self.ay + self.hy * np.arange(1, self.ny + 1)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return X.ravel(), Y.ravel()

    def sample(self, fn) -> np.ndarray:
        X, Y = self.coords
        return np.asarray(fn(X, Y), dtype=float) * np.ones(self.size)

    @cached_property
    def laplacian(self) -> sp.csc_matrix:
        """Matrix of ``-Delta_h`` (five-point stencil)."""
        def second_diff(n, h):
            return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h**2

        Tx = second_diff(self.nx, self.hx)
        Ty = second_diff(self.ny, self.hy)
        A = sp.kron(Tx, sp.identity(self.ny)) + sp.kron(sp.identity(self.nx), Ty)
        return sp.csc_matrix(A)

    @cached_property
    def poisson(self) -> "EllipticOp":
        return assemble(self, None)

    @cached_property
    def lambda_min(self) -> float:
        """Smallest eigenvalue of ``-Delta_h`` (known in closed form)."""
        lx = 4 / self.hx**2 * np.sin(np.pi * self.hx / (2 * (self.bx - self.ax))) ** 2
        ly = 4 / self.hy**2 * np.sin(np.pi * self.hy / (2 * (self.by - self.ay))) ** 2
        return float(lx + ly)

    def check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.size,):
            raise ValueError(f"field has shape {v.shape}, grid expects ({self.size},)")
        return v


def laplacian_apply(grid: Grid, y) -> np.ndarray:
    return grid.laplacian @ grid.check(y)


@dataclass
class EllipticOp:
    """``A = -Delta_h + diag(c)`` with a lazily computed sparse LU factor."""

    grid: Grid
    coef: np.ndarray
    matrix: sp.csc_matrix
    _lu: object = field(default=None, repr=False)

    def apply(self, v):
        return self.matrix @ v

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise LinearSolveError(f"factorization failed: {exc}") from exc
        return self._lu

    def solve(self, rhs):
        return solve_linear(self, rhs)


_FACTOR_CACHE: OrderedDict = OrderedDict()
FACTOR_CACHE_SIZE = 16


def assemble(grid: Grid, c=None) -> EllipticOp:
    """``-Delta_h + diag(c)``.

    Operators are memoized on the exact coefficient bytes, so repeated
    solves with an unchanged coefficient (common once Newton's active
    pattern settles) reuse the sparse factorization.
    """
    key = None
    if c is not None:
        arr = np.ascontiguousarray(np.broadcast_to(np.asarray(c, dtype=float), (grid.size,)))
        key = (grid, hashlib.blake2b(arr.tobytes(), digest_size=16).digest())
        hit = _FACTOR_CACHE.get(key)
        if hit is not None:
            _FACTOR_CACHE.move_to_end(key)
            return hit
    op = _build(grid, c)
    if key is not None:
        _FACTOR_CACHE[key] = op
        if len(_FACTOR_CACHE) > FACTOR_CACHE_SIZE:
            _FACTOR_CACHE.popitem(last=False)
    return op


def _build(grid: Grid, c=None) -> EllipticOp:
    if c is None:
        coef = np.zeros(grid.size)
        M = grid.laplacian
    else:
        coef = np.broadcast_to(np.asarray(c, dtype=float), (grid.size,)).copy()
        M = sp.csc_matrix(grid.laplacian + sp.diags(coef))
    return EllipticOp(grid, coef, M)


def solve_linear(op: EllipticOp, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    d = op.lu.solve(rhs)
    if not np.all(np.isfinite(d)):
        raise LinearSolveError("non-finite solution; operator is singular or badly indefinite")
    return d


# norms -----------------------------------------------------------------

def inner(grid: Grid, a, b) -> float:
    return float(grid.cell * np.dot(a, b))


def norm_l2(grid: Grid, a) -> float:
    return float(np.sqrt(grid.cell * np.dot(a, a)))


def _forward_gradients(grid: Grid, a):
    A = np.pad(np.asarray(a, dtype=float).reshape(grid.nx, grid.ny), 1)
    gx = np.diff(A, axis=0)[:, 1:-1] / grid.hx
    gy = np.diff(A, axis=1)[1:-1, :] / grid.hy
    return gx, gy


def norm_h1(grid: Grid, a) -> float:
    gx, gy = _forward_gradients(grid, a)
    semi = grid.cell * (np.sum(gx**2) + np.sum(gy**2))
    return float(np.sqrt(norm_l2(grid, a) ** 2 + semi))


def norm_hminus1(grid: Grid, r) -> float:
    r = np.asarray(r, dtype=float)
    if not np.any(r):
        return 0.0
    w = grid.poisson.solve(r)
    return float(np.sqrt(max(grid.cell * np.dot(w, r), 0.0)))


def residual_norm(grid: Grid, r, mode: str = "Hminus1") -> float:
    if mode == "L2":
        return norm_l2(grid, r)
    if mode == "Hminus1":
        return norm_hminus1(grid, r)
    raise ValueError(f"unknown residual mode {mode!r}")


# nonsmooth state equation -----------------------------------------------

@dataclass
class NewtonResult:
    y: np.ndarray
    iters: int
    residual: float
    converged: bool
    reason: str
    history: list


def semismooth_newton(grid: Grid, F, jac_coef, y0, tol=1e-16, max_iter=50, mode="Hminus1",
                      scale=None, stall_rtol=1e-13, stall_abs=1.0) -> NewtonResult:
    """Full-step Newton for ``-Delta_h y + phi(y) = rhs``.

    ``F(y)`` returns the residual and ``jac_coef(y)`` the diagonal of the
    generalized derivative of ``phi``.  Iteration stops when the residual
    norm drops below ``tol``, when it stalls at the round-off level
    ``stall_rtol * (stall_abs + scale(y))`` or after ``max_iter`` steps.
    Pass ``stall_abs=0`` when the problem is an increment whose size has
    no absolute meaning.
    """
    y = np.array(y0, dtype=float)
    r = F(y)
    res = residual_norm(grid, r, mode)
    hist = [res]
    floor = lambda v: stall_rtol * (stall_abs + (scale(v) if scale is not None else 0.0))
    if res < tol:
        return NewtonResult(y, 0, res, True, "tolerance", hist)
    best = (res, y.copy())
    for k in range(1, max_iter + 1):
        op = assemble(grid, jac_coef(y))
        y_new = y - op.solve(r)
        r_new = F(y_new)
        res_new = residual_norm(grid, r_new, mode)
        hist.append(res_new)
        if not np.isfinite(res_new):
            break
        if res_new < best[0]:
            best = (res_new, y_new.copy())
        y, r, res_old, res = y_new, r_new, res, res_new
        if res < tol:
            return NewtonResult(y, k, res, True, "tolerance", hist)
        if res <= floor(y) and res >= 0.5 * res_old:
            return NewtonResult(best[1], k, best[0], True, "roundoff", hist)
    res, y = best
    ok = res <= floor(y)
    return NewtonResult(y, len(hist) - 1, res, ok, "roundoff" if ok else "max_iter", hist)


def solve_state(grid: Grid, nonlin, u_plus_f, y0=None, tol=1e-16, max_iter=50, coef_floor=0.0,
                mode="Hminus1") -> NewtonResult:
    """Solve ``-Delta_h y + N(y) = u + f`` by semismooth Newton.

    The generalized derivative of ``N`` is the weak derivative clamped from
    below at ``coef_floor`` (0 by default), which keeps every Newton matrix
    positive definite for monotone networks.
    """
    rhs = grid.check(u_plus_f)
    A = grid.laplacian
    rhs_scale = norm_hminus1(grid, rhs)

    def F(y):
        return A @ y + nonlin.value(y) - rhs

    def coef(y):
        return np.maximum(nonlin.slope(y), coef_floor)

    def scale(y):
        return rhs_scale + np.sqrt(max(grid.cell * y @ (A @ y), 0.0)) + norm_hminus1(grid, nonlin.value(y))

    if y0 is None:
        y0 = np.zeros(grid.size)
    out = semismooth_newton(grid, F, coef, y0, tol, max_iter, mode, scale)
    if not out.converged:
        log.warning("state solve stopped after %d iterations, residual %.3e", out.iters, out.residual)
    return out


# field I/O -------------------------------------------------------------

def write_field_csv(grid: Grid, values, path):
    X, Y = grid.coords
    v = grid.check(values)
    with open(path, "w") as fh:
        fh.write(f"# grid ax={grid.ax!r} bx={grid.bx!r} ay={grid.ay!r} by={grid.by!r} nx={grid.nx} ny={grid.ny}\n")
        fh.write("x,y,value\n")
        for a, b, c in zip(X, Y, v):
            fh.write(f"{float(a)!r},{float(b)!r},{float(c)!r}\n")


def read_field_csv(path):
    with open(path) as fh:
        meta = fh.readline().split()[2:]
        kv = dict(item.split("=") for item in meta)
        grid = Grid(float(kv["ax"]), float(kv["bx"]), float(kv["ay"]), float(kv["by"]),
                    int(kv["nx"]), int(kv["ny"]))
        data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    return grid, data[:, 2].copy()
