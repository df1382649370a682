"""Benchmark problems, parameter sweeps and table output."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import relu_net as rn
from .control_subproblem import BoxBounds, CurvatureModel
from .descent_driver import DescentConfig, Problem, run, state
from .nonlinearity import NetNonlinearity
from .pde_grid import Grid, norm_l2

log = logging.getLogger(__name__)

EXAMPLES = ("single-max", "two-layer-mono", "two-layer-nonmono")
NO_BOUND = 1e12


# single max: exact solution with a flat zero region -----------------------

def single_max_state(x1, x2):
    """Exact optimal state (also the adjoint): quartic in ``x1 - 1/2`` on the left half, zero on the right."""
    s = np.asarray(x1, dtype=float) - 0.5
    left = s < 0
    return np.where(left, (s**4 + 0.5 * s**3) * np.sin(np.pi * np.asarray(x2, dtype=float)), 0.0)


def single_max_neg_laplacian(x1, x2):
    """``-Delta`` of :func:`single_max_state`, worked out by hand."""
    s = np.asarray(x1, dtype=float) - 0.5
    sn = np.sin(np.pi * np.asarray(x2, dtype=float))
    val = -(12 * s**2 + 3 * s) * sn + np.pi**2 * (s**4 + 0.5 * s**3) * sn
    return np.where(s < 0, val, 0.0)


def fixture_single_max(dx: float, alpha: float) -> Problem:
    """Manufactured problem with ``N = max(., 0)`` on the unit square.

    With ``p = y*`` solving ``-Delta p + 1(y* > 0) p = y* - g`` and
    ``u* = -p / alpha``, the data are ``f = -Delta y* + max(y*, 0) - u*``
    and ``g = y* - (-Delta p + 1(y* > 0) p)``.  The bounds are placed far
    away so that no constraint is active.
    """
    grid = Grid.from_dx(1.0, dx)
    X, Y = grid.coords
    ys = single_max_state(X, Y)
    lap = single_max_neg_laplacian(X, Y)
    ps = ys
    us = -ps / alpha
    f = lap + np.maximum(ys, 0.0) - us
    g = ys - (lap + (ys > 0) * ps)
    return Problem(grid, NetNonlinearity(rn.max_net()), alpha, g, f,
                   BoxBounds.constant(grid, -NO_BOUND, NO_BOUND), u_exact=us, y_exact=ys,
                   name="single-max")


# two hidden layers -------------------------------------------------------

def fixture_two_layer(kind: str, dx: float, alpha: float, ua=-1000.0, ub=1000.0) -> Problem:
    """Problem on ``(0, 2)^2`` whose data come from a prescribed control.

    ``g0 = 200 sin(pi x) sin(pi y)``, ``u0 = clip(-Delta g0 + N(g0))`` and
    ``y0 = S(u0)``.  The target ``g`` is chosen so that ``u0`` satisfies
    the first-order system with multiplier zero: the adjoint is
    ``p0 = -alpha u0`` and ``g = y0 - (-Delta_h + D0(y0)) p0``.  Because
    ``u0`` has a kink where the clip engages, ``g`` carries a 1/dx ridge
    there and the optimal cost grows under refinement.
    """
    if kind in ("monotone", "mono"):
        w23 = -0.03
    elif kind in ("nonmonotone", "nonmono"):
        w23 = -0.12
    else:
        raise ValueError(f"unknown kind {kind!r}")
    net = rn.two_layer_net(w23)
    nonlin = NetNonlinearity(net)
    grid = Grid.from_dx(2.0, dx)
    X, Y = grid.coords
    g0 = 200 * np.sin(np.pi * X) * np.sin(np.pi * Y)
    u0 = np.clip(2 * np.pi**2 * g0 + nonlin.value(g0), ua, ub)
    f = np.zeros(grid.size)
    bounds = BoxBounds.constant(grid, ua, ub)
    tmp = Problem(grid, nonlin, alpha, np.zeros(grid.size), f, bounds)
    st = state(tmp, u0, g0)
    if not st.converged:
        raise RuntimeError("state solve failed while building the two-layer data")
    y0 = st.y
    p0 = -alpha * u0
    g = y0 - (grid.laplacian @ p0 + nonlin.slope(y0) * p0)
    return Problem(grid, nonlin, alpha, g, f, bounds, name=f"two-layer-{'mono' if w23 == -0.03 else 'nonmono'}",
                   u_ref=u0, y_ref=y0)


def make_fixture(example: str, dx: float, alpha: float) -> Problem:
    if example == "single-max":
        return fixture_single_max(dx, alpha)
    if example == "two-layer-mono":
        return fixture_two_layer("monotone", dx, alpha)
    if example == "two-layer-nonmono":
        return fixture_two_layer("nonmonotone", dx, alpha)
    raise ValueError(f"unknown example {example!r}; choose from {EXAMPLES}")


# sweeps --------------------------------------------------------------------

@dataclass
class Cell:
    example: str
    alpha: float
    dx: float
    cost: float = math.nan
    rel_err_u: float = math.nan
    rel_err_y: float = math.nan
    iterations: int = 0
    cpu_seconds: float = 0.0
    final_h_norm: float = math.nan
    converged: bool = False
    stagnated: bool = False
    reason: str = ""
    robustifications: int = 0
    error: str = ""
    log: list = field(default_factory=list)


@dataclass
class SweepResult:
    cells: list = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(c.converged for c in self.cells)

    def lookup(self, alpha, dx) -> Cell:
        for c in self.cells:
            if math.isclose(c.alpha, alpha) and math.isclose(c.dx, dx):
                return c
        raise KeyError((alpha, dx))

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, doc) -> "SweepResult":
        return cls([Cell(**c) for c in doc["cells"]])


def rel_error(grid, exact, approx) -> float:
    return norm_l2(grid, approx - exact) / norm_l2(grid, exact)


def run_cell(example, alpha, dx, cfg: DescentConfig) -> Cell:
    cell = Cell(example, float(alpha), float(dx))
    t0 = time.perf_counter()
    try:
        prob = make_fixture(example, dx, alpha)
        rep = run(prob, cfg)
    except Exception as exc:  # a failed cell must not abort the sweep
        log.exception("cell alpha=%g dx=%g failed", alpha, dx)
        cell.error = f"{type(exc).__name__}: {exc}"
        cell.stagnated = True
        cell.reason = "error"
        cell.cpu_seconds = time.perf_counter() - t0
        return cell
    cell.cpu_seconds = time.perf_counter() - t0
    cell.cost = float(rep.cost)
    cell.iterations = rep.iterations
    cell.final_h_norm = float(rep.final_h_norm)
    cell.converged = rep.converged
    cell.stagnated = rep.stagnated
    cell.reason = rep.reason
    cell.robustifications = rep.flags.get("robustifications", 0)
    cell.log = [asdict(r) for r in rep.records]
    if prob.u_exact is not None:
        cell.rel_err_u = rel_error(prob.grid, prob.u_exact, rep.u)
        cell.rel_err_y = rel_error(prob.grid, prob.y_exact, rep.y)
    return cell


def run_sweep(example: str, alphas, dxs, cfg: DescentConfig | None = None) -> SweepResult:
    cfg = cfg or DescentConfig()
    out = SweepResult()
    for a in alphas:
        for dx in dxs:
            cell = run_cell(example, a, dx, cfg)
            log.info("%s alpha=%g dx=%g: cost=%.6g iters=%d reason=%s", example, a, dx,
                     cell.cost, cell.iterations, cell.reason)
            out.cells.append(cell)
    return out


def convergence_order(errors_by_dx: dict, min_levels: int = 3) -> float:
    """Least-squares slope of ``log(err)`` against ``log(dx)``."""
    if len(errors_by_dx) < min_levels:
        raise ValueError(f"need at least {min_levels} mesh levels")
    dx = np.array(sorted(errors_by_dx), dtype=float)
    err = np.array([errors_by_dx[d] for d in sorted(errors_by_dx)], dtype=float)
    slope = np.polyfit(np.log(dx), np.log(err), 1)[0]
    return float(slope)


# output ------------------------------------------------------------------

_COLUMNS = ["example", "alpha", "dx", "cost", "rel_err_u", "rel_err_y", "final_h_norm",
            "iterations", "cpu_seconds", "converged", "stagnated", "reason", "robustifications", "error"]


def _fmt_dx(dx) -> str:
    inv = 1.0 / dx
    return f"1/{int(round(inv))}" if abs(inv - round(inv)) < 1e-9 else f"{dx:g}"


def emit(result: SweepResult, fmt: str, path=None) -> str:
    if fmt == "json":
        text = json.dumps(result.to_dict(), indent=1)
    elif fmt == "csv":
        import io

        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(_COLUMNS)
        for c in result.cells:
            row = []
            for name in _COLUMNS:
                v = getattr(c, name)
                row.append(repr(float(v)) if isinstance(v, float) else v)
            w.writerow(row)
        text = buf.getvalue()
    elif fmt == "md":
        head = ["alpha", "Mesh size", "Cost", "||u-u_h||/||u||", "||y-y_h||/||y||", "||h||", "Iterates", "CPU time"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for c in result.cells:
            lines.append("| " + " | ".join([
                f"{c.alpha:g}", f"dx={_fmt_dx(c.dx)}", f"{c.cost:.6g}", f"{c.rel_err_u:.3g}",
                f"{c.rel_err_y:.3g}", f"{c.final_h_norm:.2g}", str(c.iterations), f"{c.cpu_seconds:.1f}s",
            ]) + " |")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
