"""Optimal control of elliptic PDEs with ReLU-network nonlinearities."""

from .relu_net import ReluNet, from_breakpoints, max_net, two_layer_net
from .smoothing import SmoothingFamily
from .pde_grid import Grid
from .control_subproblem import BoxBounds
from .descent_driver import DescentConfig, Problem, RunReport, run

__all__ = [
    "ReluNet", "from_breakpoints", "max_net", "two_layer_net", "SmoothingFamily", "Grid",
    "BoxBounds", "DescentConfig", "Problem", "RunReport", "run",
]
__version__ = "0.1.0"
