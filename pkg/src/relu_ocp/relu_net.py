"""Scalar-output ReLU networks and their exact piecewise-linear calculus.

A network maps ``x in R^{n0}`` to a real number through the recursion
``z_l = max(W_l z_{l-1} + b_l, 0)`` for the hidden layers followed by a
final affine map.  The last input coordinate plays the role of the PDE
state ``y``; any leading coordinates are treated as frozen parameters.

All batch routines take an array of shape ``(m, n0)`` (or a 1-D array of
states when ``n0 == 1``) and work on every row at once, which is how the
PDE solvers call them on whole grid functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


def _relu_dir(v):
    return np.maximum(v, 0.0)


@dataclass(frozen=True)
class EvalTrace:
    """Pre-activations of every hidden layer and the network output."""

    pre_activations: tuple
    output: float


@dataclass(frozen=True)
class ReluNet:
    """Layered weights ``[(W_1, b_1), ..., (W_L, b_L)]`` with scalar output.

    The final layer is affine only.  ``kink_rtol`` controls when a
    pre-activation counts as exactly zero in the derivative recursions.
    """

    layers: tuple
    kink_rtol: float = 1e-12
    _meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("a network needs at least one layer")
        fixed = []
        prev = None
        for i, (W, b) in enumerate(self.layers):
            W = np.atleast_2d(np.asarray(W, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float)).reshape(-1)
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight rows {W.shape[0]} != bias length {b.shape[0]}")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer {i}: expects {W.shape[1]} inputs, previous layer gives {prev}")
            W.setflags(write=False)
            b.setflags(write=False)
            fixed.append((W, b))
            prev = W.shape[0]
        if prev != 1:
            raise ValueError("the output layer must have a single row")
        object.__setattr__(self, "layers", tuple(fixed))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self):
        return [W.shape[0] for W, _ in self.layers[:-1]]

    def lipschitz_bound(self) -> float:
        """Product of the induced infinity norms of the weight matrices."""
        return float(np.prod([np.abs(W).sum(axis=1).max() for W, _ in self.layers]))

    # serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "layers": [
                {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReluNet":
        layers = []
        for item in doc["layers"]:
            rows, cols = item["shape"]
            W = np.asarray(item["weights"], dtype=float).reshape(rows, cols)
            layers.append((W, np.asarray(item["bias"], dtype=float)))
        return cls(tuple(layers))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "ReluNet":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            with open(text) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _as_batch(net: ReluNet, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    n0 = net.input_dim
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1) if n0 == 1 else X.reshape(1, -1)
    if X.shape[1] != n0:
        raise ValueError(f"input has {X.shape[1]} coordinates, network expects {n0}")
    return X


def stack_inputs(y, frozen=None) -> np.ndarray:
    """Build a batch ``(m, n0)`` whose last column is ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(-1)
    if frozen is None:
        return y[:, None]
    F = np.asarray(frozen, dtype=float)
    if F.ndim == 1:
        F = np.broadcast_to(F, (y.size, F.size))
    if F.shape[0] != y.size:
        raise ValueError("frozen coordinates do not match the number of states")
    return np.column_stack([F, y])


def forward(net: ReluNet, x):
    """Batch evaluation. Returns ``(values, [pre-activation arrays])``."""
    z = _as_batch(net, x).T
    pres = []
    for W, b in net.layers[:-1]:
        a = W @ z + b[:, None]
        pres.append(a)
        z = np.maximum(a, 0.0)
    W, b = net.layers[-1]
    return (W @ z + b[:, None])[0], pres


def forward_increment(net: ReluNet, x, dx, act=None):
    """``net(x + dx) - net(x)`` propagated layer by layer in increment form.

    The result is accurate relative to the size of the increment rather
    than to the size of ``net(x)``, which matters when comparing values
    whose difference is far below their magnitude.  Where a ReLU does not
    switch, the increment passes through exactly; only switching units
    subtract, and there ``|a| <= |da|``.  ``act`` replaces the ReLU
    (plain subtraction is used for it).
    """
    X = _as_batch(net, x)
    dX = np.broadcast_to(np.asarray(dx, dtype=float).reshape(X.shape[0], -1), X.shape)
    z, dz = X.T, dX.T
    for W, b in net.layers[:-1]:
        a = W @ z + b[:, None]
        da = W @ dz
        if act is None:
            an = a + da
            both_on = (a > 0) & (an > 0)
            both_off = (a <= 0) & (an <= 0)
            dz = np.where(both_on, da, np.where(both_off, 0.0, np.maximum(an, 0.0) - np.maximum(a, 0.0)))
            z = np.maximum(a, 0.0)
        else:
            za = act(a)
            dz = act(a + da) - za
            z = za
    W, _ = net.layers[-1]
    return (W @ dz)[0]


def evaluate(net: ReluNet, x):
    """Return ``(value, trace)`` for a single input point."""
    X = _as_batch(net, x)
    if X.shape[0] != 1:
        raise ValueError("evaluate takes one point; use forward for batches")
    val, pres = forward(net, X)
    return float(val[0]), EvalTrace(tuple(a[:, 0].copy() for a in pres), float(val[0]))


def kink_tolerances(net: ReluNet, x):
    """Per-layer absolute tolerances used to decide that a pre-activation is zero."""
    z = _as_batch(net, x).T
    tols = []
    for W, b in net.layers[:-1]:
        scale = np.abs(W) @ np.abs(z) + np.abs(b)[:, None]
        tols.append(net.kink_rtol * (1.0 + scale))
        z = np.maximum(W @ z + b[:, None], 0.0)
    return tols


def _trace_with_tols(net, x):
    val, pres = forward(net, x)
    return val, pres, kink_tolerances(net, x)


def weak_gradient(net: ReluNet, x) -> np.ndarray:
    """Gradient through the indicator ``1_(0, inf)`` applied to pre-activations.

    Returns an array of shape ``(m, n0)``.  At a kink the indicator is taken
    as 0, so the value is one element of a generalized derivative rather
    than a one-sided limit.
    """
    X = _as_batch(net, x)
    _, pres, tols = _trace_with_tols(net, X)
    G = np.broadcast_to(net.layers[0][0][:, :, None], net.layers[0][0].shape + (X.shape[0],))
    # G[i, j, k]: derivative of layer output i w.r.t. input j at point k
    G = np.array(G)
    for (W, _), a, tol in zip(net.layers[1:], pres, tols):
        G = np.einsum("ri,ijk->rjk", W, G * (a > tol)[:, None, :])
    return G[0].T


def weak_gradient_d0(net: ReluNet, x) -> np.ndarray:
    """Weak gradient at a single point, shape ``(n0,)``."""
    return weak_gradient(net, x)[0]


def d0_state(net: ReluNet, y, frozen=None) -> np.ndarray:
    """Weak derivative with respect to the state coordinate for many states."""
    return weak_gradient(net, stack_inputs(y, frozen))[:, -1]


def propagate_direction(net: ReluNet, y, d, frozen=None, act: Callable = _relu_dir, act_prime=None):
    """Directional recursion along the state coordinate.

    Active pre-activations pass the incoming direction linearly, inactive
    ones kill it and those sitting exactly on a kink apply ``act`` to it.
    With ``act = max(., 0)`` this is the exact directional derivative; a
    smooth ``act`` gives its smoothed counterpart.  When ``act_prime`` is
    given, the derivative of the result with respect to ``d`` is returned
    as well.
    """
    X = stack_inputs(y, frozen)
    d = np.broadcast_to(np.asarray(d, dtype=float), (X.shape[0],))
    _, pres, tols = _trace_with_tols(net, X)
    W1 = net.layers[0][0]
    v = W1[:, -1][:, None] * d[None, :]
    dv = np.broadcast_to(W1[:, -1][:, None], v.shape).copy() if act_prime is not None else None
    for (W, _), a, tol in zip(net.layers[1:], pres, tols):
        pos = a > tol
        zero = np.abs(a) <= tol
        out = np.where(pos, v, 0.0)
        if zero.any():
            out = np.where(zero, act(v), out)
        if act_prime is not None:
            dout = np.where(pos, dv, 0.0)
            if zero.any():
                dout = np.where(zero, act_prime(v) * dv, dout)
            dv = W @ dout
        v = W @ out
    if act_prime is not None:
        return v[0], dv[0]
    return v[0]


def directional_derivative(net: ReluNet, y, h, frozen=None):
    """Exact one-sided derivative ``N'(y; h)`` along the state coordinate.

    Scalars in, scalar out; arrays are handled elementwise.
    """
    out = propagate_direction(net, y, h, frozen)
    return float(out[0]) if np.ndim(y) == 0 and np.ndim(h) == 0 else out


def one_sided_slopes(net: ReluNet, y, frozen=None):
    """Right and left derivatives ``(N'(y; 1), -N'(y; -1))`` for many states."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    right = propagate_direction(net, y, 1.0, frozen)
    left = -propagate_direction(net, y, -1.0, frozen)
    return right, left


def kink_distance(net: ReluNet, x):
    """Smallest absolute hidden pre-activation; 0 means a possible kink."""
    X = _as_batch(net, x)
    _, pres = forward(net, X)
    if not pres:
        out = np.full(X.shape[0], np.inf)
    else:
        out = np.min(np.vstack([np.abs(a) for a in pres]), axis=0)
    return float(out[0]) if out.size == 1 else out


def kink_distance_state(net: ReluNet, y, frozen=None) -> np.ndarray:
    X = stack_inputs(y, frozen)
    _, pres = forward(net, X)
    if not pres:
        return np.full(X.shape[0], np.inf)
    return np.min(np.vstack([np.abs(a) for a in pres]), axis=0)


def from_breakpoints(slopes: Sequence[float], breakpoints: Sequence[float], intercept: float) -> ReluNet:
    """One-hidden-layer network for a continuous piecewise-affine map of ``t``.

    The map has slope ``slopes[0]`` left of ``breakpoints[0]``, slope
    ``slopes[i]`` between ``breakpoints[i-1]`` and ``breakpoints[i]`` and
    takes the value ``intercept`` at ``t = 0`` when extended from the first
    piece, i.e. ``f(t) = slopes[0] * t + intercept`` for ``t <= breakpoints[0]``.
    Repeated breakpoints are merged.
    """
    a = [float(s) for s in slopes]
    t = [float(v) for v in breakpoints]
    if len(a) < 1 or len(t) != len(a) - 1:
        raise ValueError("need p slopes and p-1 breakpoints")
    if any(t2 < t1 for t1, t2 in zip(t, t[1:])):
        raise ValueError("breakpoints must be sorted")
    # merge ties: the zero-length piece in between carries no weight
    keep_a, keep_t = [a[0]], []
    for i, tb in enumerate(t):
        if keep_t and tb == keep_t[-1]:
            keep_a[-1] = a[i + 1]
            continue
        keep_t.append(tb)
        keep_a.append(a[i + 1])
    a, t = keep_a, keep_t
    p = len(a)
    W1 = np.ones((p + 1, 1))
    W1[1, 0] = -1.0
    b1 = np.zeros(p + 1)
    b1[2:] = -np.asarray(t)
    W2 = np.empty((1, p + 1))
    W2[0, 0], W2[0, 1] = a[0], -a[0]
    W2[0, 2:] = np.diff(a)
    return ReluNet(((W1, b1), (W2, np.array([float(intercept)]))))


def cpwa_eval(slopes, breakpoints, intercept, t):
    """Direct evaluation of the continuous piecewise-affine map (reference)."""
    t = np.asarray(t, dtype=float)
    out = slopes[0] * t + intercept
    for i, tb in enumerate(breakpoints):
        out = out + (slopes[i + 1] - slopes[i]) * np.maximum(t - tb, 0.0)
    return out


def max_net() -> ReluNet:
    """``N(y) = max(y, 0)``."""
    return ReluNet(((np.array([[1.0]]), np.array([0.0])), (np.array([[1.0]]), np.array([0.0]))))


def two_layer_net(w23: float = -0.03) -> ReluNet:
    """Two-hidden-layer test network on a scalar state.

    ``w23`` is the weight from the third first-layer neuron into the
    second second-layer neuron; -0.03 gives a monotone map, -0.12 a
    nonmonotone one.
    """
    W0 = np.array([[5.0], [0.1], [10.0]])
    b0 = np.array([10.0, -1.0, -60.0])
    W1 = np.array([[0.3, 2.0, -0.16], [0.1, 1.0, w23]])
    b1 = np.array([0.0, 1.0])
    W2 = np.array([[2.0, 1.5]])
    b2 = np.array([0.0])
    return ReluNet(((W0, b0), (W1, b1), (W2, b2)))
