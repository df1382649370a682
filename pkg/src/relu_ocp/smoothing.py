"""Smooth surrogates of the ReLU and the networks built from them.

Three families are provided.  ``PIECEWISE_POLYNOMIAL`` is the C^2 family
used by the solver; ``SOFTPLUS`` and ``QUADRATIC_KNEE`` exist to show that
replacing every activation by a smooth one can destroy monotonicity of a
network that is monotone (even identically zero) before smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .relu_net import ReluNet, _as_batch, propagate_direction, stack_inputs

PIECEWISE_POLYNOMIAL = "PiecewisePolynomial"
SOFTPLUS = "Softplus"
QUADRATIC_KNEE = "QuadraticKnee"
KINDS = (PIECEWISE_POLYNOMIAL, SOFTPLUS, QUADRATIC_KNEE)

_SOFTPLUS_CUTOFF = 35.0


@dataclass(frozen=True)
class SmoothingFamily:
    kind: str = PIECEWISE_POLYNOMIAL
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown smoothing kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def with_epsilon(self, epsilon) -> "SmoothingFamily":
        return SmoothingFamily(self.kind, float(epsilon))

    def value(self, t):
        return sigma_eps(self, t)

    def prime(self, t):
        return sigma_eps_prime(self, t)


def sigma_eps(fam: SmoothingFamily, t):
    t = np.asarray(t, dtype=float)
    e = fam.epsilon
    if fam.kind == PIECEWISE_POLYNOMIAL:
        r = np.clip(t, 0.0, e) / e
        mid = e * (r**3 - 0.5 * r**4)
        out = np.where(t >= e, t - e / 2, np.where(t <= 0, 0.0, mid))
    elif fam.kind == SOFTPLUS:
        r = t / e
        with np.errstate(over="ignore"):
            mid = e * np.log1p(np.exp(np.clip(r, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF)))
        out = np.where(r > _SOFTPLUS_CUTOFF, t, np.where(r < -_SOFTPLUS_CUTOFF, 0.0, mid))
    else:
        s = np.clip(t, -e / 2, e / 2)
        mid = (s + e / 2) ** 2 / (2 * e)
        out = np.where(t >= e / 2, t, np.where(t <= -e / 2, 0.0, mid))
    return out if out.ndim else float(out)


def sigma_eps_prime(fam: SmoothingFamily, t):
    t = np.asarray(t, dtype=float)
    e = fam.epsilon
    if fam.kind == PIECEWISE_POLYNOMIAL:
        s = np.clip(t, 0.0, e) / e
        out = np.where(t >= e, 1.0, np.where(t <= 0, 0.0, 3 * s**2 - 2 * s**3))
    elif fam.kind == SOFTPLUS:
        r = np.clip(t / e, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF)
        out = np.where(t / e > _SOFTPLUS_CUTOFF, 1.0,
                       np.where(t / e < -_SOFTPLUS_CUTOFF, 0.0, 1.0 / (1.0 + np.exp(-r))))
    else:
        s = np.clip(t, -e / 2, e / 2)
        out = np.where(t >= e / 2, 1.0, np.where(t <= -e / 2, 0.0, (s + e / 2) / e))
    return out if out.ndim else float(out)


def smoothed_forward(net: ReluNet, fam: SmoothingFamily, x):
    """Values and input gradients of the network with every ReLU replaced."""
    X = _as_batch(net, x)
    z = X.T
    G = np.repeat(np.eye(X.shape[1])[:, :, None], X.shape[0], axis=2)
    for W, b in net.layers[:-1]:
        a = W @ z + b[:, None]
        G = np.einsum("ri,ijk->rjk", W, G) * sigma_eps_prime(fam, a)[:, None, :]
        z = sigma_eps(fam, a)
    W, b = net.layers[-1]
    G = np.einsum("ri,ijk->rjk", W, G)
    return (W @ z + b[:, None])[0], G[0].T


def smoothed_net_eval(net: ReluNet, fam: SmoothingFamily, x):
    val = smoothed_forward(net, fam, x)[0]
    return float(val[0]) if val.size == 1 else val


def smoothed_net_grad(net: ReluNet, fam: SmoothingFamily, x):
    grad = smoothed_forward(net, fam, x)[1]
    return grad[0] if grad.shape[0] == 1 else grad


def d_eps(net: ReluNet, fam: SmoothingFamily, y, d, frozen=None):
    """Smoothed directional derivative along the state coordinate.

    Same recursion as the exact directional derivative but the ``max(0, .)``
    acting on directions at kinks is replaced by the smooth family.  The
    indicator of which pre-activations are positive, zero or negative is
    kept exact.
    """
    out = propagate_direction(net, y, d, frozen, act=fam.value)
    return float(out[0]) if np.ndim(y) == 0 and np.ndim(d) == 0 else out


def d_eps_partial(net: ReluNet, fam: SmoothingFamily, y, d, frozen=None):
    """Derivative of :func:`d_eps` with respect to the direction ``d``."""
    _, slope = propagate_direction(net, y, d, frozen, act=fam.value, act_prime=fam.prime)
    return float(slope[0]) if np.ndim(y) == 0 and np.ndim(d) == 0 else slope


def d_eps_with_partial(net: ReluNet, fam: SmoothingFamily, y, d, frozen=None):
    return propagate_direction(net, y, d, frozen, act=fam.value, act_prime=fam.prime)


def counterexample_fixtures(epsilon: float = 0.1):
    """Two identically-zero networks whose smoothings are not monotone.

    (a) ``s(t) + s(4t) - s(2t) - s(3t)`` with the quadratic knee, whose
        smoothed derivative behaves like ``4t/eps`` near the origin.
    (b) ``s(-s(t))`` with softplus, which becomes strictly decreasing.
    """
    lam = np.array([1.0, 4.0, 2.0, 3.0])
    net_a = ReluNet(((lam[:, None], np.zeros(4)), (np.array([[1.0, 1.0, -1.0, -1.0]]), np.zeros(1))))
    net_b = ReluNet((
        (np.array([[1.0]]), np.zeros(1)),
        (np.array([[-1.0]]), np.zeros(1)),
        (np.array([[1.0]]), np.zeros(1)),
    ))
    return [
        (net_a, SmoothingFamily(QUADRATIC_KNEE, epsilon)),
        (net_b, SmoothingFamily(SOFTPLUS, epsilon)),
    ]


def smoothed_state_value(net, fam, y, frozen=None):
    return smoothed_forward(net, fam, stack_inputs(y, frozen))[0]


def smoothed_state_slope(net, fam, y, frozen=None):
    return smoothed_forward(net, fam, stack_inputs(y, frozen))[1][:, -1]
