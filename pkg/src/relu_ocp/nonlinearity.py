"""Pointwise nonlinearities ``y -> N(x, y)`` acting on grid functions.

The descent loop only talks to these wrappers, so the same code runs on
the exact ReLU network and on its smoothed surrogate.
"""

from __future__ import annotations

import numpy as np

from . import relu_net as rn
from . import smoothing as sm


def _state_shift(y, dy, frozen):
    """Input increment that moves only the state coordinate."""
    x = rn.stack_inputs(y, frozen)
    out = np.zeros_like(x)
    out[:, -1] = dy
    return out


class NetNonlinearity:
    """Exact ReLU network, optionally with frozen spatial coordinates."""

    smooth = False

    def __init__(self, net: rn.ReluNet, frozen=None):
        self.net = net
        self.frozen = frozen

    def value(self, y):
        return rn.forward(self.net, rn.stack_inputs(y, self.frozen))[0]

    def increment(self, y, dy):
        """``N(y + dy) - N(y)``, accurate relative to ``dy``."""
        return rn.forward_increment(self.net, rn.stack_inputs(y, self.frozen), _state_shift(y, dy, self.frozen))

    def slope(self, y):
        """Weak derivative with the indicator convention at kinks."""
        return rn.d0_state(self.net, y, self.frozen)

    def one_sided(self, y):
        return rn.one_sided_slopes(self.net, y, self.frozen)

    def directional(self, y, z):
        return rn.propagate_direction(self.net, y, z, self.frozen)

    def kink_distance(self, y):
        return rn.kink_distance_state(self.net, y, self.frozen)

    def d_eps(self, fam, y, d):
        """Smoothed directional derivative and its slope in ``d``."""
        return sm.d_eps_with_partial(self.net, fam, y, d, self.frozen)


class SmoothedNonlinearity:
    """Network with every ReLU replaced by a smooth family member."""

    smooth = True

    def __init__(self, net: rn.ReluNet, fam: sm.SmoothingFamily, frozen=None):
        self.net = net
        self.fam = fam
        self.frozen = frozen

    def _eval(self, y):
        return sm.smoothed_forward(self.net, self.fam, rn.stack_inputs(y, self.frozen))

    def value(self, y):
        return self._eval(y)[0]

    def slope(self, y):
        return self._eval(y)[1][:, -1]

    def increment(self, y, dy):
        return rn.forward_increment(self.net, rn.stack_inputs(y, self.frozen), _state_shift(y, dy, self.frozen),
                                    act=self.fam.value)

    def one_sided(self, y):
        s = self.slope(y)
        return s, s

    def directional(self, y, z):
        return self.slope(y) * z

    def kink_distance(self, y):
        return np.full(np.size(y), np.inf)

    def d_eps(self, fam, y, d):
        s = self.slope(y)
        return s * d, s
