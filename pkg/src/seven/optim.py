"""RMSProp parameter updates over named parameter/gradient dictionaries.

One ``step`` per batch: gradients are accumulated across both branches of
every pair (and across the discriminative and generative paths) before the
update, and are zeroed afterwards.
"""

import numpy as np

from . import config
from .errors import ShapeMismatchError

STATE_PREFIX = "opt."


class RmsProp:
    """Adaptive step sizes from a decaying mean of squared gradients.

    Per element: acc <- decay*acc + (1-decay)*g^2, then
    theta <- theta - lr * g / sqrt(acc + eps). Accumulators persist across
    steps and are keyed by parameter name, created lazily on first sight.
    """

    def __init__(self, lr=config.DEFAULT_LR, decay=config.RMSPROP_DECAY, eps=config.RMSPROP_EPS):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc = {}

    def step(self, params, grads):
        """Update ``params`` in place from ``grads``, then zero the gradients."""
        if set(params) != set(grads):
            only_p = sorted(set(params) - set(grads))
            only_g = sorted(set(grads) - set(params))
            raise ShapeMismatchError(
                f"parameter/gradient name mismatch: params-only {only_p}, grads-only {only_g}")
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if p.shape != g.shape:
                raise ShapeMismatchError(
                    f"{name}: parameter shape {p.shape} != gradient shape {g.shape}")
            acc = self.acc.get(name)
            if acc is None:
                acc = self.acc[name] = np.zeros_like(p)
            elif acc.shape != p.shape:
                raise ShapeMismatchError(
                    f"{name}: accumulator shape {acc.shape} != parameter shape {p.shape}")
            acc *= self.decay
            acc += (1.0 - self.decay) * (g * g)
            p -= self.lr * g / np.sqrt(acc + self.eps)
        zero_grads(grads)

    def state(self):
        """Accumulators under checkpoint-safe names."""
        return {STATE_PREFIX + name: value for name, value in self.acc.items()}

    def load_state(self, state):
        self.acc = {}
        for name, value in state.items():
            if not name.startswith(STATE_PREFIX):
                raise ShapeMismatchError(f"optimizer state key {name!r} lacks {STATE_PREFIX!r} prefix")
            self.acc[name[len(STATE_PREFIX):]] = np.array(value)


def zero_grads(grads):
    """Reset every gradient accumulator to exact zero, in place."""
    for value in grads.values():
        value[...] = 0
