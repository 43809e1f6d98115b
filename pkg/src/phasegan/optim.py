"""Adam parameter updates with a switchable learning rate.

Betas default to the GAN-standard (0.5, 0.999). Moments live in float32
so checkpoints round-trip bit-exactly.
"""

import numpy as np

from .errors import ConfigError, NumericError


class Adam:
    def __init__(self, params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        """params: ordered mapping name -> Tensor (updated in place)."""
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """One Adam update over all parameters; missing grads count as zero."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def set_lr(self, lr, reset_moments=False):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        if reset_moments:
            for m in self.m.values():
                m[:] = 0.0
            for v in self.v.values():
                v[:] = 0.0
            self.t = 0

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.m):
            raise ConfigError("optimizer state names do not match parameters")
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = state["m"][k].astype(self.m[k].dtype, copy=True)
            self.v[k] = state["v"][k].astype(self.v[k].dtype, copy=True)
