"""Adam with bias correction, state keyed by parameter name."""
from collections import OrderedDict

import numpy as np


class Adam:
    def __init__(self, params: "OrderedDict", lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = OrderedDict()
        for k in self.params:
            out["m/" + k] = self.m[k]
            out["v/" + k] = self.v[k]
        return out

    def load_state(self, tensors, step):
        for k in self.params:
            self.m[k] = np.array(tensors["m/" + k], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(tensors["v/" + k], dtype=self.params[k].data.dtype)
        self.step_count = int(step)
