import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays, one learning rate per name.

    Parameters are updated in place. ``remap`` reindexes the moment buffers
    along the first axis when the number of Gaussians changes.
    """

    def __init__(self, params, lrs, betas=(0.9, 0.999), eps=1e-15, frozen=()):
        self.params = params
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, grads):
        for name, g in grads.items():
            if g is None or name in self.frozen:
                continue
            p = self.params[name]
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            bc1 = 1.0 - self.beta1**t
            bc2 = 1.0 - self.beta2**t
            p -= (self.lrs[name] / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def remap(self, name, param, index):
        """Point ``name`` at a new array whose rows came from ``index`` of the old one."""
        self.params[name] = param
        index = np.asarray(index, dtype=np.int64)
        self.m[name] = self.m[name][index].copy()
        self.v[name] = self.v[name][index].copy()
