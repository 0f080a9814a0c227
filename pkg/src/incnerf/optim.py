"""Adaptive-moment optimizer over a flat parameter vector."""

import numpy as np


class Adam:
    def __init__(self, size, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, theta, grad, mask=None, lr=None):
        """In-place update of ``theta``; entries where ``mask`` is False stay put."""
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        upd = (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype, copy=False)
        if mask is not None:
            upd = np.where(mask, upd, 0)
        theta -= upd
