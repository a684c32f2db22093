"""In-place optimizers over lists of tensors carrying ``.grad``."""
import numpy as np


def clip_grad_norm(tensors, max_norm):
    total = np.sqrt(sum(float((t.grad * t.grad).sum()) for t in tensors if t.grad is not None))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return total


class SGD:
    def __init__(self, tensors, lr, momentum=0.0, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(t.data) for t in self.tensors]

    def step(self):
        for t, v in zip(self.tensors, self._velocity):
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data if self.weight_decay else t.grad
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            t.data -= self.lr * g

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


class Adam:
    def __init__(self, tensors, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(t.data) for t in self.tensors]
        self._v = [np.zeros_like(t.data) for t in self.tensors]
        self._t = 0

    def step(self):
        self._t += 1
        c1 = 1 - self.b1 ** self._t
        c2 = 1 - self.b2 ** self._t
        for t, m, v in zip(self.tensors, self._m, self._v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                t.data -= self.lr * self.weight_decay * t.data
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


def make_optimizer(name, tensors, lr, momentum=0.9, weight_decay=0.0):
    if name == "sgd":
        return SGD(tensors, lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return Adam(tensors, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
