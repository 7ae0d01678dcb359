"""Plain momentum SGD."""
import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v``.

    The step is refused (nothing is updated) if any gradient is non-finite.
    """

    def __init__(self, params, lr=0.01, momentum=0.9):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {p.name or 'parameter'}")
        for p, g, v in zip(self.params, grads, self.velocity):
            lr = np.asarray(self.lr, dtype=p.dtype)
            mom = np.asarray(self.momentum, dtype=p.dtype)
            v *= mom
            v += g
            p.data = p.data - lr * v


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Functional form on bare arrays; returns ``(new_params, new_velocity)``."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v
