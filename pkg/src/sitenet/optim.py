"""Adam optimizer and the cosine learning-rate schedule."""

import warnings
from dataclasses import dataclass

import numpy as np


class OptimError(RuntimeError):
    """Gradient state unusable for an update step."""


@dataclass
class ScheduleParams:
    eta: float
    total_epochs: int
    eta_min: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta_min <= self.eta:
            raise ValueError(
                f"need 0 <= eta_min <= eta, got eta_min={self.eta_min}, eta={self.eta}"
            )
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


def cosine_annealing(t, params):
    """Learning rate at epoch t: eta_min + (eta - eta_min)(1 + cos(t pi / T)) / 2."""
    if t < 0:
        raise ValueError(f"epoch index must be >= 0, got {t}")
    if t > params.total_epochs:
        warnings.warn(
            f"epoch {t} beyond schedule horizon {params.total_epochs}; clamping to eta_min",
            stacklevel=2,
        )
        return params.eta_min
    span = params.eta - params.eta_min
    return params.eta_min + 0.5 * span * (1.0 + np.cos(t * np.pi / params.total_epochs))


class Adam:
    """Adam with bias correction over a named parameter list.

    Parameters with no gradient are treated as having a zero gradient, so
    their moments decay but a fresh parameter stays put.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # (name, Tensor) pairs
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise OptimError(f"duplicate parameter names: {dupes}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        names = {name for name, _ in self.params}
        for key in ("m", "v"):
            missing = names - set(state[key])
            extra = set(state[key]) - names
            if missing or extra:
                raise OptimError(
                    f"optimizer state mismatch in {key}: missing {sorted(missing)}, "
                    f"unexpected {sorted(extra)}"
                )
        self.t = int(state["t"])
        for name, p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                arr = np.asarray(state[key][name], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise OptimError(
                        f"optimizer state for {name!r} has shape {arr.shape}, "
                        f"parameter has {p.data.shape}"
                    )
                store[name] = arr
