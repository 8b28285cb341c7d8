"""Adam optimizer and the step-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, TrainingError


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Defaults follow the training recipe this package ships with: learning
    rate 1e-4, beta1 0.5, beta2 0.999, weight decay 1e-5. Weight decay is
    added to the gradient (classical coupled form) unless ``decoupled`` is
    set, in which case it is applied directly to the parameters.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-5, decoupled: bool = False):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        if lr <= 0 or eps <= 0:
            raise ConfigError(f"lr and eps must be positive, got {lr}, {eps}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """One update over every parameter; returns the new parameter dict."""
        self.t += 1
        t = self.t
        out: dict[str, np.ndarray] = {}
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ConfigError(
                    f"grad shape {g.shape} does not match parameter "
                    f"{name} {theta.shape}")
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * theta
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            new = theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and self.decoupled:
                new = new - self.lr * self.weight_decay * theta
            out[name] = new
        return out

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "hyper": {
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay,
                "decoupled": self.decoupled,
            },
            "m": dict(self.m),
            "v": dict(self.v),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Adam":
        opt = cls(**state["hyper"])
        opt.t = state["t"]
        opt.m = dict(state["m"])
        opt.v = dict(state["v"])
        return opt


def lr_schedule(epoch: int, base_lr: float, decay_every: int = 15,
                factor: float = 0.1) -> float:
    """base_lr * factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if decay_every < 1:
        raise ConfigError(f"decay_every must be >= 1, got {decay_every}")
    return base_lr * factor ** (epoch // decay_every)
