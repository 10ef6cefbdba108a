"""SGD with time-based learning-rate decay, and Adam.

Both optimizers mutate ParamSlot values in place and own a step counter;
gradient zeroing is the training loop's job.
"""

from __future__ import annotations

import numpy as np

from .layers import ParamSlot


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contains NaN or Inf; message names the slot."""

    def __init__(self, slot_name: str):
        super().__init__(f"non-finite gradient in parameter {slot_name!r}")
        self.slot_name = slot_name


def _check_finite(slots: list[ParamSlot]):
    for slot in slots:
        if not np.isfinite(slot.grad).all():
            raise NonFiniteGradientError(slot.name)


class Sgd:
    """value <- value - lr_eff * grad with lr_eff = lr / (1 + decay * t),
    t counting completed updates (so the first step uses the base lr)."""

    def __init__(self, lr: float = 0.05, decay: float = 1e-5):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.lr = lr
        self.decay = decay
        self.step_count = 0

    def effective_lr(self) -> float:
        return self.lr / (1.0 + self.decay * self.step_count)

    def step(self, slots: list[ParamSlot]):
        _check_finite(slots)
        lr = self.effective_lr()
        for slot in slots:
            slot.value -= (lr * slot.grad).astype(slot.value.dtype)
        self.step_count += 1

    # -- checkpoint plumbing --
    def state_meta(self) -> dict:
        return {"kind": "sgd", "lr": self.lr, "decay": self.decay,
                "step_count": self.step_count}

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    @classmethod
    def from_state(cls, meta: dict, tensors: dict) -> "Sgd":
        opt = cls(meta["lr"], meta["decay"])
        opt.step_count = int(meta["step_count"])
        return opt


class Adam:
    """Adam with bias correction; update = -lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, lr: float = 0.05, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def effective_lr(self) -> float:
        return self.lr

    def step(self, slots: list[ParamSlot]):
        _check_finite(slots)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for slot in slots:
            g = slot.grad
            m = self.m.setdefault(slot.name, np.zeros_like(slot.value))
            v = self.v.setdefault(slot.name, np.zeros_like(slot.value))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            slot.value -= update.astype(slot.value.dtype)

    # -- checkpoint plumbing --
    def state_meta(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "step_count": self.step_count}

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.m.items():
            out[f"opt/m/{name}"] = m
        for name, v in self.v.items():
            out[f"opt/v/{name}"] = v
        return out

    @classmethod
    def from_state(cls, meta: dict, tensors: dict[str, np.ndarray]) -> "Adam":
        opt = cls(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
        opt.step_count = int(meta["step_count"])
        for name, t in tensors.items():
            if name.startswith("opt/m/"):
                opt.m[name[len("opt/m/"):]] = t
            elif name.startswith("opt/v/"):
                opt.v[name[len("opt/v/"):]] = t
        return opt


def make_optimizer(kind: str, lr: float, decay: float):
    if kind == "sgd":
        return Sgd(lr=lr, decay=decay)
    if kind == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
