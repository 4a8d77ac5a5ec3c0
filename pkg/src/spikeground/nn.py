"""Minimal parameter-container layer on top of the autodiff tensors.

Modules register parameters and submodules in declaration order; the
checkpoint writer relies on that order being stable, so construct layers
deterministically and never conditionally skip a registration.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class tracking parameters, buffers and children in order."""

    def __init__(self):
        self._entries: list[tuple[str, object]] = []
        self.training = True

    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name=name)
        self._entries.append((name, t))
        return t

    def buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        """Non-trainable state (e.g. running stats). Mutate in place only."""
        buf = np.asarray(array, dtype=np.float64)
        self._entries.append((name, buf))
        return buf

    def child(self, name: str, module: "Module") -> "Module":
        self._entries.append((name, module))
        return module

    def named_states(self, prefix: str = ""):
        """Yield (name, tensor_or_buffer, is_param) in declaration order."""
        for name, obj in self._entries:
            full = f"{prefix}{name}"
            if isinstance(obj, Module):
                yield from obj.named_states(prefix=full + ".")
            elif isinstance(obj, Tensor):
                yield full, obj, True
            else:
                yield full, obj, False

    def parameters(self) -> list[Tensor]:
        return [obj for _, obj, is_p in self.named_states() if is_p]

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for _, obj in self._entries:
            if isinstance(obj, Module):
                obj.set_training(flag)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero_init else uniform_fan_in(rng, d_in, (d_in, d_out))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.rmsnorm(x, self.gain, eps=self.eps)


class BatchNorm(Module):
    """Normalizes the last axis using statistics over all leading axes.

    Training mode uses batch statistics and updates running buffers;
    eval mode applies the frozen running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self.running_mean = self.buffer("running_mean", np.zeros(dim))
        self.running_var = self.buffer("running_var", np.ones(dim))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = ad.mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = ad.mean(centered * centered, axis=axes, keepdims=True)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu.data.reshape(-1)
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var.data.reshape(-1)
            inv = ad.powi(var + self.eps, -0.5)
            return centered * inv * self.gamma + self.beta
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * inv * self.gamma + self.beta
