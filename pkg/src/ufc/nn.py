"""Parameter containers, layers and the Adam optimiser."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and child modules; names are dotted paths."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(value, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix + cname + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = self.named_parameters()
        problems = []
        for name, p in params.items():
            if name not in state:
                if strict:
                    problems.append(f"{name}: missing")
            elif tuple(state[name].shape) != p.shape:
                problems.append(f"{name}: expected {p.shape}, got {tuple(state[name].shape)}")
        if strict:
            problems += [f"{k}: unexpected" for k in state if k not in params]
        if problems:
            raise ValueError("state mismatch: " + "; ".join(problems))
        for name, p in params.items():
            if name in state:
                p.data = np.array(state[name], dtype=p.data.dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(T.get_default_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param("weight", he_normal(rng, (n_in, n_out), n_in))
        self.bias = self.add_param("bias", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = self.add_param("weight", he_normal(rng, (k, k, c_in, c_out), c_in * k * k))
        self.bias = self.add_param("bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        # fan-in of the adjoint: input channels hitting one output pixel
        fan_in = max(1, c_in * k * k // (stride * stride))
        self.weight = self.add_param("weight", he_normal(rng, (k, k, c_in, c_out), fan_in))
        self.bias = self.add_param("bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Adam:
    """Adam with bias correction; ``lr`` may be changed between steps."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    """Cosine decay from ``base`` at epoch 0 towards 0 at ``epochs``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, epochs)))
