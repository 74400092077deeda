"""Small module system: parameters, layers, attention blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, reshape, silu, transpose


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking container; parameters are discovered by reflection."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            p = params[k]
            if p.data.shape != arr.shape:
                raise ValueError(f"{k}: checkpoint dims {arr.shape} != model dims {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        for sub, val in vars(value).items():
            yield from _walk(val, f"{name}.{sub}", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", seen)
    elif isinstance(value, dict):
        for k in value:
            yield from _walk(value[k], f"{name}.{k}", seen)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, dtype=np.float32):
        w = np.zeros((d_in, d_out), dtype) if zero_init else _uniform(rng, (d_in, d_out), d_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, zero_init: bool = False, dtype=np.float32,
                 kernel: tuple[int, int] | None = None):
        kh, kw = kernel if kernel is not None else (k, k)
        shape = (c_out, c_in, kh, kw)
        w = np.zeros(shape, dtype) if zero_init else _uniform(rng, shape, c_in * kh * kw, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype))
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def num_groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, dtype=np.float32):
        self.groups = num_groups(channels, groups)
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype))
        self.beta = Parameter(np.zeros(dim, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Multi-head attention over token sequences ``[B, N, dim]``.

    ``context`` defaults to the query tokens (self-attention). The output
    projection can be zero-initialized so the block starts as a no-op.
    """

    def __init__(self, dim: int, rng: np.random.Generator, context_dim: int | None = None,
                 heads: int = 4, zero_out: bool = False, dtype=np.float32):
        context_dim = context_dim or dim
        while dim % heads:
            heads -= 1
        self.heads = heads
        self.to_q = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.to_k = Linear(context_dim, dim, rng, bias=False, dtype=dtype)
        self.to_v = Linear(context_dim, dim, rng, bias=False, dtype=dtype)
        self.to_out = Linear(dim, dim, rng, zero_init=zero_out, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.dims
        return transpose(reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        b, n, d = x.dims
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        o = F.scaled_dot_attention(q, k, v)
        o = reshape(transpose(o, (0, 2, 1, 3)), (b, n, d))
        return self.to_out(o)


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, ``[len(t), dim]``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(x)))
