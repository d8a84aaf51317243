"""Thin parameterised layers over the tensor ops.

Each layer registers its parameters in a shared :class:`ParameterStore`
under a dotted prefix and reads them back at call time, so freezing or
reloading the store is immediately visible to every layer.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as T
from .params import ParameterStore


class Module:
    def __init__(self, store: ParameterStore, name: str):
        self.store = store
        self.name = name

    def p(self, key: str) -> T.Tensor:
        return self.store[f"{self.name}.{key}"]

    def add(self, key: str, value, trainable: bool = True) -> None:
        self.store.add(f"{self.name}.{key}", value, trainable)


class Linear(Module):
    def __init__(self, store, name, d_in, d_out, rng, bias=True, scale=1.0):
        super().__init__(store, name)
        self.add("weight", rng.normal(0.0, scale / np.sqrt(d_in), (d_in, d_out)))
        self.bias = bias
        if bias:
            self.add("bias", np.zeros(d_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = T.matmul(x, self.p("weight"))
        return y + self.p("bias") if self.bias else y


class Conv2d(Module):
    def __init__(self, store, name, c_in, c_out, rng, kernel=3, stride=1, scale=1.0):
        super().__init__(store, name)
        fan_in = kernel * kernel * c_in
        self.stride = stride
        self.add("weight", rng.normal(0.0, scale / np.sqrt(fan_in), (kernel, kernel, c_in, c_out)))
        self.add("bias", np.zeros(c_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.p("weight"), self.p("bias"), stride=self.stride)


class LayerNorm(Module):
    def __init__(self, store, name, dim):
        super().__init__(store, name)
        self.add("gamma", np.ones(dim))
        self.add("beta", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.p("gamma"), self.p("beta"))


class GroupNorm(Module):
    def __init__(self, store, name, channels, groups=8):
        super().__init__(store, name)
        self.groups = groups
        self.add("gamma", np.ones(channels))
        self.add("beta", np.zeros(channels))

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.p("gamma"), self.p("beta"))


def split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


class MultiHeadAttention(Module):
    """Attention from a query sequence to a (possibly different) context sequence."""

    def __init__(self, store, name, d_query, d_context, d_model, heads, rng):
        super().__init__(store, name)
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d_query, d_model, rng, bias=False)
        self.k = Linear(store, f"{name}.k", d_context, d_model, rng, bias=False)
        self.v = Linear(store, f"{name}.v", d_context, d_model, rng, bias=False)
        self.out = Linear(store, f"{name}.out", d_model, d_query, rng)

    def __call__(self, x, context=None, mask=None):
        context = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        return self.out(merge_heads(T.attention(q, k, v, mask)))
