"""Parameter containers and transformer layers on top of :mod:`deformpic.tensor`."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True, name=name)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = ""):
        out = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))  # xavier-uniform
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, affine: bool = True, eps: float = 1e-6):
        self.eps = eps
        self.gamma = parameter(np.ones(d)) if affine else None
        self.beta = parameter(np.zeros(d)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, d: int, heads: int, rng, zero_out: bool = False):
        if d % heads:
            raise ValueError(f"dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = (lin(x).reshape(b, n, h, d // h).transpose(0, 2, 1, 3)
                   for lin in (self.q, self.k, self.v))
        y = T.softmax_attention(q, k, v)                       # (b, h, n, dh)
        y = y.transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(y)


class Block(Module):
    """Pre-norm transformer block: attention and MLP sub-layers, both residual."""

    def __init__(self, d: int, heads: int, rng, mlp_ratio: int = 4, zero_out: bool = False):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng, zero_out=zero_out)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng, zero_out=zero_out)

    def __call__(self, x: Tensor, drop_path: float = 0.0, rng=None, training: bool = False):
        x = x + T.drop_path(self.attn(self.norm1(x)), drop_path, rng, training)
        return x + T.drop_path(self.mlp(self.norm2(x)), drop_path, rng, training)


class AdaLNZeroBlock(Module):
    """Transformer block modulated by a conditioning vector.

    For each sub-layer ``f`` (attention, then MLP) with its own triple
    ``(gate, scale, shift)`` obtained by zero-initialised linear maps of the
    condition ``c``::

        h <- h + gate * f((1 + scale) * LN(h) + shift)

    With the maps at zero the block is exactly the identity.
    """

    def __init__(self, d: int, heads: int, rng, mlp_ratio: int = 4):
        self.d = d
        self.norm1 = LayerNorm(d, affine=False)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d, affine=False)
        self.mlp = MLP(d, mlp_ratio * d, d, rng)
        # columns: gate_a, scale_a, shift_a, gate_m, scale_m, shift_m
        self.modulation = Linear(d, 6 * d, rng, bias=False, zero=True)

    def modulate(self, cond: Tensor):
        b = cond.shape[0]
        mod = self.modulation(cond).reshape(b, 6, 1, self.d)
        return [T.take(mod, i, axis=1) for i in range(6)]

    def __call__(self, h: Tensor, cond: Tensor, drop_path: float = 0.0, rng=None,
                 training: bool = False) -> Tensor:
        gate_a, scale_a, shift_a, gate_m, scale_m, shift_m = self.modulate(cond)
        x = T.layer_norm(h, eps=self.norm1.eps)
        x = x + x * scale_a + shift_a
        h = h + T.drop_path(gate_a * self.attn(x), drop_path, rng, training)
        x = T.layer_norm(h, eps=self.norm2.eps)
        x = x + x * scale_m + shift_m
        return h + T.drop_path(gate_m * self.mlp(x), drop_path, rng, training)
