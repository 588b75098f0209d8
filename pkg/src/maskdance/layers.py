"""Small parameter containers and transformer/conv building blocks."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def _named_tensors(self, kind: str, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.name == kind:
                    yield name, val
            elif isinstance(val, Module):
                yield from val._named_tensors(kind, name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_tensors(kind, f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.name == kind:
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        return self._named_tensors("param", prefix)

    def named_buffers(self, prefix: str = ""):
        return self._named_tensors("buffer", prefix)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({n: b.data for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = dict(self.named_parameters())
        tensors.update(self.named_buffers())
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for name, t in tensors.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self


def param(data) -> Tensor:
    t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
    t.name = "param"
    return t


def buffer(data) -> Tensor:
    """Non-trainable state that still travels with checkpoints."""
    t = Tensor(np.asarray(data, dtype=np.float32))
    t.name = "buffer"
    return t


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None,
                 zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            std = std if std is not None else 1.0 / np.sqrt(n_in)
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        std = np.sqrt(2.0 / (kernel * c_in))
        self.weight = param(rng.normal(0.0, std, size=(kernel, c_in, c_out)))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng, std=0.02)
        self.proj = Linear(width, width, rng, std=0.02)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        B, n, w = x.shape
        h = self.heads
        dh = w // h
        qkv = self.qkv(x).reshape(B, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if key_bias is not None:
            scores = scores + key_bias[:, None, None, :]
        att = ad.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, w)
        return self.proj(out)


class TransformerLayer(Module):
    """Pre-norm self-attention + GELU feed-forward block."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, ff_mult: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.ff1 = Linear(width, ff_mult * width, rng, std=0.02)
        self.ff2 = Linear(ff_mult * width, width, rng, std=0.02)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_bias)
        return x + self.ff2(ad.gelu(self.ff1(self.ln2(x))))


def copy_module_params(src: Module, dst: Module) -> None:
    dst.load_state_dict({k: v.copy() for k, v in src.state_dict().items()})
