"""Parameter container and the Transformer building blocks shared by models."""
from __future__ import annotations

import hashlib
import math
from collections.abc import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamStore(Mapping):
    """Ordered ``name -> Tensor`` map with fixed shapes once built."""

    def __init__(self, items: Mapping[str, np.ndarray | Tensor] | None = None, dtype=np.float32):
        self._t: dict[str, Tensor] = {}
        for name, v in (items or {}).items():
            self.add(name, v.data if isinstance(v, Tensor) else v, dtype=dtype)

    def add(self, name: str, value: np.ndarray, dtype=np.float32) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=True)
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def set(self, name: str, value: np.ndarray) -> None:
        cur = self._t[name]
        if value.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {cur.shape}")
        cur.data = np.array(value, dtype=cur.dtype)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.data for k, v in self._t.items()}, dtype=dtype)

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self._t.values())).dtype if self._t else np.float32

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self._t.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._t.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
        return h.hexdigest()

    def subset(self, prefix: str) -> list[str]:
        return [k for k in self._t if k.startswith(prefix)]


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def add_linear(ps: ParamStore, rng: np.random.Generator, name: str, d_in: int, d_out: int) -> None:
    ps.add(f"{name}.w", xavier_uniform(rng, (d_in, d_out), d_in, d_out))
    ps.add(f"{name}.b", np.zeros(d_out))


def add_layer_norm(ps: ParamStore, name: str, d: int) -> None:
    ps.add(f"{name}.g", np.ones(d))
    ps.add(f"{name}.b", np.zeros(d))


def add_block(ps: ParamStore, rng: np.random.Generator, name: str, d: int, d_ff: int) -> None:
    add_layer_norm(ps, f"{name}.ln1", d)
    for proj in ("q", "k", "v", "o"):
        add_linear(ps, rng, f"{name}.attn.{proj}", d, d)
    add_layer_norm(ps, f"{name}.ln2", d)
    add_linear(ps, rng, f"{name}.ff1", d, d_ff)
    add_linear(ps, rng, f"{name}.ff2", d_ff, d)


def linear(ps: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.linear(x, ps[f"{name}.w"], ps[f"{name}.b"])


def layer_norm(ps: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, ps[f"{name}.g"], ps[f"{name}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = ad.reshape(x, (*lead, t, n_heads, d // n_heads))
    nd = x.ndim
    return ad.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = ad.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    *lead, t, h, dk = x.shape
    return ad.reshape(x, (*lead, t, h * dk))


def multi_head_attention(ps: Mapping[str, Tensor], name: str, x: Tensor, n_heads: int) -> tuple[Tensor, Tensor]:
    """Self-attention over the time axis. Returns (output, weights (..., H, T, T))."""
    q = _split_heads(linear(ps, f"{name}.q", x), n_heads)
    k = _split_heads(linear(ps, f"{name}.k", x), n_heads)
    v = _split_heads(linear(ps, f"{name}.v", x), n_heads)
    out, w = ad.scaled_dot_attention(q, k, v)
    return linear(ps, f"{name}.o", _merge_heads(out)), w


def transformer_block(
    ps: Mapping[str, Tensor],
    name: str,
    x: Tensor,
    n_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Pre-LN block: x + MHA(LN(x)), then x + FFN(LN(x))."""
    a, w = multi_head_attention(ps, f"{name}.attn", layer_norm(ps, f"{name}.ln1", x), n_heads)
    x = ad.add(x, ad.dropout(a, dropout, rng))
    f = linear(ps, f"{name}.ff2", ad.relu(linear(ps, f"{name}.ff1", layer_norm(ps, f"{name}.ln2", x))))
    x = ad.add(x, ad.dropout(f, dropout, rng))
    return x, w


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(same)."""
    if d % 2:
        raise ValueError(f"positional encoding width must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    div = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe
