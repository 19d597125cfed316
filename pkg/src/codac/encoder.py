"""Shared encoder: dilated conv stack -> positional encoding -> attention blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from collections.abc import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamStore, add_block, positional_encoding, transformer_block, xavier_uniform

__all__ = ["EncoderConfig", "ParamStore", "init_encoder", "encode", "conv_stack", "positional_encoding"]


@dataclass
class EncoderConfig:
    d_in: int = 2
    d_hidden: int = 32
    # (kernel, dilation, out_channels); out_channels 0 means d_hidden
    conv_layers: list[tuple[int, int, int]] = field(default_factory=lambda: [(3, 1, 0), (3, 2, 0), (3, 4, 0)])
    n_attn_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.conv_layers = [tuple(int(v) for v in c) for c in self.conv_layers]
        if self.d_hidden % self.n_heads:
            raise ValueError(f"d_hidden={self.d_hidden} not divisible by n_heads={self.n_heads}")
        if self.d_hidden % 2:
            raise ValueError("d_hidden must be even for positional encodings")
        dil = [d for _, d, _ in self.conv_layers]
        if any(b <= a for a, b in zip(dil, dil[1:])):
            raise ValueError(f"dilations must be strictly increasing, got {dil}")
        if any(k % 2 == 0 for k, _, _ in self.conv_layers):
            raise ValueError("conv kernels must be odd")
        if self.conv_layers and self.channels[-1] != self.d_hidden:
            raise ValueError("last conv layer must output d_hidden channels")

    @property
    def channels(self) -> list[int]:
        return [c or self.d_hidden for _, _, c in self.conv_layers]

    def receptive_field(self) -> int:
        if not self.conv_layers:
            return 1
        k = self.conv_layers[0][0]
        if any(kk != k for kk, _, _ in self.conv_layers):
            return 1 + sum((kk - 1) * d for kk, d, _ in self.conv_layers)
        return ad.receptive_field(k, [d for _, d, _ in self.conv_layers])


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> ParamStore:
    ps = ParamStore()
    c_in = cfg.d_in
    for i, ((k, _, _), c_out) in enumerate(zip(cfg.conv_layers, cfg.channels)):
        ps.add(f"{prefix}.conv{i}.w", xavier_uniform(rng, (c_out, c_in, k), c_in * k, c_out * k))
        ps.add(f"{prefix}.conv{i}.b", np.zeros(c_out))
        c_in = c_out
    for j in range(cfg.n_attn_blocks):
        add_block(ps, rng, f"{prefix}.block{j}", cfg.d_hidden, cfg.d_ff)
    return ps


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def conv_stack(params: Mapping[str, Tensor], x, cfg: EncoderConfig, prefix: str = "enc") -> Tensor:
    """Dilated convolutions with relu between layers (none after the last)."""
    h = _as_input(x)
    if h.shape[-1] != cfg.d_in:
        raise ValueError(f"channel mismatch: got {h.shape[-1]}, encoder expects {cfg.d_in}")
    n = len(cfg.conv_layers)
    for i, (_, dil, _) in enumerate(cfg.conv_layers):
        h = ad.conv1d_dilated(h, params[f"{prefix}.conv{i}.w"], dil)
        h = ad.add(h, params[f"{prefix}.conv{i}.b"])
        if i < n - 1:
            h = ad.relu(h)
    return h


def encode(
    params: Mapping[str, Tensor],
    x,
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    prefix: str = "enc",
) -> Tensor:
    """Per-timestep representations ``(..., T, d_hidden)`` for ``x`` of shape ``(..., T, d_in)``.

    Passing ``rng`` switches on dropout (training); ``rng=None`` is eval mode.
    """
    h = conv_stack(params, x, cfg, prefix)
    T = h.shape[-2]
    h = ad.add(h, Tensor(positional_encoding(T, cfg.d_hidden).astype(h.dtype)))
    rate = cfg.dropout_rate if rng is not None else 0.0
    for j in range(cfg.n_attn_blocks):
        h, _ = transformer_block(params, f"{prefix}.block{j}", h, cfg.n_heads, rate, rng)
    return h
