"""Contextual discrepancy estimator.

A Transformer autoencoder fit to healthy segments. Each timestep is
reconstructed from its context: the sequence is split into chunks and, in
each of ``mask_passes`` passes, every ``mask_passes``-th chunk is hidden from
the model (values zeroed, indicator channel set). The reconstruction of a
timestep comes from the pass in which it was hidden, so an event the healthy
context cannot explain leaves a large residual.

The per-timestep score fuses the standardised reconstruction error with an
attention indicator derived from how concentrated the attention *received*
by each timestep is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    ParamStore,
    add_block,
    add_layer_norm,
    add_linear,
    layer_norm,
    linear,
    positional_encoding,
    transformer_block,
    xavier_uniform,
)
from .optim import Adam
from .signals import TimeSeriesSegment


class StageIsolationError(RuntimeError):
    """Raised when a training stage is handed data it must never see."""


@dataclass
class CdeConfig:
    d_in: int = 2
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 64
    d_latent: int = 8
    arch: str = "transformer"  # or "mlp" (per-timestep autoencoder, no attention)
    mask_chunk: int = 4
    mask_passes: int = 4
    embed_kernel: int = 9

    def __post_init__(self):
        if self.arch not in ("transformer", "mlp"):
            raise ValueError(f"unknown CDE architecture {self.arch!r}")
        if self.d_model % self.n_heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by n_heads")


@dataclass
class CdeModel:
    cfg: CdeConfig
    params: ParamStore
    T: int | None = None  # fixed on first training


@dataclass
class AttentionSummary:
    A_bar: np.ndarray  # (T, T), mean over layers and heads of the unmasked pass


@dataclass
class AnomalyScoreVector:
    e: np.ndarray
    a: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if not len(self.e) == len(self.a) == len(self.s):
            raise ValueError("e, a and s must have equal length")


def init_cde(cfg: CdeConfig, rng: np.random.Generator) -> CdeModel:
    ps = ParamStore()
    if cfg.arch == "mlp":
        add_linear(ps, rng, "cde.enc1", cfg.d_in, cfg.d_model)
        add_linear(ps, rng, "cde.lat", cfg.d_model, cfg.d_latent)
        add_linear(ps, rng, "cde.dec1", cfg.d_latent, cfg.d_model)
        add_linear(ps, rng, "cde.dec2", cfg.d_model, cfg.d_in)
        return CdeModel(cfg, ps)
    k = cfg.embed_kernel
    ps.add("cde.in.w", xavier_uniform(rng, (cfg.d_model, cfg.d_in + 1, k), (cfg.d_in + 1) * k, cfg.d_model * k))
    ps.add("cde.in.b", np.zeros(cfg.d_model))
    for j in range(cfg.n_blocks):
        add_block(ps, rng, f"cde.block{j}", cfg.d_model, cfg.d_ff)
    add_layer_norm(ps, "cde.ln_f", cfg.d_model)
    add_linear(ps, rng, "cde.lat", cfg.d_model, cfg.d_latent)
    add_linear(ps, rng, "cde.dec", cfg.d_latent, cfg.d_in)
    return CdeModel(cfg, ps)


def pass_masks(T: int, chunk: int, passes: int) -> np.ndarray:
    """(passes, T) boolean; each timestep is hidden in exactly one pass."""
    chunk_id = np.arange(T) // chunk
    return np.stack([(chunk_id % passes) == p for p in range(passes)])


def _forward(params, cfg: CdeConfig, x: Tensor, masks: np.ndarray | None = None) -> tuple[Tensor, list[Tensor]]:
    """x: (..., T, D) -> (x_hat (..., T, D), attention weights per block (..., P, H, T, T)).

    ``masks`` (broadcastable to (..., P, T)) picks the hiding passes; default is all
    of them, in which case every timestep of ``x_hat`` is a context prediction.
    """
    if cfg.arch == "mlp":
        h = ad.relu(linear(params, "cde.enc1", x))
        z = linear(params, "cde.lat", h)
        h = ad.relu(linear(params, "cde.dec1", z))
        return linear(params, "cde.dec2", h), []
    T = x.shape[-2]
    if masks is None:
        masks = pass_masks(T, cfg.mask_chunk, cfg.mask_passes)
    masks = masks.astype(x.dtype)
    xe = ad.reshape(x, (*x.shape[:-2], 1, T, x.shape[-1]))  # (..., 1, T, D)
    hidden = ad.mul(xe, Tensor((1.0 - masks)[..., None]))  # (..., P, T, D)
    ind = np.broadcast_to(masks[..., None], hidden.shape[:-1] + (1,)).astype(x.dtype)
    inp = ad.concat([hidden, Tensor(ind)], axis=-1)
    h = ad.add(ad.conv1d_dilated(inp, params["cde.in.w"], 1), params["cde.in.b"])
    h = ad.add(h, Tensor(positional_encoding(T, cfg.d_model).astype(x.dtype)))
    weights = []
    for j in range(cfg.n_blocks):
        h, w = transformer_block(params, f"cde.block{j}", h, cfg.n_heads)
        weights.append(w)
    h = layer_norm(params, "cde.ln_f", h)
    out = linear(params, "cde.dec", linear(params, "cde.lat", h))  # (..., P, T, D)
    # each timestep comes from the pass in which it was hidden
    x_hat = ad.sum_(ad.mul(out, Tensor(np.broadcast_to(masks[..., None], out.shape).copy())), axis=-3)
    return x_hat, weights


def _check_shape(model: CdeModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.cfg.d_in:
        raise ValueError(f"channel mismatch: got {x.shape[-1]}, CDE expects {model.cfg.d_in}")
    if model.T is not None and x.shape[-2] != model.T:
        raise ValueError(f"length mismatch: got T={x.shape[-2]}, CDE trained on T={model.T}")


def cde_loss(params, cfg: CdeConfig, x: Tensor) -> Tensor:
    """Mean over segments and timesteps of ||x_t - x_hat_t||^2."""
    x_hat, _ = _forward(params, cfg, x)
    diff = ad.sub(x, x_hat)
    per_t = ad.sum_(ad.mul(diff, diff), axis=-1)
    return ad.mean(per_t)


def cde_loss_sampled(params, cfg: CdeConfig, x: Tensor, rng: np.random.Generator) -> Tensor:
    """Unbiased one-pass estimate of :func:`cde_loss`.

    Each segment runs a single randomly chosen hiding pass and the error on its
    hidden timesteps is multiplied by the number of passes. Every timestep is
    hidden in exactly one pass, so the expectation over passes equals the full
    loss even when the passes hide different numbers of timesteps.
    """
    if cfg.arch == "mlp":
        return cde_loss(params, cfg, x)
    T = x.shape[-2]
    all_masks = pass_masks(T, cfg.mask_chunk, cfg.mask_passes)
    lead = x.shape[:-2]
    picks = rng.integers(0, cfg.mask_passes, size=lead)
    masks = all_masks[picks][..., None, :]  # (..., 1, T)
    x_hat, _ = _forward(params, cfg, x, masks)
    weight = masks[..., 0, :].astype(x.dtype) * cfg.mask_passes
    diff = ad.sub(x, x_hat)
    per_t = ad.sum_(ad.mul(diff, diff), axis=-1)
    return ad.mean(ad.mul(per_t, Tensor(weight)))


def reconstruct(model: CdeModel, x) -> tuple[np.ndarray, AttentionSummary | None]:
    """Reconstruction ``(T, D)`` (or batched) plus the averaged attention map.

    The reconstruction comes from the masked passes. The attention map is
    read from an extra pass over the intact input, since masked chunks
    distort where attention lands. The per-timestep MLP variant has no
    attention and returns ``None``.
    """
    xa = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    _check_shape(model, xa)
    x_hat, weights = _forward(model.params, model.cfg, Tensor(xa))
    if not weights:
        return x_hat.data, None
    _, weights = _forward(model.params, model.cfg, Tensor(xa), np.zeros((1, xa.shape[-2]), bool))
    # (..., 1, H, T, T) per block -> mean over blocks and heads
    stacked = np.stack([w.data for w in weights]).astype(np.float64)
    a_bar = stacked.mean(axis=(0, -4, -3))
    return x_hat.data, AttentionSummary(a_bar)


def recon_error(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """e_t = ||x_t - x_hat_t||_2^2 accumulated in float64."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    return (d * d).sum(axis=-1)


def attention_indicator(summary: AttentionSummary | np.ndarray) -> np.ndarray:
    """a_t = 1 - H(column t renormalised) / ln T; 0 ln 0 = 0; T = 1 gives [1]."""
    A = np.asarray(summary.A_bar if isinstance(summary, AttentionSummary) else summary, dtype=np.float64)
    T = A.shape[-1]
    if T == 1:
        return np.ones(A.shape[:-2] + (1,))
    col = A.sum(axis=-2, keepdims=True)
    p = A / np.where(col > 0, col, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    H = -plogp.sum(axis=-2)
    return np.clip(1.0 - H / math.log(T), 0.0, 1.0)


def zscore(v: np.ndarray) -> np.ndarray:
    """Within-vector standardisation with population std; constant -> zeros."""
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    sd = v.std(axis=-1, keepdims=True)
    scale = np.abs(v).max(axis=-1, keepdims=True)
    const = sd <= 1e-12 * scale
    return np.where(const, 0.0, (v - mu) / np.where(const, 1.0, sd))


def anomaly_score(e: np.ndarray, a: np.ndarray, beta: float = 0.5) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return zscore(e) + beta * zscore(a)


def score_segment(model: CdeModel, x, beta: float = 0.5) -> AnomalyScoreVector:
    xa = np.asarray(x, dtype=np.float32)
    x_hat, summary = reconstruct(model, xa)
    e = recon_error(xa, x_hat)
    a = attention_indicator(summary) if summary is not None else np.zeros_like(e)
    return AnomalyScoreVector(e, a, anomaly_score(e, a, beta))


def score_batch(model: CdeModel, xs: np.ndarray, beta: float = 0.5, chunk: int = 32) -> np.ndarray:
    """Scores ``(N, T)`` for a stack of segments ``(N, T, D)``."""
    out = []
    for i in range(0, len(xs), chunk):
        xb = np.asarray(xs[i : i + chunk], dtype=np.float32)
        x_hat, summary = reconstruct(model, xb)
        e = recon_error(xb, x_hat)
        a = attention_indicator(summary) if summary is not None else np.zeros_like(e)
        out.append(anomaly_score(e, a, beta))
    return np.concatenate(out) if out else np.zeros((0, 0))


def train_cde(
    model: CdeModel,
    healthy_segs: Sequence[TimeSeriesSegment],
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 16,
) -> tuple[CdeModel, list[float]]:
    """Fit the autoencoder on healthy segments with Adam; returns per-epoch mean loss."""
    for s in healthy_segs:
        if s.label != 0:
            raise StageIsolationError(f"CDE training received a non-healthy segment from {s.patient_id}")
    if not healthy_segs:
        raise ValueError("no healthy segments to train on")
    X = np.stack([s.x for s in healthy_segs]).astype(np.float32)
    _check_shape(model, X)
    model.T = X.shape[1]
    rng = np.random.default_rng([seed, 11])
    opt = Adam(model.params, lr=lr)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        tot = 0.0
        for i in range(0, len(X), batch_size):
            xb = Tensor(X[order[i : i + batch_size]])
            model.params.zero_grad()
            loss = cde_loss_sampled(model.params, model.cfg, xb, rng)
            ad.backward(loss)
            opt.step()
            tot += float(loss.data) * len(xb.data)
        curve.append(tot / len(X))
    return model, curve


def evaluate_cde_loss(model: CdeModel, segs: Sequence[TimeSeriesSegment], chunk: int = 32) -> float:
    X = np.stack([s.x for s in segs]).astype(np.float32)
    tot = 0.0
    for i in range(0, len(X), chunk):
        xb = X[i : i + chunk]
        tot += float(cde_loss(model.params, model.cfg, Tensor(xb)).data) * len(xb)
    return tot / len(X)
