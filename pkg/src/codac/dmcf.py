"""Anomaly-guided two-view contrastive pre-training objective.

Pieces, in forward order: augmentation (crop / jitter / scale), per-timestep
weights from the anomaly score through a small head, weighting of encoder
features, mean pooling, projection, and the inter-view + intra-view InfoNCE
losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from collections.abc import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, encode
from .nn import ParamStore, add_linear, linear


@dataclass
class AugmentationSpec:
    crop_frac: float = 0.8
    jitter_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < self.crop_frac <= 1:
            raise ValueError(f"crop_frac must be in (0, 1], got {self.crop_frac}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")

    @property
    def is_identity(self) -> bool:
        return self.crop_frac == 1 and self.jitter_sigma == 0 and tuple(self.scale_range) == (1, 1)

    def crop_len(self, T: int) -> int:
        return int(round(self.crop_frac * T))


@dataclass
class DmcfConfig:
    d_project: int = 16
    tau: float = 0.2
    lam: float = 0.5
    delta: int = 4
    n_pairs: int = 16
    n_negatives: int = 8
    weighting: str = "dynamic"  # dynamic | static | none
    fixed_views: bool = False
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.weighting not in ("dynamic", "static", "none"):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class View:
    x: np.ndarray  # (N, L, D)
    offset: np.ndarray  # (N,)
    w: Tensor  # (N, L)
    h: Tensor  # (N, L, d_hidden) weighted
    pooled: Tensor  # (N, d_hidden)
    z: Tensor  # (N, d_project)


@dataclass
class ViewBatch:
    views: tuple[View, View]
    loss_inter: Tensor
    loss_intra: Tensor | None
    loss: Tensor


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def augment(x: np.ndarray, spec: AugmentationSpec, seed: int | np.random.Generator) -> tuple[np.ndarray, int]:
    """Crop a contiguous window (kept at native length), add jitter, scale."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x)
    T = x.shape[0]
    L = spec.crop_len(T)
    if L < 8:
        raise ValueError(f"crop of {L} timesteps is shorter than the minimum of 8")
    offset = int(rng.integers(0, T - L + 1))
    out = x[offset : offset + L].astype(np.float64)
    if spec.jitter_sigma > 0:
        out = out + rng.normal(0.0, spec.jitter_sigma, size=out.shape)
    lo, hi = spec.scale_range
    out = out * (rng.uniform(lo, hi) if hi > lo else lo)
    return out.astype(x.dtype), offset


def augment_batch(X: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    views, offs = zip(*(augment(x, spec, rng) for x in X))
    return np.stack(views), np.array(offs)


# ---------------------------------------------------------------------------
# weighting, pooling, projection
# ---------------------------------------------------------------------------
def init_weight_head(rng: np.random.Generator, hidden: int = 8) -> ParamStore:
    """1 -> hidden -> 1 perceptron, initialised increasing in the score.

    Scores near the segment mean map to w of about 0.27; scores two standard
    deviations up saturate towards 1.
    """
    ps = ParamStore()
    ps.add("wh.l1.w", rng.uniform(0.5, 1.5, size=(1, hidden)))
    ps.add("wh.l1.b", np.zeros(hidden))
    ps.add("wh.l2.w", np.full((hidden, 1), 4.0 / hidden))
    ps.add("wh.l2.b", np.full(1, -1.0))
    return ps


def zero_weight_head(hidden: int = 8) -> ParamStore:
    ps = ParamStore()
    ps.add("wh.l1.w", np.zeros((1, hidden)))
    ps.add("wh.l1.b", np.zeros(hidden))
    ps.add("wh.l2.w", np.zeros((hidden, 1)))
    ps.add("wh.l2.b", np.zeros(1))
    return ps


def weight_from_score(head: Mapping[str, Tensor], s) -> Tensor:
    """w = sigmoid(MLP(s)) elementwise over any shape of scores."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=head["wh.l1.w"].dtype))
    col = ad.reshape(s, s.shape + (1,))
    hid = ad.relu(linear(head, "wh.l1", col))
    out = linear(head, "wh.l2", hid)
    return ad.sigmoid(ad.reshape(out, s.shape))


def apply_weights(h: Tensor, w) -> Tensor:
    """h'_t = w_t * h_t for h of shape (..., T, d) and w of shape (..., T)."""
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=h.dtype))
    if w.shape != h.shape[:-1]:
        raise ValueError(f"weight shape {w.shape} does not match features {h.shape}")
    return ad.mul(h, ad.reshape(w, w.shape + (1,)))


def init_projection(rng: np.random.Generator, d_hidden: int, d_project: int = 16) -> ParamStore:
    ps = ParamStore()
    add_linear(ps, rng, "proj.l1", d_hidden, d_hidden)
    add_linear(ps, rng, "proj.l2", d_hidden, d_project)
    return ps


def pool_and_project(h: Tensor, proj: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Returns (pooled (..., d_hidden), z (..., d_project))."""
    pooled = ad.global_mean_pool(h)
    z = linear(proj, "proj.l2", ad.relu(linear(proj, "proj.l1", pooled)))
    return pooled, z


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def loss_inter(z1: Tensor, z2: Tensor, tau: float = 0.2) -> Tensor:
    """Symmetric InfoNCE between matched rows of two (N, d) view embeddings.

    Similarity is cosine; row i of each view is the positive for row i of the
    other, all rows of the other view form the denominator.
    """
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"expected two (N, d) tensors of equal shape, got {z1.shape} and {z2.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = z1.shape[0]
    a = ad.l2_normalize(z1)
    b = ad.l2_normalize(z2)
    logits = ad.mul(ad.matmul(a, ad.transpose(b)), 1.0 / tau)  # [i, j] = sim(z_i1, z_j2)
    eye = Tensor(np.eye(n, dtype=z1.dtype))
    fwd = ad.sum_(ad.mul(ad.log_softmax(logits, axis=1), eye))
    bwd = ad.sum_(ad.mul(ad.log_softmax(ad.transpose(logits), axis=1), eye))
    return ad.mul(ad.add(fwd, bwd), -1.0 / (2 * n))


def sample_intra_indices(
    T: int, delta: int, n_pairs: int, n_neg: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor, positive (1 <= |dt| <= delta) and negatives (|dt| > 2*delta)."""
    if T < 2 * delta + 2:
        raise ValueError(f"sequence of length {T} too short for delta={delta}")
    t = np.arange(T)
    valid = (t > 2 * delta) | (t < T - 1 - 2 * delta)
    anchors = rng.choice(t[valid], size=n_pairs)
    pos = np.empty(n_pairs, dtype=int)
    neg = np.empty((n_pairs, n_neg), dtype=int)
    for i, a in enumerate(anchors):
        near = t[(np.abs(t - a) >= 1) & (np.abs(t - a) <= delta)]
        far = t[np.abs(t - a) > 2 * delta]
        pos[i] = rng.choice(near)
        neg[i] = rng.choice(far, size=n_neg)
    return anchors, pos, neg


def loss_intra(
    h: Tensor,
    tau: float = 0.2,
    delta: int = 4,
    n_pairs: int = 16,
    seed: int | np.random.Generator = 0,
    n_neg: int = 8,
) -> Tensor:
    """Temporal InfoNCE inside one view: nearby timesteps are positives,
    distant ones negatives. ``h`` is (T, d) or (N, T, d); mean over anchors."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    squeeze = h.ndim == 2
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
    N, T, _ = h.shape
    idx = [sample_intra_indices(T, delta, n_pairs, n_neg, rng) for _ in range(N)]
    rows = np.arange(N)[:, None]
    anc = np.stack([i[0] for i in idx])  # (N, P)
    pos = np.stack([i[1] for i in idx])
    neg = np.stack([i[2] for i in idx])  # (N, P, K)
    hn = ad.l2_normalize(h)
    ha = ad.getitem(hn, (rows, anc))  # (N, P, d)
    hp = ad.getitem(hn, (rows, pos))
    hk = ad.getitem(hn, (rows[..., None], neg))  # (N, P, K, d)
    s_pos = ad.sum_(ad.mul(ha, hp), axis=-1, keepdims=True)  # (N, P, 1)
    s_neg = ad.sum_(ad.mul(ad.reshape(ha, (N, n_pairs, 1, -1)), hk), axis=-1)  # (N, P, K)
    logits = ad.mul(ad.concat([s_pos, s_neg], axis=-1), 1.0 / tau)
    lp = ad.log_softmax(logits, axis=-1)
    return ad.mul(ad.mean(ad.getitem(lp, (Ellipsis, 0))), -1.0)


def loss_total(l_inter, l_intra, lam: float = 0.5):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0 or l_intra is None:
        return l_inter
    if isinstance(l_inter, Tensor) or isinstance(l_intra, Tensor):
        return ad.add(l_inter, ad.mul(l_intra, lam))
    return l_inter + lam * l_intra


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------
def view_weights(head, scores: np.ndarray | None, offsets: np.ndarray, L: int, mode: str, dtype) -> Tensor:
    """Per-timestep weights of a cropped view, aligned by crop offset."""
    N = len(offsets)
    if mode == "none":
        return Tensor(np.ones((N, L), dtype=dtype))
    if mode == "static" or scores is None:
        return Tensor(np.full((N, L), 0.5, dtype=dtype))
    sl = np.stack([scores[i, o : o + L] for i, o in enumerate(offsets)]).astype(dtype)
    return weight_from_score(head, sl)


def make_views(X: np.ndarray, cfg: DmcfConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.fixed_views:
        # identity crop, jitter drawn from fixed per-view streams (same every epoch)
        out = []
        for k in range(2):
            noise = np.random.default_rng([k, 4242]).normal(0.0, cfg.aug.jitter_sigma, size=X.shape[1:])
            out.append(((X + noise).astype(X.dtype), np.zeros(len(X), dtype=int)))
        return out
    return [augment_batch(X, cfg.aug, rng) for _ in range(2)]


def dmcf_forward(
    params: Mapping[str, Tensor],
    enc_cfg: EncoderConfig,
    cfg: DmcfConfig,
    X: np.ndarray,
    scores: np.ndarray | None,
    rng: np.random.Generator,
    train: bool = True,
) -> ViewBatch:
    """Loss for a batch ``X`` (N, T, D) whose source-segment scores are ``scores`` (N, T)."""
    drop_rng = rng if train else None
    pairs = make_views(X, cfg, rng)
    views = []
    for xv, offs in pairs:
        h = encode(params, xv, enc_cfg, rng=drop_rng)
        w = view_weights(params, scores, offs, xv.shape[1], cfg.weighting, h.dtype)
        hw = apply_weights(h, w)
        pooled, z = pool_and_project(hw, params)
        views.append(View(xv, offs, w, hw, pooled, z))
    l_inter = loss_inter(views[0].z, views[1].z, cfg.tau)
    l_intra = None
    if cfg.lam > 0:
        parts = [loss_intra(v.h, cfg.tau, cfg.delta, cfg.n_pairs, rng, cfg.n_negatives) for v in views]
        l_intra = ad.mul(ad.add(parts[0], parts[1]), 0.5)
    return ViewBatch(tuple(views), l_inter, l_intra, loss_total(l_inter, l_intra, cfg.lam))
