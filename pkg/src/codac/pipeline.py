"""Three-stage training: CDE fit, contrastive pre-training, supervised fine-tuning.

Also holds the run configuration (``key = value`` text) and the binary
checkpoint format.
"""
from __future__ import annotations

import dataclasses
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cde import CdeConfig, CdeModel, StageIsolationError, init_cde, score_batch, train_cde
from .dmcf import AugmentationSpec, DmcfConfig, dmcf_forward, init_projection, init_weight_head
from .encoder import EncoderConfig, encode, init_encoder
from .metrics import auroc
from .nn import ParamStore, add_linear
from .optim import Adam, AdamState, DivergenceError, adam_step
from .signals import TimeSeriesSegment

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "AdamState",
    "adam_step",
    "stage1",
    "stage2",
    "stage3",
    "save_checkpoint",
    "load_checkpoint",
    "bce_loss",
]

MAGIC = b"CODC"
FORMAT_VERSION = 1
STAGE_TAGS = {"cde": 1, "pretrain": 2, "finetune": 3}
PROB_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # data
    T: int = 128
    D: int = 2
    n_patients: int = 24
    segs_per_patient: int = 8
    disease_rate: float = 0.5
    n_healthy: int = 200
    label_fraction: float = 0.1
    stage2_healthy_frac: float = 0.5
    # stage 1
    epochs_cde: int = 30
    lr_cde: float = 3e-3
    batch_size_cde: int = 8
    cde_arch: str = "transformer"
    cde_d_model: int = 32
    cde_blocks: int = 2
    cde_heads: int = 4
    cde_d_ff: int = 64
    cde_d_latent: int = 8
    cde_mask_chunk: int = 4
    cde_mask_passes: int = 4
    cde_embed_kernel: int = 9
    beta: float = 0.5
    use_cde: bool = True
    # encoder
    d_hidden: int = 32
    conv_kernel: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    n_attn_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 64
    dropout: float = 0.1
    # stage 2
    epochs_pretrain: int = 20
    lr_pretrain: float = 1e-3
    batch_size: int = 32
    tau: float = 0.2
    lam: float = 0.5
    delta: int = 4
    n_pairs: int = 16
    d_project: int = 16
    crop_frac: float = 0.8
    jitter_sigma: float = 0.05
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    weighting: str = "dynamic"
    fixed_views: bool = False
    # stage 3
    mode: str = "fft"
    epochs_finetune: int = 60
    lr_fft: float = 5e-4
    lr_pft: float = 1e-2
    batch_size_ft: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("pft", "fft"):
            raise ConfigError(f"mode must be pft or fft, got {self.mode!r}")
        if self.weighting not in ("dynamic", "static", "none"):
            raise ConfigError(f"weighting must be dynamic, static or none, got {self.weighting!r}")
        if self.cde_arch not in ("transformer", "mlp"):
            raise ConfigError(f"cde_arch must be transformer or mlp, got {self.cde_arch!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must be in (0, 1]")
        if not 0 <= self.stage2_healthy_frac < 1:
            raise ConfigError("stage2_healthy_frac must be in [0, 1)")
        if self.tau <= 0 or self.lam < 0 or self.beta < 0:
            raise ConfigError("need tau > 0, lam >= 0, beta >= 0")

    # -- sub-configs ------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_in=self.D,
            d_hidden=self.d_hidden,
            conv_layers=[(self.conv_kernel, d, 0) for d in self.dilations],
            n_attn_blocks=self.n_attn_blocks,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout_rate=self.dropout,
        )

    def cde_config(self) -> CdeConfig:
        return CdeConfig(
            d_in=self.D,
            d_model=self.cde_d_model,
            n_blocks=self.cde_blocks,
            n_heads=self.cde_heads,
            d_ff=self.cde_d_ff,
            d_latent=self.cde_d_latent,
            arch=self.cde_arch,
            mask_chunk=self.cde_mask_chunk,
            mask_passes=self.cde_mask_passes,
            embed_kernel=self.cde_embed_kernel,
        )

    def dmcf_config(self) -> DmcfConfig:
        return DmcfConfig(
            d_project=self.d_project,
            tau=self.tau,
            lam=self.lam,
            delta=self.delta,
            n_pairs=self.n_pairs,
            weighting=self.weighting,
            fixed_views=self.fixed_views,
            aug=AugmentationSpec(self.crop_frac, self.jitter_sigma, (self.scale_lo, self.scale_hi)),
        )

    # -- text form --------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, list):
                s = ",".join(repr(x) for x in v)
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        known = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _parse_value(getattr(cfg, key), val, key))
        cfg.validate()
        return cfg

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(current, val: str, key: str):
    try:
        if isinstance(current, bool):
            if val.lower() not in ("true", "false"):
                raise ValueError
            return val.lower() == "true"
        if isinstance(current, int):
            return int(val)
        if isinstance(current, float):
            return float(val)
        if isinstance(current, list):
            return [int(v) for v in val.split(",") if v.strip()]
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def load_config(path: str | os.PathLike | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    stage: str
    config: TrainConfig
    cde: CdeModel | None = None
    encoder: ParamStore | None = None
    weight_head: ParamStore | None = None
    projection: ParamStore | None = None
    classifier: ParamStore | None = None
    history: dict[str, list[float]] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def stores(self) -> list[ParamStore]:
        out = [self.cde.params if self.cde is not None else None]
        out += [self.encoder, self.weight_head, self.projection, self.classifier]
        return [s for s in out if s is not None]

    def all_params(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        for s in self.stores():
            merged.update(s.items())
        return merged


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<B", STAGE_TAGS[ckpt.stage]))
    blob = ckpt.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    params = ckpt.all_params()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        for d in t.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _expected_stores(cfg: TrainConfig, stage: str) -> dict[str, ParamStore]:
    rng = np.random.default_rng(0)
    out = {}
    if cfg.use_cde:
        out["cde"] = init_cde(cfg.cde_config(), rng).params
    if stage in ("pretrain", "finetune"):
        out["encoder"] = init_encoder(cfg.encoder_config(), rng)
        out["weight_head"] = init_weight_head(rng)
        out["projection"] = init_projection(rng, cfg.d_hidden, cfg.d_project)
    if stage == "finetune":
        out["classifier"] = init_classifier(rng, cfg.d_hidden)
    return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    tag = r.unpack("<B")
    stages = {v: k for k, v in STAGE_TAGS.items()}
    if tag not in stages:
        raise CheckpointError(f"unknown stage tag {tag}")
    stage = stages[tag]
    blob = r.take(r.unpack("<I")).decode("utf-8")
    cfg = TrainConfig.from_text(blob)
    n = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.take(r.unpack("<H")).decode("utf-8")
        rank = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    expected = _expected_stores(cfg, stage)
    want = {k: t.shape for s in expected.values() for k, t in s.items()}
    if set(want) != set(arrays):
        missing = sorted(set(want) - set(arrays))
        extra = sorted(set(arrays) - set(want))
        raise CheckpointError(f"parameter names do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, shp in want.items():
        if arrays[k].shape != shp:
            raise CheckpointError(f"shape mismatch for {k}: file {arrays[k].shape}, config {shp}")
    stores = {key: ParamStore({k: arrays[k] for k in s}) for key, s in expected.items()}
    cde = CdeModel(cfg.cde_config(), stores["cde"], T=cfg.T) if "cde" in stores else None
    return Checkpoint(
        stage,
        cfg,
        cde=cde,
        encoder=stores.get("encoder"),
        weight_head=stores.get("weight_head"),
        projection=stores.get("projection"),
        classifier=stores.get("classifier"),
        version=version,
    )


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------
def _rng(cfg: TrainConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def stage1(cfg: TrainConfig, healthy: Sequence[TimeSeriesSegment]) -> Checkpoint:
    """Fit the CDE on healthy segments only; ``use_cde=False`` skips training."""
    for s in healthy:
        if s.label != 0:
            raise StageIsolationError(f"stage 1 received a non-healthy segment ({s.patient_id}, label={s.label})")
    if not cfg.use_cde:
        return Checkpoint("cde", cfg)
    model = init_cde(cfg.cde_config(), _rng(cfg, 1))
    model, curve = train_cde(model, healthy, cfg.epochs_cde, cfg.lr_cde, cfg.seed, cfg.batch_size_cde)
    if not all(math.isfinite(v) for v in curve):
        raise DivergenceError("CDE loss became non-finite")
    log.info("stage1 seed=%d loss %.4f -> %.4f", cfg.seed, curve[0] if curve else float("nan"), curve[-1] if curve else float("nan"))
    return Checkpoint("cde", cfg, cde=model, history={"cde_loss": curve})


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------
class BlindSegment:
    """Segment view for self-supervised training: reading the label raises."""

    __slots__ = ("patient_id", "x")

    def __init__(self, seg: TimeSeriesSegment):
        self.patient_id = seg.patient_id
        self.x = seg.x

    @property
    def label(self):
        raise StageIsolationError("labels must not be read during self-supervised pre-training")

    @property
    def anomaly_mask(self):
        raise StageIsolationError("anomaly masks must not be read during pre-training")


def blind(segs: Sequence[TimeSeriesSegment]) -> list[BlindSegment]:
    return [s if isinstance(s, BlindSegment) else BlindSegment(s) for s in segs]


def init_stage2_params(cfg: TrainConfig) -> tuple[ParamStore, ParamStore, ParamStore]:
    enc = init_encoder(cfg.encoder_config(), _rng(cfg, 2, 1))
    head = init_weight_head(_rng(cfg, 2, 2))
    proj = init_projection(_rng(cfg, 2, 3), cfg.d_hidden, cfg.d_project)
    return enc, head, proj


def stage2(
    cfg: TrainConfig,
    cde_ckpt: Checkpoint,
    healthy: Sequence[TimeSeriesSegment],
    target: Sequence[TimeSeriesSegment],
) -> Checkpoint:
    """Contrastive pre-training of encoder, projection and weight head.

    Each epoch mixes all target segments with enough healthy segments that the
    healthy share is ``stage2_healthy_frac``. Inputs are wrapped so labels are
    unreachable.
    """
    if cde_ckpt.stage != "cde":
        raise CheckpointError(f"stage 2 needs a stage-1 checkpoint, got stage {cde_ckpt.stage!r}")
    if cfg.use_cde and cde_ckpt.cde is None:
        raise CheckpointError("stage-1 checkpoint has no CDE parameters")
    target_b, healthy_b = blind(target), blind(healthy)
    enc_cfg, dm_cfg = cfg.encoder_config(), cfg.dmcf_config()
    enc, head, proj = init_stage2_params(cfg)
    params = ParamStore()
    for store in (enc, head, proj):
        for k, t in store.items():
            params._t[k] = t  # shared tensors: updating params updates the stores

    n_t = len(target_b)
    n_h = min(len(healthy_b), int(round(cfg.stage2_healthy_frac / (1 - cfg.stage2_healthy_frac) * n_t)))
    X_t = np.stack([s.x for s in target_b]) if n_t else np.zeros((0, cfg.T, cfg.D), np.float32)
    X_h = np.stack([s.x for s in healthy_b]) if healthy_b else np.zeros((0, cfg.T, cfg.D), np.float32)
    use_scores = cfg.use_cde and cfg.weighting == "dynamic" and cde_ckpt.cde is not None
    if use_scores:
        S_t = score_batch(cde_ckpt.cde, X_t, cfg.beta)
        S_h = score_batch(cde_ckpt.cde, X_h, cfg.beta)
    else:
        S_t = S_h = None

    names = [k for k in params if cfg.weighting == "dynamic" or not k.startswith("wh.")]
    opt = Adam(params, lr=cfg.lr_pretrain, names=names)
    rng = _rng(cfg, 2, 4)
    curve = []
    for _ in range(cfg.epochs_pretrain):
        pick_h = rng.choice(len(X_h), size=n_h, replace=False) if n_h else np.zeros(0, dtype=int)
        X = np.concatenate([X_t, X_h[pick_h]])
        S = np.concatenate([S_t, S_h[pick_h]]) if S_t is not None else None
        order = rng.permutation(len(X))
        tot, cnt = 0.0, 0
        for i in range(0, len(X), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            if len(idx) < 2:
                continue
            params.zero_grad()
            vb = dmcf_forward(params, enc_cfg, dm_cfg, X[idx], S[idx] if S is not None else None, rng)
            ad.backward(vb.loss)
            opt.step()
            tot += float(vb.loss.data) * len(idx)
            cnt += len(idx)
        curve.append(tot / max(cnt, 1))
        if not math.isfinite(curve[-1]):
            raise DivergenceError("contrastive loss became non-finite")
    log.info("stage2 seed=%d loss %s", cfg.seed, " ".join(f"{v:.3f}" for v in curve))
    hist = dict(cde_ckpt.history)
    hist["pretrain_loss"] = curve
    return Checkpoint("pretrain", cfg, cde=cde_ckpt.cde, encoder=enc, weight_head=head, projection=proj, history=hist)


# ---------------------------------------------------------------------------
# stage 3
# ---------------------------------------------------------------------------
def init_classifier(rng: np.random.Generator, d_hidden: int) -> ParamStore:
    ps = ParamStore()
    add_linear(ps, rng, "clf", d_hidden, 1)
    return ps


def bce_loss(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets ``y``.

    Probabilities are clamped to [1e-7, 1 - 1e-7].
    """
    y = np.asarray(y, dtype=p.dtype)
    pd = p.data
    lo, hi = PROB_CLAMP, 1 - PROB_CLAMP
    inside = ((pd > lo) & (pd < hi)).astype(p.dtype)
    # clamp without killing the graph: pass the gradient only where not clamped
    pc = ad.add(ad.mul(p, Tensor(inside)), Tensor((1 - inside) * np.clip(pd, lo, hi)))
    one = Tensor(np.ones_like(pd))
    ll = ad.add(ad.mul(Tensor(y), ad.log(pc)), ad.mul(Tensor(1 - y), ad.log(ad.sub(one, pc))))
    return ad.mul(ad.mean(ll), -1.0)


def pooled_features(enc: ParamStore, cfg: TrainConfig, X: np.ndarray, rng=None, chunk: int = 64):
    enc_cfg = cfg.encoder_config()
    if rng is not None:
        return ad.global_mean_pool(encode(enc, X, enc_cfg, rng=rng))
    parts = [ad.global_mean_pool(encode(enc, X[i : i + chunk], enc_cfg)).data for i in range(0, len(X), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, cfg.d_hidden), np.float32)


def predict_proba(ckpt: Checkpoint, X: np.ndarray) -> np.ndarray:
    feats = pooled_features(ckpt.encoder, ckpt.config, np.asarray(X, dtype=np.float32))
    logits = feats @ ckpt.classifier["clf.w"].data + ckpt.classifier["clf.b"].data
    return ad.sigmoid(Tensor(logits[:, 0])).data.astype(np.float64)


def embed(ckpt: Checkpoint, X: np.ndarray) -> np.ndarray:
    return pooled_features(ckpt.encoder, ckpt.config, np.asarray(X, dtype=np.float32)).astype(np.float64)


def _logits(enc, clf, cfg, X, rng=None, feats=None):
    f = feats if feats is not None else pooled_features(enc, cfg, X, rng)
    f = f if isinstance(f, Tensor) else Tensor(f)
    return ad.reshape(ad.linear(f, clf["clf.w"], clf["clf.b"]), (f.shape[0],))


def stage3(
    cfg: TrainConfig,
    stage2_ckpt: Checkpoint,
    labeled_train: Sequence[TimeSeriesSegment],
    val: Sequence[TimeSeriesSegment],
) -> Checkpoint:
    """Fine-tune a linear head (PFT) or head + encoder (FFT) with BCE.

    The epoch with the best validation AUROC (ties: lower validation loss) is kept.
    """
    if stage2_ckpt.encoder is None:
        raise CheckpointError("stage 3 needs a pre-trained encoder checkpoint")
    train = [s for s in labeled_train if s.is_labeled]
    y = np.array([s.label for s in train], dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise ValueError("stage 3 needs at least one labeled sample of each class")
    X = np.stack([s.x for s in train]).astype(np.float32)
    Xv = np.stack([s.x for s in val]).astype(np.float32) if val else None
    yv = np.array([s.label for s in val]) if val else None

    enc = stage2_ckpt.encoder.copy()
    clf = init_classifier(_rng(cfg, 3, 1), cfg.d_hidden)
    fft = cfg.mode == "fft"
    params = ParamStore()
    for store in (enc, clf) if fft else (clf,):
        for k, t in store.items():
            params._t[k] = t
    opt = Adam(params, lr=cfg.lr_fft if fft else cfg.lr_pft)
    rng = _rng(cfg, 3, 2)
    frozen_feats = None if fft else pooled_features(enc, cfg, X)
    val_feats = None if (fft or Xv is None) else pooled_features(enc, cfg, Xv)

    best = None
    curve, val_curve = [], []
    for epoch in range(cfg.epochs_finetune):
        order = rng.permutation(len(X))
        tot = 0.0
        for i in range(0, len(X), cfg.batch_size_ft):
            idx = order[i : i + cfg.batch_size_ft]
            params.zero_grad()
            if fft:
                logit = _logits(enc, clf, cfg, X[idx], rng=rng)
            else:
                logit = _logits(enc, clf, cfg, None, feats=frozen_feats[idx])
            loss = bce_loss(ad.sigmoid(logit), y[idx])
            ad.backward(loss)
            opt.step()
            tot += float(loss.data) * len(idx)
        curve.append(tot / len(X))
        if not math.isfinite(curve[-1]):
            raise DivergenceError("classification loss became non-finite")
        if Xv is None:
            continue
        pv = ad.sigmoid(_logits(enc, clf, cfg, Xv, feats=val_feats)).data.astype(np.float64)
        vloss = float(bce_loss(Tensor(pv), yv).data)
        vauc = auroc(yv, pv) if len(set(yv.tolist())) == 2 else 0.0
        val_curve.append(vauc)
        key = (vauc, -vloss)
        if best is None or key > best[0]:
            best = (key, enc.copy() if fft else enc, clf.copy(), epoch)
    if best is not None:
        _, enc, clf, _ = best
    hist = dict(stage2_ckpt.history)
    hist["finetune_loss"] = curve
    hist["val_auroc"] = val_curve
    return Checkpoint(
        "finetune",
        cfg,
        cde=stage2_ckpt.cde,
        encoder=enc,
        weight_head=stage2_ckpt.weight_head,
        projection=stage2_ckpt.projection,
        classifier=clf,
        history=hist,
    )
