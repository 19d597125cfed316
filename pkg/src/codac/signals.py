"""Synthetic healthy/diseased multichannel signals with known anomaly masks.

Healthy channels are sums of 2-4 sinusoids (patient-specific frequencies)
plus AR(1) noise, z-normalised. Disease is simulated by injecting local
events (spikes, frequency shifts, smooth bumps) whose positions are kept as
a ground-truth mask. Finished segments are z-normalised again so that raw
signal power carries little label information.
"""
from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ANOMALY_KINDS = ("spike", "freq_shift", "bump")
UNLABELED = -1


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


@dataclass
class TimeSeriesSegment:
    patient_id: str
    label: int
    x: np.ndarray  # (T, D) float32
    anomaly_mask: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.anomaly_mask = np.asarray(self.anomaly_mask, dtype=bool)
        if self.x.ndim != 2 or self.anomaly_mask.shape != (self.x.shape[0],):
            raise DataFormatError("x must be (T, D) and anomaly_mask (T,)")
        if self.label == 0 and self.anomaly_mask.any():
            raise DataFormatError(f"healthy segment of {self.patient_id} carries an anomaly mask")
        if self.label == 1 and not self.anomaly_mask.any():
            raise DataFormatError(f"diseased segment of {self.patient_id} has an empty anomaly mask")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def D(self) -> int:
        return self.x.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.label != UNLABELED


@dataclass
class DatasetSplit:
    train: list[TimeSeriesSegment]
    val: list[TimeSeriesSegment]
    test: list[TimeSeriesSegment]
    label_fraction: float = 1.0
    # true labels of train segments whose label was hidden; evaluation-only
    hidden_labels: dict[int, int] = field(default_factory=dict)

    @property
    def labeled_train(self) -> list[TimeSeriesSegment]:
        return [s for s in self.train if s.is_labeled]

    @property
    def unlabeled_train(self) -> list[TimeSeriesSegment]:
        return [s for s in self.train if not s.is_labeled]


def _patient_key(patient_id: str) -> int:
    return zlib.crc32(patient_id.encode("utf-8"))


def _ar1(rng: np.random.Generator, n: int, coef: float = 0.8, sigma: float = 0.1) -> np.ndarray:
    e = rng.normal(0.0, sigma, size=n)
    out = np.empty(n)
    prev = rng.normal(0.0, sigma / math.sqrt(1 - coef * coef))
    for i in range(n):
        prev = coef * prev + e[i]
        out[i] = prev
    return out


def gen_healthy(patient_id: str, T: int, D: int, seed: int, segment_index: int = 0) -> TimeSeriesSegment:
    """One z-normalised healthy segment.

    Frequencies and amplitudes depend only on ``(patient_id, seed)``; phases and
    noise also depend on ``segment_index``.
    """
    if T < 32 or D < 1:
        raise ValueError(f"need T >= 32 and D >= 1, got T={T}, D={D}")
    key = _patient_key(patient_id)
    prng = np.random.default_rng([seed, key])
    srng = np.random.default_rng([seed, key, segment_index + 1])
    t = np.arange(T) / T
    x = np.empty((T, D))
    for c in range(D):
        n_comp = int(prng.integers(2, 5))
        freqs = prng.uniform(0.5, 8.0, size=n_comp)
        amps = prng.uniform(0.5, 1.5, size=n_comp)
        phases = srng.uniform(0.0, 2 * math.pi, size=n_comp)
        sig = (amps[:, None] * np.sin(2 * math.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
        x[:, c] = sig + _ar1(srng, T)
    return TimeSeriesSegment(patient_id, 0, _znorm(x), np.zeros(T, dtype=bool))


def _znorm(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x - x.mean(0)) / x.std(0)).astype(np.float32)


def _ramp_plateau(length: int) -> np.ndarray:
    r = length // 4
    if r == 0:
        return np.ones(length)
    i = np.arange(length)
    u = np.minimum(1.0, np.minimum(i + 1, length - i) / (r + 1))
    return 0.5 * (1 - np.cos(math.pi * u))


def inject_anomaly(
    seg: TimeSeriesSegment, kind: str, span_frac: float, seed: int, start: int | None = None
) -> TimeSeriesSegment:
    """Return a copy of ``seg`` with one anomalous window; label becomes 1.

    The window has length ``max(1, round(span_frac * T))``. Amplitudes are in
    units of each channel's standard deviation.
    """
    if kind not in ANOMALY_KINDS:
        raise ValueError(f"unknown anomaly kind {kind!r}; expected one of {ANOMALY_KINDS}")
    if not 0 < span_frac <= 0.5:
        raise ValueError(f"span_frac must be in (0, 0.5], got {span_frac}")
    rng = np.random.default_rng([seed, _patient_key(seg.patient_id), ANOMALY_KINDS.index(kind)])
    T, D = seg.x.shape
    L = max(1, int(round(span_frac * T)))
    t0 = int(rng.integers(0, T - L + 1)) if start is None else start
    if not 0 <= t0 <= T - L:
        raise ValueError(f"window start {t0} out of range for length {L}")
    x = seg.x.astype(np.float64)
    sigma = x.std(0)
    new = x.copy()
    win = slice(t0, t0 + L)
    if kind == "spike":
        signs = rng.choice([-1.0, 1.0], size=(L, D))
        pulses = np.zeros((L, D))
        pulses[::2] = 3.0 * sigma * signs[::2]
        new[win] += pulses
    elif kind == "bump":
        sign = rng.choice([-1.0, 1.0], size=D)
        new[win] += 1.5 * sigma * sign * _ramp_plateau(L)[:, None]
    else:
        # replay the segment at double speed from an anchor; keep the anchor whose
        # replay departs clearly from the original window
        idx = np.arange(L)
        best, best_dev = None, -1.0
        candidates = []
        for anchor in range(T):
            pos = anchor + 2 * idx
            pos = np.abs(pos) % (2 * T - 2)
            pos = np.where(pos >= T, 2 * T - 2 - pos, pos)
            rep = x[pos]
            dev = np.sqrt(((rep - x[win]) ** 2).mean(0)) / sigma
            worst = float(dev.min())
            if worst > best_dev:
                best, best_dev = rep, worst
            if worst > 1.25:
                candidates.append(rep)
        if candidates:
            best = candidates[int(rng.integers(len(candidates)))]
        new[win] = best
    mask = seg.anomaly_mask.copy()
    mask[win] = True
    return TimeSeriesSegment(seg.patient_id, 1, new.astype(np.float32), mask)


def make_dataset(
    n_patients: int = 24,
    segs_per_patient: int = 8,
    disease_rate: float = 0.5,
    T: int = 128,
    D: int = 2,
    seed: int = 0,
    span_range: tuple[float, float] = (0.08, 0.2),
    max_events: int = 2,
    prefix: str = "P",
    renormalize: bool = True,
) -> list[TimeSeriesSegment]:
    """Patients are either healthy or diseased; every segment of a diseased
    patient carries 1..max_events injected events of that patient's kind.

    With ``renormalize`` each finished segment is z-normalised per channel, so
    amplitude alone does not give the disease away.
    """
    rng = np.random.default_rng([seed, 7919])
    n_sick = int(round(disease_rate * n_patients))
    sick = set(rng.permutation(n_patients)[:n_sick].tolist())
    out: list[TimeSeriesSegment] = []
    for p in range(n_patients):
        pid = f"{prefix}{p:03d}"
        kind = ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
        for j in range(segs_per_patient):
            seg = gen_healthy(pid, T, D, seed, segment_index=j)
            if p in sick:
                n_ev = int(rng.integers(1, max_events + 1))
                for e in range(n_ev):
                    span = float(rng.uniform(*span_range))
                    seg = _merge_event(seg, inject_anomaly(seg, kind, span, seed * 1000 + j * 10 + e))
            out.append(replace(seg, x=_znorm(seg.x)) if renormalize else seg)
    return out


def _merge_event(base: TimeSeriesSegment, injected: TimeSeriesSegment) -> TimeSeriesSegment:
    return TimeSeriesSegment(base.patient_id, 1, injected.x, base.anomaly_mask | injected.anomaly_mask)


def make_healthy_pool(n_segments: int = 200, T: int = 128, D: int = 2, seed: int = 0, segs_per_patient: int = 8):
    """External healthy corpus: disjoint patient ids (prefix ``H``), no disease."""
    n_patients = math.ceil(n_segments / segs_per_patient)
    segs = make_dataset(n_patients, segs_per_patient, 0.0, T, D, seed + 104729, prefix="H")
    return segs[:n_segments]


def split_by_patient(
    segs: list[TimeSeriesSegment],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    label_fraction: float = 1.0,
    seed: int = 0,
) -> DatasetSplit:
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    if not 0 < label_fraction <= 1:
        raise ValueError(f"label_fraction must be in (0, 1], got {label_fraction}")
    by_patient: dict[str, list[int]] = {}
    for i, s in enumerate(segs):
        by_patient.setdefault(s.patient_id, []).append(i)
    n_splits = sum(1 for r in ratios if r > 0)
    if len(by_patient) < max(3, n_splits):
        raise ValueError(f"need at least 3 patients for a three-way split, got {len(by_patient)}")
    rng = np.random.default_rng([seed, 31337])
    # stratify patients by whether any of their segments is diseased
    groups = {0: [], 1: []}
    for pid in sorted(by_patient):
        groups[int(any(segs[i].label == 1 for i in by_patient[pid]))].append(pid)
    parts: list[list[str]] = [[], [], []]
    for cls in (0, 1):
        pids = [groups[cls][k] for k in rng.permutation(len(groups[cls]))]
        n = len(pids)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        parts[0] += pids[:n_train]
        parts[1] += pids[n_train : n_train + n_val]
        parts[2] += pids[n_train + n_val :]
    # guarantee every non-empty split owns at least one patient
    for k in range(3):
        if ratios[k] > 0 and not parts[k]:
            donor = max(range(3), key=lambda j: len(parts[j]))
            parts[k].append(parts[donor].pop())
    train_idx = [i for pid in sorted(parts[0]) for i in by_patient[pid]]
    val = [segs[i] for pid in sorted(parts[1]) for i in by_patient[pid]]
    test = [segs[i] for pid in sorted(parts[2]) for i in by_patient[pid]]

    n_keep = math.ceil(label_fraction * len(train_idx) - 1e-9)
    keep = _stratified_pick([segs[i] for i in train_idx], n_keep, rng)
    train, hidden = [], {}
    for pos, i in enumerate(train_idx):
        s = segs[i]
        if pos in keep:
            train.append(s)
        else:
            hidden[pos] = s.label
            train.append(replace(s, label=UNLABELED))
    return DatasetSplit(train, val, test, label_fraction, hidden)


def _stratified_pick(segs: list[TimeSeriesSegment], n_keep: int, rng: np.random.Generator) -> set[int]:
    """Round-robin over patients, alternating classes, so labels spread evenly."""
    if n_keep >= len(segs):
        return set(range(len(segs)))
    per_patient: dict[str, list[int]] = {}
    for i, s in enumerate(segs):
        per_patient.setdefault(s.patient_id, []).append(i)
    queues = {0: [], 1: []}
    for pid in sorted(per_patient):
        idx = [per_patient[pid][k] for k in rng.permutation(len(per_patient[pid]))]
        queues[int(segs[idx[0]].label == 1)].append(idx)
    for cls in (0, 1):
        queues[cls] = [queues[cls][k] for k in rng.permutation(len(queues[cls]))]
    order: list[int] = []
    rounds = max((len(q) for qs in queues.values() for q in qs), default=0)
    for r in range(rounds):
        row = {cls: [q[r] for q in queues[cls] if r < len(q)] for cls in (0, 1)}
        for a, b in _zip_longest(row[1], row[0]):
            order.extend(v for v in (a, b) if v is not None)
    return set(order[:n_keep])


def _zip_longest(a, b):
    n = max(len(a), len(b))
    return [(a[i] if i < len(a) else None, b[i] if i < len(b) else None) for i in range(n)]


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------
def _header(T: int, D: int) -> list[str]:
    return ["patient_id", "label", "mask"] + [f"c{c}_t{t}" for c in range(D) for t in range(T)]


def write_csv(segs: list[TimeSeriesSegment], path: str | os.PathLike) -> None:
    """Write segments plus a ``meta.txt`` manifest next to the CSV."""
    if not segs:
        raise DataFormatError("empty dataset")
    path = Path(path)
    T, D = segs[0].x.shape
    lines = [",".join(_header(T, D))]
    for s in segs:
        if s.x.shape != (T, D):
            raise DataFormatError("all segments must share T and D")
        mask = "".join("1" if m else "0" for m in s.anomaly_mask)
        vals = ",".join(f"{v:.9g}" for v in s.x.T.reshape(-1))
        lines.append(f"{s.patient_id},{s.label},{mask},{vals}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (path.parent / "meta.txt").write_text(f"T={T}\nD={D}\n", encoding="utf-8")


def _read_meta(path: Path) -> tuple[int, int] | None:
    meta = path.parent / "meta.txt"
    if not meta.exists():
        return None
    vals = {}
    for line in meta.read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            vals[k.strip()] = int(v)
    try:
        return vals["T"], vals["D"]
    except KeyError as e:
        raise DataFormatError(f"meta.txt is missing {e.args[0]}") from None


def read_csv(path: str | os.PathLike) -> list[TimeSeriesSegment]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise DataFormatError("empty dataset")
    head = rows[0].split(",")
    if head[:3] != ["patient_id", "label", "mask"]:
        raise DataFormatError("malformed header: expected patient_id,label,mask,...")
    n_vals = len(head) - 3
    meta = _read_meta(path)
    if meta is not None:
        T, D = meta
    else:
        T = len(rows[1].split(",")[2]) if len(rows) > 1 else 0
        D = n_vals // T if T else 0
    if T * D != n_vals or head != _header(T, D):
        raise DataFormatError(f"malformed header for T={T}, D={D}")
    if len(rows) == 1:
        raise DataFormatError("empty dataset")
    out = []
    for r, line in enumerate(rows[1:], start=1):
        cells = line.split(",")
        if len(cells) != len(head):
            raise DataFormatError(f"row {r}: expected {len(head)} columns, got {len(cells)}")
        pid, label_s, mask_s = cells[:3]
        try:
            label = int(label_s)
            vals = np.array([float(c) for c in cells[3:]], dtype=np.float64)
        except ValueError:
            raise DataFormatError(f"row {r}: non-numeric cell") from None
        if label not in (0, 1, UNLABELED):
            raise DataFormatError(f"row {r}: label must be 0, 1 or -1, got {label}")
        if len(mask_s) != T or set(mask_s) - {"0", "1"}:
            raise DataFormatError(f"row {r}: mask must be a {T}-character 0/1 string")
        if not np.all(np.isfinite(vals)):
            raise DataFormatError(f"row {r}: non-finite value")
        x = vals.reshape(D, T).T
        mask = np.array([ch == "1" for ch in mask_s])
        try:
            out.append(TimeSeriesSegment(pid, label, x, mask))
        except DataFormatError as e:
            raise DataFormatError(f"row {r}: {e}") from None
    return out
