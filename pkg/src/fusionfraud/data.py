"""Dataset container, file formats, stratified k-fold splits, and the
synthetic generator that plants a controllable multiplicative cross-modal
signal in place of upstream feature extractors.

Generative process (deterministic in the seed): each candidate record draws
latent signs s_v, s_a uniform on {-1, +1} and noise eps ~ N(0, sigma^2);
its label is 1 iff a*s_v + b*s_a + c*s_v*s_a + eps > 0. Candidates are
rejection-sampled until exactly n_fraud positives and n_total - n_fraud
negatives are collected. Features are standard-normal noise on all 768
coordinates, with amplitude*sign added on the first d_sig coordinates of
the matching modality. The c term makes the label depend on the *product*
of the two latent signs, so a classifier that can only combine modalities
additively is strictly worse than one that models their interaction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .binio import ByteReader, append_checksum, split_checksummed
from .errors import (
    FormatError,
    GenerationError,
    ParameterError,
    SplitError,
    UnsupportedVersionError,
)
from .numkit import Rng, RngLanes, child_seed

FEATURE_DIM = 768
DATASET_MAGIC = b"TFND"
DATASET_VERSION = 1

# Rejection-sampling attempt cap, as a multiple of n_total.
_QUOTA_ATTEMPT_FACTOR = 1000


@dataclass
class FeatureRecord:
    id: str
    video: np.ndarray  # (768,)
    audio: np.ndarray  # (768,)
    label: int         # 0 = legit, 1 = fraud


@dataclass
class Dataset:
    records: list[FeatureRecord]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def feature_matrices(self):
        """(video, audio, labels) stacked as arrays for batched code."""
        V = np.stack([r.video for r in self.records])
        A = np.stack([r.audio for r in self.records])
        return V, A, self.labels()

    def validate(self) -> None:
        seen = set()
        for i, r in enumerate(self.records):
            if r.id in seen:
                raise FormatError(f"record {i}: duplicate id {r.id!r}")
            seen.add(r.id)
            if r.video.shape != (FEATURE_DIM,) or r.audio.shape != (FEATURE_DIM,):
                raise FormatError(
                    f"record {i}: feature lengths {r.video.shape}/{r.audio.shape}, expected {FEATURE_DIM}")
            if not (np.isfinite(r.video).all() and np.isfinite(r.audio).all()):
                raise FormatError(f"record {i}: non-finite feature values")
            if r.label not in (0, 1):
                raise FormatError(f"record {i}: label must be 0 or 1, got {r.label}")


@dataclass(frozen=True)
class SynthConfig:
    """Defaults satisfy c > a + b, which makes the Bayes-optimal decision
    depend on the sign *product* (an XOR-type rule): no additive combination
    of the two modalities can reach the ceiling, so explicit multiplicative
    fusion has a structural advantage that the ablation can measure.
    Amplitude and subspace size sit where the product rule is learnable from
    820 records but plain concatenation reliably lags."""

    n_total: int = 820
    n_fraud: int = 356
    a: float = 0.4       # unimodal video weight
    b: float = 0.25      # unimodal audio weight
    c: float = 1.0       # bimodal (product) weight
    sigma: float = 0.5   # label-noise std
    d_sig: int = 32      # signal coordinates per modality
    amplitude: float = 1.25
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.n_fraud < self.n_total:
            raise ParameterError(
                f"need 0 < n_fraud < n_total, got n_fraud={self.n_fraud}, n_total={self.n_total}")
        if not 0 <= self.d_sig <= FEATURE_DIM:
            raise ParameterError(f"d_sig must be in [0, {FEATURE_DIM}], got {self.d_sig}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be non-negative, got {self.sigma}")


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Quota-sampled synthetic dataset; see the module docstring.

    Stream layout (frozen): substream 0 of the seed drives the latent
    rejection loop (two sign bits then one normal per attempt); lane pools
    on substreams 1 and 2 fill the video and audio noise matrices.
    """
    cfg.validate()
    lat = Rng(cfg.seed).fork(0)
    need = {1: cfg.n_fraud, 0: cfg.n_total - cfg.n_fraud}
    signs_v: list[float] = []
    signs_a: list[float] = []
    labels: list[int] = []
    attempts = 0
    cap = _QUOTA_ATTEMPT_FACTOR * cfg.n_total
    while need[0] > 0 or need[1] > 0:
        if attempts >= cap:
            raise GenerationError(
                f"label quota unsatisfied after {cap} attempts "
                f"(still need {need[1]} fraud, {need[0]} legit); "
                "the signal weights make one class too rare")
        attempts += 1
        s_v = 1.0 if lat.next_u64() & 1 else -1.0
        s_a = 1.0 if lat.next_u64() & 1 else -1.0
        eps = lat.normal() * cfg.sigma
        score = cfg.a * s_v + cfg.b * s_a + cfg.c * s_v * s_a + eps
        label = 1 if score > 0 else 0
        if need[label] == 0:
            continue
        need[label] -= 1
        signs_v.append(s_v)
        signs_a.append(s_a)
        labels.append(label)

    n = cfg.n_total
    video = RngLanes(child_seed(cfg.seed, 1)).normals((n, FEATURE_DIM))
    audio = RngLanes(child_seed(cfg.seed, 2)).normals((n, FEATURE_DIM))
    if cfg.d_sig > 0:
        video[:, :cfg.d_sig] += cfg.amplitude * np.array(signs_v)[:, None]
        audio[:, :cfg.d_sig] += cfg.amplitude * np.array(signs_a)[:, None]

    records = [FeatureRecord(id=f"syn-{i:05d}", video=video[i], audio=audio[i], label=labels[i])
               for i in range(n)]
    ds = Dataset(records=records, provenance=_provenance(cfg))
    ds.validate()
    return ds


def _provenance(cfg: SynthConfig) -> str:
    return ("synthetic fraud benchmark: "
            f"seed={cfg.seed} n_total={cfg.n_total} n_fraud={cfg.n_fraud} "
            f"a={cfg.a} b={cfg.b} c={cfg.c} sigma={cfg.sigma} "
            f"d_sig={cfg.d_sig} amplitude={cfg.amplitude}")


# ---------------------------------------------------------------------------
# generative-process oracles
# ---------------------------------------------------------------------------

def _phi(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _cell_posteriors(cfg: SynthConfig) -> dict[tuple[int, int], float]:
    """P(label = 1 | s_v, s_a) for the four latent sign combinations."""
    out = {}
    for s_v in (-1, 1):
        for s_a in (-1, 1):
            m = cfg.a * s_v + cfg.b * s_a + cfg.c * s_v * s_a
            if cfg.sigma > 0:
                out[(s_v, s_a)] = _phi(m / cfg.sigma)
            else:
                out[(s_v, s_a)] = 1.0 if m > 0 else 0.0
    return out


def bayes_accuracy_closed_form(cfg: SynthConfig, modalities: str = "both") -> float:
    """Accuracy of the Bayes-optimal classifier with oracle access to the
    latent signs, in closed form over the four sign cells.

    ``modalities`` selects what the classifier sees: "both", "video"
    (s_v only) or "audio" (s_a only). Signs are equiprobable, so the
    full-information accuracy averages max(P, 1-P) over the four cells.
    """
    cells = _cell_posteriors(cfg)
    if modalities == "both":
        return sum(max(p, 1.0 - p) for p in cells.values()) / 4.0
    if modalities == "video":
        groups = [((1, 1), (1, -1)), ((-1, 1), (-1, -1))]
    elif modalities == "audio":
        groups = [((1, 1), (-1, 1)), ((1, -1), (-1, -1))]
    else:
        raise ParameterError(f"modalities must be both/video/audio, got {modalities!r}")
    acc = 0.0
    for pair in groups:
        p1 = (cells[pair[0]] + cells[pair[1]]) / 2.0
        acc += 0.5 * max(p1, 1.0 - p1)
    return acc


def bayes_accuracy_monte_carlo(cfg: SynthConfig, n_draws: int = 10 ** 6, seed: int = 424242) -> float:
    """Monte-Carlo estimate of the same ceiling over the unconditioned
    generative rule (no quota), using the optimal per-cell decision."""
    cells = _cell_posteriors(cfg)
    decide = {k: 1 if p > 0.5 else 0 for k, p in cells.items()}
    lanes = RngLanes(seed)
    s_v = np.where(lanes.next_u64(n_draws) & np.uint64(1), 1.0, -1.0)
    s_a = np.where(lanes.next_u64(n_draws) & np.uint64(1), 1.0, -1.0)
    eps = lanes.normals(n_draws) * cfg.sigma
    labels = (cfg.a * s_v + cfg.b * s_a + cfg.c * s_v * s_a + eps > 0).astype(np.int64)
    pred_pp = decide[(1, 1)]
    pred_pm = decide[(1, -1)]
    pred_mp = decide[(-1, 1)]
    pred_mm = decide[(-1, -1)]
    preds = np.where(s_v > 0, np.where(s_a > 0, pred_pp, pred_pm),
                     np.where(s_a > 0, pred_mp, pred_mm))
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# stratified k-fold
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # per-record fold index in [0, k)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def stratified_kfold(ds: Dataset, k: int, seed: int) -> FoldPlan:
    """Seeded per-class shuffle, then a single round-robin deal.

    The dealing cursor continues across classes (all class-0 records are
    dealt, then class-1 continues where the cursor stopped), which keeps
    per-class counts within one of ideal *and* balances fold totals when
    the dataset size divides by k.
    """
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    by_class: dict[int, list[int]] = {0: [], 1: []}
    for i, r in enumerate(ds.records):
        by_class[r.label].append(i)
    for label, members in by_class.items():
        if 0 < len(members) < k:
            raise SplitError(f"class {label} has {len(members)} records, fewer than k={k}")
    rng = Rng(seed)
    assignments = np.empty(len(ds.records), dtype=np.int64)
    cursor = 0
    for label in (0, 1):
        members = by_class[label]
        rng.shuffle(members)
        for idx in members:
            assignments[idx] = cursor % k
            cursor += 1
    return FoldPlan(k=k, assignments=assignments)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path, format: str = "binary") -> None:
    ds.validate()
    if format == "binary":
        _save_binary(ds, path)
    elif format == "jsonl":
        _save_jsonl(ds, path)
    else:
        raise ParameterError(f"format must be 'binary' or 'jsonl', got {format!r}")


def load_dataset(path) -> Dataset:
    """Format is sniffed: files opening with the TFND magic are binary,
    anything else is parsed as JSON lines."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == DATASET_MAGIC:
        return _load_binary(path)
    return _load_jsonl(path)


def _save_binary(ds: Dataset, path) -> None:
    buf = bytearray()
    buf += DATASET_MAGIC
    buf.append(DATASET_VERSION)
    buf += struct.pack("<I", len(ds.records))
    for r in ds.records:
        ident = r.id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise FormatError(f"record id {r.id[:32]!r}... exceeds 65535 bytes")
        buf += struct.pack("<H", len(ident))
        buf += ident
        buf += np.ascontiguousarray(r.video, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(r.audio, dtype="<f8").tobytes()
        buf.append(r.label)
    with open(path, "wb") as fh:
        fh.write(append_checksum(buf))


def _load_binary(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = split_checksummed(blob, "dataset")
    rd = ByteReader(payload, "dataset")
    if rd.take(4, "magic") != DATASET_MAGIC:
        raise FormatError("dataset: bad magic")
    version = rd.u8("version")
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"dataset: unsupported version {version}")
    count = rd.u32("record count")
    records = []
    for i in range(count):
        id_len = rd.u16(f"record {i} id length")
        ident = rd.take(id_len, f"record {i} id").decode("utf-8")
        video = rd.f64_array(FEATURE_DIM, f"record {i} video")
        audio = rd.f64_array(FEATURE_DIM, f"record {i} audio")
        label = rd.u8(f"record {i} label")
        if label not in (0, 1):
            raise FormatError(f"dataset: record {i} label byte is {label}, must be 0 or 1")
        records.append(FeatureRecord(id=ident, video=video, audio=audio, label=int(label)))
    rd.expect_end()
    ds = Dataset(records=records, provenance=f"loaded:{path}")
    ds.validate()
    return ds


def _save_jsonl(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in ds.records:
            fh.write(json.dumps({"id": r.id, "video": r.video.tolist(),
                                 "audio": r.audio.tolist(), "label": r.label}))
            fh.write("\n")


def parse_jsonl_record(obj: dict, where: str) -> FeatureRecord:
    """Validate one decoded JSONL object; ``where`` names it in errors."""
    for key in ("id", "video", "audio", "label"):
        if key not in obj:
            raise FormatError(f"{where}: missing {key!r}")
    if obj["label"] not in (0, 1):
        raise FormatError(f"{where}: label must be 0 or 1, got {obj['label']!r}")
    video = np.asarray(obj["video"], dtype=np.float64)
    audio = np.asarray(obj["audio"], dtype=np.float64)
    if video.shape != (FEATURE_DIM,):
        raise FormatError(f"{where}: video has {video.size} values, expected {FEATURE_DIM}")
    if audio.shape != (FEATURE_DIM,):
        raise FormatError(f"{where}: audio has {audio.size} values, expected {FEATURE_DIM}")
    if not (np.isfinite(video).all() and np.isfinite(audio).all()):
        raise FormatError(f"{where}: non-finite feature values")
    return FeatureRecord(id=str(obj["id"]), video=video, audio=audio, label=int(obj["label"]))


def _load_jsonl(path) -> Dataset:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"dataset line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(parse_jsonl_record(obj, f"dataset line {lineno}"))
    ds = Dataset(records=records, provenance=f"loaded:{path}")
    ds.validate()
    return ds


def expected_binary_size(ds: Dataset) -> int:
    """Exact on-disk size of the binary format for this dataset."""
    per_record = sum(2 + len(r.id.encode("utf-8")) + 2 * FEATURE_DIM * 8 + 1 for r in ds.records)
    return 4 + 1 + 4 + per_record + 8
