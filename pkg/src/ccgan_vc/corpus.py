"""Speaker registry, manifests, feature bundles and training-pair sampling."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_MCC = 36
FRAME_PERIOD_MS = 5.0
SAMPLE_RATE_HZ = 22050
CROP_FRAMES = 128

# A frame is voiced iff its log-F0 differs from this value.
UNVOICED_LOG_F0 = -1e10
STD_FLOOR = 1e-6

GENDERS = ("F", "M", "unknown")

FEATURE_MAGIC = b"CCVC"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIIdI")


class ManifestError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerRegistry:
    labels: tuple[str, ...]
    gender: tuple[str, ...] = ()

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            dup = sorted({l for l in labels if labels.count(l) > 1})
            raise ManifestError(f"duplicate speaker label(s): {', '.join(dup)}")
        if len(labels) < 2:
            raise ManifestError("a registry needs at least 2 speakers")
        gender = tuple(self.gender) or ("unknown",) * len(labels)
        if len(gender) != len(labels):
            raise ManifestError("gender tags must match speaker count")
        for g in gender:
            if g not in GENDERS:
                raise ManifestError(f"invalid gender tag {g!r}")
        object.__setattr__(self, "gender", gender)

    @property
    def n(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            known = ", ".join(self.labels)
            raise KeyError(f"unknown speaker {label!r}; known speakers: {known}") from None

    def one_hot(self, label: str) -> np.ndarray:
        return one_hot(self.index(label), self.n)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "gender": list(self.gender)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerRegistry":
        return cls(tuple(d["labels"]), tuple(d["gender"]))


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_index: int
    source: Path
    split: str

    @property
    def utt_id(self) -> str:
        return Path(self.source).stem


@dataclass
class FeatureBundle:
    """Per-utterance features, frames along axis 0.

    ``mcc`` is T x 36, ``log_f0`` has length T (``UNVOICED_LOG_F0`` on
    unvoiced frames) and ``ap`` is T x B.
    """

    mcc: np.ndarray
    log_f0: np.ndarray
    ap: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.mcc = np.asarray(self.mcc, dtype=np.float64)
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64)
        self.ap = np.asarray(self.ap, dtype=np.float64)
        if self.ap.ndim == 1:
            self.ap = self.ap[:, None]
        if self.mcc.ndim != 2 or self.mcc.shape[1] != N_MCC:
            raise ValueError(f"mcc must be T x {N_MCC}, got {self.mcc.shape}")
        T = self.mcc.shape[0]
        if self.log_f0.shape != (T,) or self.ap.shape[0] != T:
            raise ValueError("mcc, log_f0 and ap must share the frame count")
        if not np.all(np.isfinite(self.mcc)):
            raise ValueError("mcc contains non-finite values")
        if not self.frame_period_ms > 0:
            raise ValueError("frame_period_ms must be positive")

    @property
    def n_frames(self) -> int:
        return self.mcc.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.log_f0 != UNVOICED_LOG_F0


@dataclass
class SpeakerStats:
    mu_logf0: float
    sigma_logf0: float
    mcc_mean: np.ndarray
    mcc_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mu_logf0": float(self.mu_logf0),
            "sigma_logf0": float(self.sigma_logf0),
            "mcc_mean": [float(v) for v in self.mcc_mean],
            "mcc_std": [float(v) for v in self.mcc_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerStats":
        return cls(
            float(d["mu_logf0"]),
            float(d["sigma_logf0"]),
            np.asarray(d["mcc_mean"], dtype=np.float64),
            np.asarray(d["mcc_std"], dtype=np.float64),
        )


# --------------------------------------------------------------------------
# manifest

_SPEAKER_KEYS = {"label", "gender", "train", "eval"}


def load_manifest(path) -> tuple[SpeakerRegistry, list[UtteranceRecord]]:
    """Parse a JSON manifest. Relative file paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    return parse_manifest(doc, base_dir=path.parent)


def parse_manifest(doc, base_dir=".") -> tuple[SpeakerRegistry, list[UtteranceRecord]]:
    base_dir = Path(base_dir)
    if not isinstance(doc, dict) or set(doc) != {"speakers"}:
        raise ManifestError("manifest must be an object with exactly one key 'speakers'")
    speakers = doc["speakers"]
    if not isinstance(speakers, list):
        raise ManifestError("'speakers' must be an array")

    labels, genders, files = [], [], []
    for i, entry in enumerate(speakers):
        if not isinstance(entry, dict):
            raise ManifestError(f"speakers[{i}] must be an object")
        keys = set(entry)
        if keys - _SPEAKER_KEYS:
            raise ManifestError(f"speakers[{i}]: unknown field(s) {sorted(keys - _SPEAKER_KEYS)}")
        if keys != _SPEAKER_KEYS:
            raise ManifestError(f"speakers[{i}]: missing field(s) {sorted(_SPEAKER_KEYS - keys)}")
        label = entry["label"]
        if not isinstance(label, str) or not label:
            raise ManifestError(f"speakers[{i}]: label must be a non-empty string")
        if label in labels:
            raise ManifestError(f"duplicate speaker label {label!r}")
        if entry["gender"] not in GENDERS:
            raise ManifestError(f"speakers[{i}]: gender must be one of {GENDERS}")
        for split in ("train", "eval"):
            lst = entry[split]
            if not isinstance(lst, list) or not all(isinstance(p, str) and p for p in lst):
                raise ManifestError(f"speakers[{i}].{split} must be an array of non-empty paths")
        labels.append(label)
        genders.append(entry["gender"])
        files.append(entry)

    registry = SpeakerRegistry(tuple(labels), tuple(genders))
    records = []
    for split in ("train", "eval"):
        for idx, entry in enumerate(files):
            for p in entry[split]:
                records.append(UtteranceRecord(idx, base_dir / p, split))
    return registry, records


# --------------------------------------------------------------------------
# identity vectors, statistics, normalization


def one_hot(index: int, n: int) -> np.ndarray:
    if not 0 <= index < n:
        raise IndexError(f"index out of range: {index} not in [0, {n})")
    v = np.zeros(n)
    v[index] = 1.0
    return v


def is_one_hot(v) -> bool:
    v = np.asarray(v)
    return v.ndim == 1 and np.all((v == 0) | (v == 1)) and np.count_nonzero(v) == 1


def compute_speaker_stats(bundles: Sequence[FeatureBundle]) -> SpeakerStats:
    if not bundles:
        raise ValueError("empty bundle list")
    mcc = np.concatenate([b.mcc for b in bundles], axis=0)
    if mcc.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    f0 = np.concatenate([b.log_f0[b.voiced] for b in bundles])
    if f0.size == 0:
        raise ValueError("no voiced frames")
    return SpeakerStats(
        mu_logf0=float(f0.mean()),
        sigma_logf0=max(float(f0.std()), STD_FLOOR),
        mcc_mean=mcc.mean(axis=0),
        mcc_std=np.maximum(mcc.std(axis=0), STD_FLOOR),
    )


def _check_dims(mcc, stats):
    if mcc.shape[-1] != stats.mcc_mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: mcc has {mcc.shape[-1]} dims, stats have {stats.mcc_mean.shape[0]}"
        )


def normalize_mcc(mcc: np.ndarray, stats: SpeakerStats) -> np.ndarray:
    mcc = np.asarray(mcc, dtype=np.float64)
    _check_dims(mcc, stats)
    return (mcc - stats.mcc_mean) / stats.mcc_std


def denormalize_mcc(mcc: np.ndarray, stats: SpeakerStats) -> np.ndarray:
    mcc = np.asarray(mcc, dtype=np.float64)
    _check_dims(mcc, stats)
    return mcc * stats.mcc_std + stats.mcc_mean


# --------------------------------------------------------------------------
# training pairs


@dataclass
class TrainingPair:
    x: np.ndarray  # 36 x crop, source speaker, normalized
    src_id: np.ndarray
    y: np.ndarray  # 36 x crop, target speaker, normalized
    tgt_id: np.ndarray
    src_index: int = field(default=-1)
    tgt_index: int = field(default=-1)

    def __iter__(self):
        return iter((self.x, self.src_id, self.y, self.tgt_id))


def _usable_by_speaker(dataset, n, crop_frames):
    by_speaker: dict[int, list[np.ndarray]] = {}
    for record, bundle in dataset:
        if record.split != "train" or bundle.n_frames < crop_frames:
            continue
        if not 0 <= record.speaker_index < n:
            raise ValueError(f"record speaker index {record.speaker_index} out of range")
        by_speaker.setdefault(record.speaker_index, []).append(bundle.mcc)
    return by_speaker


def sample_training_pair(
    dataset: Sequence[tuple[UtteranceRecord, FeatureBundle]],
    registry: SpeakerRegistry,
    stats_by_speaker: Sequence[SpeakerStats],
    rng: np.random.Generator,
    crop_frames: int = CROP_FRAMES,
) -> TrainingPair:
    """Draw distinct source/target speakers, one utterance each, and a random crop of each.

    Speakers are drawn uniformly among those with at least one train
    utterance of ``crop_frames`` frames; shorter utterances are never used.
    """
    by_speaker = _usable_by_speaker(dataset, registry.n, crop_frames)
    if not by_speaker:
        raise ValueError(f"no usable utterance (none has >= {crop_frames} frames)")
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise ValueError("fewer than 2 speakers with usable utterances")

    i = int(rng.integers(len(speakers)))
    j = int(rng.integers(len(speakers) - 1))
    if j >= i:
        j += 1
    src, tgt = speakers[i], speakers[j]

    def crop(spk):
        utts = by_speaker[spk]
        mcc = utts[int(rng.integers(len(utts)))]
        start = int(rng.integers(mcc.shape[0] - crop_frames + 1))
        seg = mcc[start : start + crop_frames]
        return normalize_mcc(seg, stats_by_speaker[spk]).T.copy()

    x = crop(src)
    y = crop(tgt)
    return TrainingPair(x, one_hot(src, registry.n), y, one_hot(tgt, registry.n), src, tgt)


# --------------------------------------------------------------------------
# feature cache files


def write_features(path, bundle: FeatureBundle) -> None:
    path = Path(path)
    T = bundle.n_frames
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC,
        FEATURE_VERSION,
        T,
        N_MCC,
        bundle.ap.shape[1],
        float(bundle.frame_period_ms),
        int(bundle.sample_rate_hz),
    )
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (bundle.mcc, bundle.log_f0, bundle.ap)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def read_features(path) -> FeatureBundle:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"{path}: truncated feature file")
    magic, version, T, n_mcc, bands, period, sr = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file (bad magic)")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if n_mcc != N_MCC:
        raise FeatureFileError(f"{path}: expected {N_MCC} MCCs, found {n_mcc}")
    expected = _FEATURE_HEADER.size + 8 * T * (n_mcc + 1 + bands)
    if len(data) != expected:
        raise FeatureFileError(f"{path}: size {len(data)} does not match header ({expected})")
    arr = np.frombuffer(data, dtype="<f8", offset=_FEATURE_HEADER.size).astype(np.float64)
    mcc = arr[: T * n_mcc].reshape(T, n_mcc)
    log_f0 = arr[T * n_mcc : T * (n_mcc + 1)]
    ap = arr[T * (n_mcc + 1) :].reshape(T, bands)
    return FeatureBundle(mcc, log_f0, ap, period, sr)


def save_stats(path, registry: SpeakerRegistry, stats: Sequence[SpeakerStats]) -> None:
    doc = {"registry": registry.to_dict(), "stats": [s.to_dict() for s in stats]}
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_stats(path) -> tuple[SpeakerRegistry, list[SpeakerStats]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return SpeakerRegistry.from_dict(doc["registry"]), [SpeakerStats.from_dict(s) for s in doc["stats"]]
