"""Utterance conversion: generator on MCCs, log-Gaussian F0 transform, aperiodicity passthrough."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import (
    UNVOICED_LOG_F0,
    FeatureBundle,
    SpeakerStats,
    denormalize_mcc,
    normalize_mcc,
    read_features,
    write_features,
)
from .model import Generator
from .training import Checkpoint, load_checkpoint
from .vocoder import (
    DEFAULT_ALPHA,
    SAMPLE_RATE_HZ,
    ToyBackend,
    VocoderBackend,
    analyze_to_features,
    features_to_waveform,
    read_wav,
    write_wav,
)

log = logging.getLogger(__name__)


def convert_f0(log_f0, src: SpeakerStats, tgt: SpeakerStats) -> np.ndarray:
    """Match source log-F0 mean/std to the target's on voiced frames; sentinels pass through."""
    if not src.sigma_logf0 > 0:
        raise ValueError("source sigma_logf0 must be positive")
    log_f0 = np.asarray(log_f0, dtype=np.float64)
    out = log_f0.copy()
    voiced = log_f0 != UNVOICED_LOG_F0
    out[voiced] = (log_f0[voiced] - src.mu_logf0) * (tgt.sigma_logf0 / src.sigma_logf0) + tgt.mu_logf0
    return out


def _pad_to_multiple(x: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate along time (axis 1) up to the next multiple."""
    extra = -x.shape[1] % multiple
    return np.pad(x, ((0, 0), (0, extra)), mode="edge") if extra else x


def convert_mcc(gen: Generator, mcc: np.ndarray, src_index: int, tgt_index: int,
                src_stats: SpeakerStats, tgt_stats: SpeakerStats) -> np.ndarray:
    cfg = gen.config
    if mcc.shape[1] != cfg.in_dims:
        raise ValueError(f"feature dimension mismatch: {mcc.shape[1]} vs model {cfg.in_dims}")
    T = mcc.shape[0]
    x = _pad_to_multiple(normalize_mcc(mcc, src_stats).T, cfg.time_multiple)
    dtype = next(gen.parameters()).dtype
    n = cfg.n_speakers
    src = torch.zeros(1, n, dtype=dtype)
    tgt = torch.zeros(1, n, dtype=dtype)
    src[0, src_index] = 1
    tgt[0, tgt_index] = 1
    with torch.no_grad():
        y = gen(torch.as_tensor(x, dtype=dtype)[None], src, tgt)[0].double().numpy()
    return denormalize_mcc(y[:, :T].T, tgt_stats)


def convert_utterance(checkpoint: Checkpoint, bundle: FeatureBundle, src_label: str, tgt_label: str) -> FeatureBundle:
    reg = checkpoint.registry
    s, t = reg.index(src_label), reg.index(tgt_label)
    src_stats, tgt_stats = checkpoint.stats[s], checkpoint.stats[t]
    mcc = convert_mcc(checkpoint.generator, bundle.mcc, s, t, src_stats, tgt_stats)
    return replace(bundle, mcc=mcc, log_f0=convert_f0(bundle.log_f0, src_stats, tgt_stats), ap=bundle.ap)


@dataclass
class ConversionRequest:
    checkpoint: Path | Checkpoint
    source_label: str
    target_label: str
    input_path: Path
    output_path: Path
    features_out: Path | None = None

    @property
    def is_identity(self) -> bool:
        return self.source_label == self.target_label


def load_input_features(path, backend: VocoderBackend, alpha: float = DEFAULT_ALPHA) -> FeatureBundle:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return analyze_to_features(read_wav(path, target_rate=SAMPLE_RATE_HZ), backend, alpha)
    return read_features(path)


def convert_file(request: ConversionRequest, backend: VocoderBackend | None = None,
                 alpha: float = DEFAULT_ALPHA) -> Path:
    """Analyze (or read cached features), convert, synthesize and write a 16-bit WAV."""
    backend = backend or ToyBackend()
    ckpt = request.checkpoint
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    # resolve labels before any expensive work
    ckpt.registry.index(request.source_label)
    ckpt.registry.index(request.target_label)
    if request.is_identity:
        log.info("source and target are both %s: identity conversion", request.source_label)

    bundle = load_input_features(request.input_path, backend, alpha)
    converted = convert_utterance(ckpt, bundle, request.source_label, request.target_label)
    if request.features_out is not None:
        write_features(request.features_out, converted)
    write_wav(request.output_path, features_to_waveform(converted, backend, alpha))
    return Path(request.output_path)
