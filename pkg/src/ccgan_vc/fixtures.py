"""Deterministic synthetic multi-speaker corpus for smoke tests and demos.

Each speaker has its own deterministic MCC trajectory process: a smooth
low-dimensional trajectory (sums of slow sinusoids with speaker-specific
frequencies and phases) mapped through a speaker-specific loading matrix
onto 36 dims, plus a speaker mean and a little seeded white noise.
Utterances are successive windows of that process.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import (
    N_MCC,
    UNVOICED_LOG_F0,
    FeatureBundle,
    SpeakerRegistry,
    UtteranceRecord,
    compute_speaker_stats,
    write_features,
)
from .model import DiscriminatorConfig, GeneratorConfig
from .training import TrainConfig
from .vocoder import Waveform, write_wav

# 300 steps at the full-recipe rates (2e-4 / 1e-4) only reach ~0.65 of the
# initial cycle loss on the micro model, so the smoke run uses faster rates.
SMOKE_LR_G = 1e-3
SMOKE_LR_D = 5e-4


def micro_configs(n_speakers: int, base_channels: int = 8):
    """Default architecture with narrow channels, for tests and the fixture demo."""
    g = GeneratorConfig(n_speakers, base_channels=base_channels)
    d = DiscriminatorConfig(n_speakers, base_channels=base_channels)
    return g, d


def smoke_train_config(steps: int = 300, seed: int = 0, **kw) -> TrainConfig:
    """A single constant-rate epoch of ``steps`` iterations (no decay phase is reached with epochs=2)."""
    kw.setdefault("lr_g", SMOKE_LR_G)
    kw.setdefault("lr_d", SMOKE_LR_D)
    return TrainConfig(total_epochs=2, seed=seed, iters_per_epoch=steps, checkpoint_every=0, **kw)


def speaker_utterance(speaker: int, utt: int, n_frames: int = 256, dims: int = N_MCC,
                      n_latent: int = 1, n_partials: int = 2) -> FeatureBundle:
    """Frames ``[97 * utt, 97 * utt + n_frames)`` of the speaker's trajectory process."""
    srng = np.random.default_rng([1234, speaker])
    tilt = np.linspace(1.5, 0.2, dims)
    mean = srng.normal(0.0, 1.0, dims) * tilt
    mean[0] = -2.0 + speaker
    loading = srng.normal(0.0, 1.0, (dims, n_latent)) * tilt[:, None]
    freq = srng.uniform(1 / 96, 1 / 24, (n_latent, n_partials))
    phase = srng.uniform(0, 2 * np.pi, (n_latent, n_partials))
    mu_f0 = np.log(110.0 * 1.3**speaker)

    t = 97.0 * utt + np.arange(n_frames)
    content = np.sin(2 * np.pi * freq * t[:, None, None] + phase).sum(axis=2) / np.sqrt(n_partials / 2)
    urng = np.random.default_rng([1234, speaker, utt])
    mcc = mean + content @ loading.T + urng.normal(0.0, 0.02, (n_frames, dims))

    log_f0 = mu_f0 + 0.08 * content[:, 0] + urng.normal(0.0, 0.01, n_frames)
    log_f0[(t % 50) >= 40] = UNVOICED_LOG_F0
    ap = np.full((n_frames, 1), 0.1)
    return FeatureBundle(mcc, log_f0, ap)


def synthetic_corpus(n_speakers: int = 3, n_utts: int = 20, n_frames: int = 256, n_eval: int = 0):
    """Returns (registry, dataset, stats); dataset is a list of (record, bundle)."""
    genders = tuple("F" if s % 2 == 0 else "M" for s in range(n_speakers))
    registry = SpeakerRegistry(tuple(f"S{s}" for s in range(n_speakers)), genders)
    dataset = []
    for s in range(n_speakers):
        for u in range(n_utts + n_eval):
            split = "train" if u < n_utts else "eval"
            record = UtteranceRecord(s, Path(f"S{s}/utt{u:03d}.ccvc"), split)
            dataset.append((record, speaker_utterance(s, u, n_frames)))
    stats = [
        compute_speaker_stats([b for r, b in dataset if r.speaker_index == s and r.split == "train"])
        for s in range(n_speakers)
    ]
    return registry, dataset, stats


def speaker_waveform(speaker: int, utt: int, seconds: float = 0.5, rate: int = 22050) -> Waveform:
    """Harmonic tone at the speaker's pitch with a slow utterance-dependent vibrato."""
    t = np.arange(int(round(seconds * rate))) / rate
    f0 = 110.0 * 1.3**speaker * (1.0 + 0.03 * np.sin(2 * np.pi * (2.0 + 0.3 * utt) * t))
    phase = 2 * np.pi * np.cumsum(f0) / rate
    x = sum(np.sin(k * phase) / k for k in range(1, 6))
    return Waveform(0.2 * x / np.max(np.abs(x)), rate)


def write_fixture_corpus(root, n_speakers: int = 3, n_utts: int = 20, n_eval: int = 2,
                         n_frames: int = 256, audio: bool = False, audio_seconds: float = 0.8) -> Path:
    """Write the fixture to disk and return the manifest path.

    Without ``audio`` the manifest lists ready-made feature files; with it,
    short WAV tones that ``extract`` can analyze.
    """
    root = Path(root)
    speakers = []
    for s in range(n_speakers):
        entry = {"label": f"S{s}", "gender": "F" if s % 2 == 0 else "M", "train": [], "eval": []}
        for u in range(n_utts + n_eval):
            split = "train" if u < n_utts else "eval"
            if audio:
                rel = Path("audio") / f"S{s}" / f"utt{u:03d}.wav"
                write_wav(root / rel, speaker_waveform(s, u, audio_seconds))
            else:
                rel = Path("features") / f"S{s}__utt{u:03d}.ccvc"
                write_features(root / rel, speaker_utterance(s, u, n_frames))
            entry[split].append(rel.as_posix())
        speakers.append(entry)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"speakers": speakers}, indent=1), encoding="utf-8")
    return manifest
