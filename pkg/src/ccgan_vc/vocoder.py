"""Waveform <-> FeatureBundle adapter.

Analysis and synthesis go through a :class:`VocoderBackend`. Two backends
ship here: :class:`ToyBackend`, a small dependency-free analysis/synthesis
pair used by the tests, and :class:`WorldBackend`, a thin wrapper over
``pyworld`` that is only importable when that package is installed.

Spectral envelopes (power spectra on ``n_bins`` linear bins spanning
0..Nyquist) are reduced to 36 mel-cepstral coefficients by a weighted
least-squares cosine fit on the all-pass warped frequency axis.  The half
log envelope is modelled as ``sum_k c_k cos(k * warp(w))``, so a constant
power envelope ``e^c`` maps to ``c_0 = c / 2``.
"""
from __future__ import annotations

import abc
import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .corpus import FRAME_PERIOD_MS, N_MCC, SAMPLE_RATE_HZ, UNVOICED_LOG_F0, FeatureBundle

DEFAULT_ALPHA = 0.455
# Coefficient-0 response to a constant log-power envelope of value c: c * C0_SCALE.
C0_SCALE = 0.5


class VocoderError(RuntimeError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def hop_samples(sample_rate: int, frame_period_ms: float = FRAME_PERIOD_MS) -> float:
    return sample_rate * frame_period_ms / 1000.0


def n_frames_for(n_samples: int, sample_rate: int, frame_period_ms: float = FRAME_PERIOD_MS) -> int:
    return int(np.floor(n_samples / hop_samples(sample_rate, frame_period_ms))) + 1


def n_samples_for(n_frames: int, sample_rate: int, frame_period_ms: float = FRAME_PERIOD_MS) -> int:
    # frames sit at i * hop, so T frames cover roughly (T - 1/2) hops of audio
    return int(round((n_frames - 0.5) * hop_samples(sample_rate, frame_period_ms)))


# --------------------------------------------------------------------------
# envelope <-> mel-cepstrum


def warp_frequency(omega: np.ndarray, alpha: float) -> np.ndarray:
    """First-order all-pass frequency warping, maps [0, pi] onto itself."""
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


def _warp_derivative(omega, alpha):
    return (1.0 - alpha**2) / (1.0 - 2.0 * alpha * np.cos(omega) + alpha**2)


@functools.lru_cache(maxsize=32)
def _cepstral_basis(n_bins: int, alpha: float, order: int):
    omega = np.linspace(0.0, np.pi, n_bins)
    basis = np.cos(np.outer(warp_frequency(omega, alpha), np.arange(order)))
    # quadrature weights for the uniform measure on the warped axis
    trap = np.full(n_bins, 1.0)
    trap[[0, -1]] = 0.5
    sw = np.sqrt(trap * _warp_derivative(omega, alpha))
    projector = np.linalg.pinv(basis * sw[:, None]) * sw[None, :]
    basis.setflags(write=False)
    projector.setflags(write=False)
    return basis, projector


def mcc_from_envelope(envelope, alpha: float = DEFAULT_ALPHA, order: int = N_MCC) -> np.ndarray:
    """Power envelope (F,) or (T, F) -> mel-cepstrum (order,) or (T, order)."""
    env = np.asarray(envelope, dtype=np.float64)
    if env.shape[-1] < 64:
        raise ValueError(f"envelope needs at least 64 bins, got {env.shape[-1]}")
    if not np.all(env > 0):
        raise ValueError("envelope must be strictly positive")
    _, projector = _cepstral_basis(env.shape[-1], float(alpha), order)
    return (0.5 * np.log(env)) @ projector.T


def envelope_from_mcc(mcc, alpha: float = DEFAULT_ALPHA, n_bins: int = 513) -> np.ndarray:
    mcc = np.asarray(mcc, dtype=np.float64)
    if n_bins < 64:
        raise ValueError(f"n_bins must be at least 64, got {n_bins}")
    basis, _ = _cepstral_basis(n_bins, float(alpha), mcc.shape[-1])
    return np.exp(2.0 * (mcc @ basis.T))


# --------------------------------------------------------------------------
# backends


class VocoderBackend(abc.ABC):
    """Analysis/synthesis at a 5 ms hop.

    ``analyze`` returns ``(f0, envelope, ap)`` with ``f0`` in Hz (0 when
    unvoiced), ``envelope`` T x n_bins power spectra and ``ap`` T x B.
    """

    n_bins: int

    @abc.abstractmethod
    def analyze(self, samples: np.ndarray, sample_rate: int):
        ...

    @abc.abstractmethod
    def synthesize(self, f0, envelope, ap, sample_rate: int) -> np.ndarray:
        ...


class ToyBackend(VocoderBackend):
    """Autocorrelation pitch, STFT power "envelope", constant aperiodicity.

    Synthesis mixes a band-limited harmonic excitation (1/k harmonic
    amplitudes) with seeded white noise and shapes it frame by frame with
    the envelope.  Not a WORLD substitute; stateless and thread-safe.
    """

    def __init__(self, n_fft: int = 1024, f0_min: float = 60.0, f0_max: float = 500.0,
                 voicing_threshold: float = 0.5, ap_level: float = 0.1, noise_seed: int = 0):
        self.n_fft = n_fft
        self.n_bins = n_fft // 2 + 1
        self.f0_min = f0_min
        self.f0_max = f0_max
        self.voicing_threshold = voicing_threshold
        self.ap_level = ap_level
        self.noise_seed = noise_seed
        self._window = np.hanning(n_fft)
        w = np.fft.rfft(self._window, 2 * n_fft)
        wac = np.fft.irfft(np.abs(w) ** 2)[:n_fft]
        self._window_ac = wac / wac[0]

    def _frames(self, x, sample_rate):
        T = n_frames_for(x.size, sample_rate)
        hop = hop_samples(sample_rate)
        half = self.n_fft // 2
        padded = np.pad(x, (half, half + self.n_fft), mode="constant")
        starts = np.round(np.arange(T) * hop).astype(int)
        idx = starts[:, None] + np.arange(self.n_fft)[None, :]
        return padded[idx] * self._window

    def _f0(self, frames, sample_rate):
        spec = np.fft.rfft(frames, 2 * self.n_fft, axis=1)
        ac = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : self.n_fft]
        energy = ac[:, 0]
        lo = int(np.floor(sample_rate / self.f0_max))
        hi = min(int(np.ceil(sample_rate / self.f0_min)), self.n_fft - 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = ac / np.maximum(energy[:, None], 1e-20) / self._window_ac[None, :]
        f0 = np.zeros(frames.shape[0])
        floor = 1e-8 * self.n_fft
        for t in range(frames.shape[0]):
            if energy[t] < floor:
                continue
            seg = r[t, lo : hi + 1]
            best = seg.max()
            if best < self.voicing_threshold:
                continue
            # first local maximum close to the global one avoids octave errors
            cand = np.flatnonzero(seg >= 0.9 * best)
            k = cand[0]
            while k + 1 < seg.size and seg[k + 1] > seg[k]:
                k += 1
            lag = float(lo + k)
            if 0 < k < seg.size - 1:
                a, b, c = seg[k - 1], seg[k], seg[k + 1]
                denom = a - 2 * b + c
                if denom < 0:
                    lag += 0.5 * (a - c) / denom
            f0[t] = sample_rate / lag
        return f0

    def analyze(self, samples, sample_rate):
        x = np.asarray(samples, dtype=np.float64)
        frames = self._frames(x, sample_rate)
        env = np.abs(np.fft.rfft(frames, axis=1)) ** 2 + 1e-10
        f0 = self._f0(frames, sample_rate)
        ap = np.full((frames.shape[0], 1), self.ap_level)
        return f0, env, ap

    def synthesize(self, f0, envelope, ap, sample_rate):
        f0 = np.asarray(f0, dtype=np.float64)
        envelope = np.asarray(envelope, dtype=np.float64)
        ap = np.asarray(ap, dtype=np.float64).reshape(len(f0), -1)
        T = f0.size
        if envelope.shape != (T, self.n_bins):
            raise VocoderError(f"envelope must be {T} x {self.n_bins}, got {envelope.shape}")
        n = n_samples_for(T, sample_rate)
        hop = hop_samples(sample_rate)
        frame_of = np.minimum(np.round(np.arange(n) / hop).astype(int), T - 1)

        f0_s = f0[frame_of]
        voiced = f0_s > 0
        phase = 2 * np.pi * np.cumsum(np.where(voiced, f0_s, 0.0)) / sample_rate
        harm = np.zeros(n)
        if voiced.any():
            k_max = int((sample_rate / 2) // f0_s[voiced].min())
            for k in range(1, k_max + 1):
                ok = voiced & (k * f0_s < sample_rate / 2)
                harm[ok] += np.sin(k * phase[ok]) / k
        noise = np.random.default_rng(self.noise_seed).standard_normal(n) * 0.3
        a = np.clip(ap.mean(axis=1)[frame_of], 0.0, 1.0)
        exc = np.where(voiced, np.sqrt(1 - a) * harm + np.sqrt(a) * noise, noise)

        half = self.n_fft // 2
        padded = np.pad(exc, (half, half + self.n_fft))
        out = np.zeros(padded.size)
        norm = np.zeros(padded.size)
        amp = np.sqrt(envelope) / np.sqrt(np.sum(self._window**2))
        for t in range(T):
            s = int(round(t * hop))
            seg = padded[s : s + self.n_fft] * self._window
            shaped = np.fft.irfft(np.fft.rfft(seg) * amp[t], self.n_fft)
            out[s : s + self.n_fft] += shaped
            norm[s : s + self.n_fft] += self._window
        y = out[half : half + n] / np.maximum(norm[half : half + n], 1e-8)
        peak = np.max(np.abs(y)) if y.size else 0.0
        if peak > 0.99:
            y *= 0.99 / peak
        return y


class WorldBackend(VocoderBackend):
    """WORLD (harvest + CheapTrick + D4C) through ``pyworld``."""

    def __init__(self, n_fft: int = 1024, f0_floor: float = 71.0, f0_ceil: float = 800.0):
        try:
            import pyworld
        except ImportError as e:  # pragma: no cover - optional dependency
            raise VocoderError("the WORLD backend needs the 'pyworld' package") from e
        self._pw = pyworld
        self.n_fft = n_fft
        self.n_bins = n_fft // 2 + 1
        self.f0_floor = f0_floor
        self.f0_ceil = f0_ceil

    def analyze(self, samples, sample_rate):  # pragma: no cover - optional dependency
        pw = self._pw
        x = np.ascontiguousarray(samples, dtype=np.float64)
        f0, t = pw.harvest(x, sample_rate, f0_floor=self.f0_floor, f0_ceil=self.f0_ceil,
                           frame_period=FRAME_PERIOD_MS)
        sp = pw.cheaptrick(x, f0, t, sample_rate, fft_size=self.n_fft)
        ap = pw.d4c(x, f0, t, sample_rate, fft_size=self.n_fft)
        return f0, sp, ap

    def synthesize(self, f0, envelope, ap, sample_rate):  # pragma: no cover
        y = self._pw.synthesize(
            np.ascontiguousarray(f0, dtype=np.float64),
            np.ascontiguousarray(envelope, dtype=np.float64),
            np.ascontiguousarray(ap, dtype=np.float64),
            sample_rate,
            FRAME_PERIOD_MS,
        )
        return np.clip(y, -1.0, 1.0)


BACKENDS = {"toy": ToyBackend, "world": WorldBackend}


def get_backend(name: str, **kwargs) -> VocoderBackend:
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise VocoderError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}") from None
    return cls(**kwargs)


# --------------------------------------------------------------------------
# pipeline


def analyze_to_features(wav: Waveform, backend: VocoderBackend, alpha: float = DEFAULT_ALPHA) -> FeatureBundle:
    if wav.samples.size == 0:
        raise ValueError("empty waveform")
    if wav.sample_rate_hz != SAMPLE_RATE_HZ:
        raise ValueError(
            f"expected {SAMPLE_RATE_HZ} Hz audio, got {wav.sample_rate_hz} Hz (resample first)"
        )
    try:
        f0, env, ap = backend.analyze(wav.samples, wav.sample_rate_hz)
    except VocoderError:
        raise
    except Exception as e:
        raise VocoderError(f"backend analysis failed: {e}") from e
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 < 0):
        raise VocoderError("backend returned negative F0")
    log_f0 = np.full(f0.shape, UNVOICED_LOG_F0)
    voiced = f0 > 0
    log_f0[voiced] = np.log(f0[voiced])
    mcc = mcc_from_envelope(env, alpha)
    return FeatureBundle(mcc, log_f0, ap, FRAME_PERIOD_MS, wav.sample_rate_hz)


def features_to_waveform(bundle: FeatureBundle, backend: VocoderBackend, alpha: float = DEFAULT_ALPHA) -> Waveform:
    env = envelope_from_mcc(bundle.mcc, alpha, backend.n_bins)
    voiced = bundle.voiced
    f0 = np.zeros(bundle.n_frames)
    f0[voiced] = np.exp(bundle.log_f0[voiced])
    try:
        y = backend.synthesize(f0, env, bundle.ap, bundle.sample_rate_hz)
    except VocoderError:
        raise
    except Exception as e:
        raise VocoderError(f"backend synthesis failed: {e}") from e
    return Waveform(y, bundle.sample_rate_hz)


# --------------------------------------------------------------------------
# audio I/O


def read_wav(path, target_rate: int | None = None) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        x = data.astype(np.float64)
    if target_rate is not None and rate != target_rate:
        g = np.gcd(int(rate), int(target_rate))
        x = resample_poly(x, target_rate // g, rate // g)
        rate = target_rate
    return Waveform(np.clip(x, -1.0, 1.0), int(rate))


def write_wav(path, wav: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(wav.samples, -1.0, 1.0) * 32767).astype("<i2")
    wavfile.write(str(path), wav.sample_rate_hz, pcm)
