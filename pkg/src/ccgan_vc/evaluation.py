"""DTW alignment, mel-cepstral distortion, modulation spectral distance and grouped reports.

Dimension 0 (energy) is excluded from alignment costs and from both metrics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FeatureFileError, SpeakerRegistry, read_features

MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
GROUPS = ("F to F", "M to F", "F to M", "M to M")
AVERAGE = "Average"


def _frame_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = a[:, 1:], b[:, 1:]
    sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def path_cost(costs: np.ndarray, path) -> float:
    return float(sum(costs[i, j] for i, j in path))


def dtw_align(a, b) -> list[tuple[int, int]]:
    """Minimum-cost monotone path from (0, 0) to (Ta-1, Tb-1).

    Steps are (1,1), (1,0) or (0,1); ties prefer (1,1), then (1,0).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty input to dtw_align")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    return _dtw(_frame_costs(a, b) if a.shape[1] > 1 else np.zeros((a.shape[0], b.shape[0])))


def _dtw(costs: np.ndarray) -> list[tuple[int, int]]:
    ta, tb = costs.shape
    acc = np.full((ta + 1, tb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, ta + 1):
        row, prev, c = acc[i], acc[i - 1], costs[i - 1]
        for j in range(1, tb + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    path = [(ta - 1, tb - 1)]
    i, j = ta, tb
    while (i, j) != (1, 1):
        # predecessors in tie-break order: diagonal, then vertical, then horizontal
        options = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(options, key=lambda p: acc[p])
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def mcd(converted_mcc, reference_mcc) -> float:
    """Mean over the DTW path of (10/ln10) * sqrt(2 * sum_{k>=1} (c_k - c'_k)^2), in dB."""
    a = np.asarray(converted_mcc, dtype=np.float64)
    b = np.asarray(reference_mcc, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input to mcd")
    path = np.asarray(dtw_align(a, b))
    diff = a[path[:, 0], 1:] - b[path[:, 1], 1:]
    return float(np.mean(MCD_SCALE * np.sqrt((diff**2).sum(axis=1))))


def align_to_reference(converted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Resample ``converted`` onto the reference timing (mean of the frames mapped to each reference frame)."""
    path = np.asarray(dtw_align(converted, reference))
    out = np.zeros((reference.shape[0], converted.shape[1]))
    counts = np.zeros(reference.shape[0])
    np.add.at(out, path[:, 1], converted[path[:, 0]])
    np.add.at(counts, path[:, 1], 1.0)
    return out / counts[:, None]


def modulation_spectrum(mcc: np.ndarray, segment: int = 64, eps: float = 1e-10) -> np.ndarray:
    """Segment-averaged log modulation power, dims 1.. (shape (D-1) x (segment//2 + 1))."""
    x = np.asarray(mcc, dtype=np.float64)[:, 1:]
    if x.shape[0] < segment:
        raise ValueError(f"sequence too short: {x.shape[0]} frames < segment {segment}")
    hop = segment // 2
    window = np.hanning(segment)[:, None]
    starts = range(0, x.shape[0] - segment + 1, hop)
    spectra = [np.log(np.abs(np.fft.rfft(x[s : s + segment] * window, axis=0)) ** 2 + eps) for s in starts]
    return np.mean(spectra, axis=0).T


def msd(converted_mcc, reference_mcc, segment: int = 64, align: bool = True, eps: float = 1e-10) -> float:
    """RMS difference of log modulation spectra over dims 1.. and all modulation bins.

    With ``align`` the converted sequence is first resampled onto the
    reference timing via DTW.
    """
    a = np.asarray(converted_mcc, dtype=np.float64)
    b = np.asarray(reference_mcc, dtype=np.float64)
    for name, x in (("converted", a), ("reference", b)):
        if x.shape[0] < segment:
            raise ValueError(f"{name} sequence too short: {x.shape[0]} frames < segment {segment}")
    if align:
        a = align_to_reference(a, b)
    d = modulation_spectrum(a, segment, eps) - modulation_spectrum(b, segment, eps)
    return float(np.sqrt(np.mean(d**2)))


# --------------------------------------------------------------------------
# reports


@dataclass
class GroupStats:
    mcd_mean: float
    mcd_std: float
    msd_mean: float
    msd_std: float
    count: int


@dataclass
class FileResult:
    name: str
    source: str
    target: str
    mcd: float
    msd: float


@dataclass
class EvalReport:
    groups: dict[str, GroupStats]
    files: list[FileResult] = field(default_factory=list)

    def rows(self) -> list[str]:
        return list(GROUPS) + [AVERAGE]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["group", "metric", "mean", "std", "count"])
            for g in self.rows():
                s = self.groups.get(g)
                if s is None:
                    continue
                w.writerow([g, "MCD", repr(s.mcd_mean), repr(s.mcd_std), s.count])
                w.writerow([g, "MSD", repr(s.msd_mean), repr(s.msd_std), s.count])

    def format_table(self) -> str:
        lines = [f"{'':<10}{'MCD (dB)':>18}{'MSD':>18}{'n':>6}"]
        for g in self.rows():
            s = self.groups.get(g)
            if s is None:
                lines.append(f"{g:<10}{'n/a':>18}{'n/a':>18}{0:>6}")
            else:
                mcd_s = f"{s.mcd_mean:.2f} ± {s.mcd_std:.2f}"
                msd_s = f"{s.msd_mean:.2f} ± {s.msd_std:.2f}"
                lines.append(f"{g:<10}{mcd_s:>18}{msd_s:>18}{s.count:>6}")
        return "\n".join(lines)


def _group_stats(results: list[FileResult]) -> GroupStats:
    m = np.array([r.mcd for r in results])
    s = np.array([r.msd for r in results])
    return GroupStats(float(m.mean()), float(m.std()), float(s.mean()), float(s.std()), len(results))


def build_report(results: list[FileResult], registry: SpeakerRegistry) -> EvalReport:
    if not results:
        raise ValueError("no results to report")
    gender = dict(zip(registry.labels, registry.gender))
    by_group: dict[str, list[FileResult]] = {}
    for r in results:
        gs, gt = gender.get(r.source, "unknown"), gender.get(r.target, "unknown")
        if gs in ("F", "M") and gt in ("F", "M"):
            by_group.setdefault(f"{gs} to {gt}", []).append(r)
    groups = {g: _group_stats(rs) for g, rs in by_group.items()}
    groups[AVERAGE] = _group_stats(results)
    return EvalReport(groups, results)


def parse_converted_name(stem: str) -> tuple[str, str, str]:
    """``{src}__{tgt}__{utt}`` -> (src, tgt, utt)."""
    parts = stem.split("__")
    if len(parts) != 3 or not all(parts):
        raise ValueError(f"converted file name {stem!r} is not of the form SRC__TGT__UTT")
    return parts[0], parts[1], parts[2]


def evaluate_pairs(converted_dir, reference_dir, registry: SpeakerRegistry,
                   segment: int = 64, suffix: str = ".ccvc") -> EvalReport:
    """Score every ``SRC__TGT__UTT`` feature file against its reference.

    The reference is ``reference_dir/SRC__TGT__UTT`` if present, else
    ``reference_dir/TGT__UTT`` (the target speaker's real utterance).
    """
    converted_dir, reference_dir = Path(converted_dir), Path(reference_dir)
    files = sorted(converted_dir.glob(f"*{suffix}"))
    if not files:
        raise FileNotFoundError(f"no {suffix} files in {converted_dir}")
    results = []
    for f in files:
        src, tgt, utt = parse_converted_name(f.stem)
        for label in (src, tgt):
            registry.index(label)
        ref = reference_dir / f.name
        if not ref.exists():
            ref = reference_dir / f"{tgt}__{utt}{suffix}"
        if not ref.exists():
            raise FileNotFoundError(f"no reference for {f.stem} in {reference_dir}")
        try:
            conv_b, ref_b = read_features(f), read_features(ref)
        except FeatureFileError as e:
            raise FeatureFileError(f"unreadable features: {e}") from None
        results.append(FileResult(f.stem, src, tgt, mcd(conv_b.mcc, ref_b.mcc), msd(conv_b.mcc, ref_b.mcc, segment)))
    return build_report(results, registry)
