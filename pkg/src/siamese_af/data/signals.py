"""Signal segments: slicing, decimation, quality flags and CSV import."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CANONICAL_RATE = 80.0
CANONICAL_SECONDS = 30.0
CANONICAL_LENGTH = 2400

ECG, PPG = "ECG", "PPG"


@dataclass
class SignalSegment:
    samples: np.ndarray
    sampling_rate: float
    modality: str = ECG
    patient_id: str = ""
    segment_index: int = 0
    quality_flag: str = "ok"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.modality not in (ECG, PPG):
            raise ValueError(f"modality must be ECG or PPG, got {self.modality!r}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sampling_rate


@dataclass
class PairedSample:
    ecg: SignalSegment
    ppg: SignalSegment
    label: int  # 0 non-AF, 1 AF, 2 unlabeled
    patient_id: str

    def __post_init__(self):
        if not (self.ecg.patient_id == self.ppg.patient_id == self.patient_id):
            raise ValueError("ECG, PPG and sample patient ids differ")
        if self.ecg.segment_index != self.ppg.segment_index:
            raise ValueError("ECG and PPG segments are not time-synchronized")
        if self.label not in (0, 1, 2):
            raise ValueError(f"label code must be 0, 1 or 2, got {self.label}")


def pad_wrap(samples: np.ndarray, rate: float, target_seconds: float) -> np.ndarray:
    """Extend a short record by appending its own beginning (e.g. 25 s -> 30 s)."""
    samples = np.asarray(samples)
    target = int(round(target_seconds * rate))
    if samples.size >= target:
        return samples[:target]
    if samples.size == 0:
        raise ValueError("cannot wrap an empty record")
    reps = -(-target // samples.size)
    return np.tile(samples, reps)[:target]


def slice_segments(samples, rate: float, patient_id: str = "", modality: str = ECG,
                   window_seconds: float = CANONICAL_SECONDS, pad_wrap_seconds: float | None = None
                   ) -> list[SignalSegment]:
    """Cut a long record into non-overlapping windows; a trailing partial window is dropped.

    ``pad_wrap_seconds`` first extends records shorter than that duration by
    wrapping their start onto the end.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if pad_wrap_seconds is not None:
        samples = pad_wrap(samples, rate, max(pad_wrap_seconds, samples.size / rate))
    window = int(round(window_seconds * rate))
    n = samples.size // window
    if n == 0:
        raise ValueError(f"record of {samples.size / rate:.2f} s is shorter than one {window_seconds} s window")
    return [SignalSegment(samples[i * window : (i + 1) * window].copy(), rate, modality, patient_id, i)
            for i in range(n)]


def _decimate(x: np.ndarray, factor: int) -> np.ndarray:
    n = x.shape[-1] // factor
    # mean over each block = moving average of width `factor`, sampled every `factor`
    return x[..., : n * factor].reshape(*x.shape[:-1], n, factor).mean(axis=-1)


def resample(segment: SignalSegment, target_rate: float = CANONICAL_RATE) -> SignalSegment:
    """Integer-factor decimation with a moving-average anti-alias filter."""
    ratio = segment.sampling_rate / target_rate
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"{segment.sampling_rate} Hz -> {target_rate} Hz is not an integer decimation")
    if factor == 1:
        return replace(segment, samples=segment.samples.copy())
    return replace(segment, samples=_decimate(segment.samples, factor), sampling_rate=float(target_rate))


def assess_quality(samples: np.ndarray, flat_tol: float = 1e-8, clip_fraction: float = 0.05) -> str:
    """``flat`` for (near-)constant input, ``clipped`` when many samples sit at the extremes."""
    x = np.asarray(samples)
    if x.size == 0 or np.ptp(x) <= flat_tol:
        return "flat"
    lo, hi = x.min(), x.max()
    at_rail = max(np.mean(x == lo), np.mean(x == hi))
    return "clipped" if at_rail >= clip_fraction else "ok"


def read_waveform_csv(path, sampling_rate: float, value_column: str | None = None) -> np.ndarray:
    """Read a single-channel waveform CSV (``value`` or ``timestamp,value`` columns).

    A header row is optional. Returns the raw samples; pair with
    :func:`slice_segments` and :func:`resample` to get canonical segments.
    """
    if sampling_rate <= 0:
        raise ValueError("sampling_rate must be positive")
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: no data")
    col = -1
    try:
        float(rows[0][-1])
    except ValueError:
        header = [h.strip().lower() for h in rows[0]]
        rows = rows[1:]
        name = (value_column or "value").lower()
        col = header.index(name) if name in header else len(header) - 1
    return np.array([float(r[col]) for r in rows])
