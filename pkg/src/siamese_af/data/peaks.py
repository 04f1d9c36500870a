"""PPG pulse-peak and ECG R-peak detection, and peak-only encoding."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d, uniform_filter1d

from .signals import SignalSegment, assess_quality


def _samples(segment) -> tuple[np.ndarray, float]:
    if isinstance(segment, SignalSegment):
        return segment.samples, segment.sampling_rate
    return np.asarray(segment, dtype=np.float64), 80.0


def _flag_flat(segment, x) -> bool:
    flag = assess_quality(x)
    if isinstance(segment, SignalSegment) and flag == "flat":
        segment.quality_flag = "flat"
    return flag == "flat"


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Interior indices i with x[i-1] < x[i] >= x[i+1]."""
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    mid = x[1:-1]
    return np.nonzero((mid > x[:-2]) & (mid >= x[2:]))[0] + 1


def _refractory(idx: np.ndarray, height: np.ndarray, min_gap: int) -> np.ndarray:
    """Keep the tallest peaks such that no two are closer than ``min_gap`` samples."""
    keep: list[int] = []
    taken = np.zeros(0, dtype=np.int64)
    for i in idx[np.argsort(-height[idx], kind="stable")]:
        if taken.size and np.min(np.abs(taken - i)) < min_gap:
            continue
        keep.append(int(i))
        taken = np.asarray(keep)
    return np.sort(np.asarray(keep, dtype=np.int64))


def detect_peaks_ppg(segment, window_s: float = 0.75, range_fraction: float = 0.1,
                     refractory_s: float = 0.3) -> list[int]:
    """Systolic peaks: local maxima above a moving-average-plus-range threshold.

    Flat input returns ``[]`` and marks the segment ``flat``.
    """
    x, fs = _samples(segment)
    if _flag_flat(segment, x):
        return []
    xs = uniform_filter1d(x, 3, mode="nearest")
    w = max(3, int(round(window_s * fs)))
    ma = uniform_filter1d(xs, w, mode="nearest")
    local_range = maximum_filter1d(xs, w, mode="nearest") - minimum_filter1d(xs, w, mode="nearest")
    thresh = ma + range_fraction * local_range
    cand = _local_maxima(xs)
    cand = cand[xs[cand] > thresh[cand]]
    if cand.size == 0:
        return []
    peaks = _refractory(cand, xs, max(1, int(round(refractory_s * fs))))
    # refine on the unsmoothed signal
    refined = [int(max(range(max(p - 1, 0), min(p + 2, x.size)), key=lambda j: x[j])) for p in peaks]
    return sorted(set(refined))


def _integrate(x: np.ndarray, fs: float, window_s: float) -> np.ndarray:
    w = max(1, int(round(window_s * fs)))
    return uniform_filter1d(x, w, mode="nearest")


def detect_peaks_ecg(segment, integration_s: float = 0.15, refractory_s: float = 0.25,
                     search_s: float = 0.1) -> list[int]:
    """R peaks in the spirit of Pan-Tompkins.

    Five-point derivative, squaring, 150 ms moving-window integration, then
    an adaptive signal/noise level threshold with a search-back pass for
    missed beats. Each accepted integrator peak is mapped to the largest raw
    sample within ``search_s`` of it.
    """
    x, fs = _samples(segment)
    if _flag_flat(segment, x):
        return []
    xp = np.pad(x, 2, mode="edge")
    deriv = (2 * xp[4:] + xp[3:-1] - xp[1:-3] - 2 * xp[:-4]) / 8.0
    mwi = _integrate(deriv * deriv, fs, integration_s)
    gap = max(1, int(round(refractory_s * fs)))
    cand = _refractory(_local_maxima(np.pad(mwi, 1)) - 1, mwi, gap)
    cand = cand[(cand >= 0) & (cand < mwi.size)]
    if cand.size == 0:
        return []

    # learning phase: first two seconds set the initial levels
    init = mwi[: max(int(2 * fs), 1)]
    spk = 0.25 * init.max()
    npk = 0.5 * init.mean()
    accepted: list[int] = []
    rr_avg = None
    for c in cand:
        thr = npk + 0.25 * (spk - npk)
        if mwi[c] > thr:
            if rr_avg is not None and accepted and c - accepted[-1] > 1.66 * rr_avg:
                # search back for a missed beat at half threshold
                window = cand[(cand > accepted[-1] + gap) & (cand < c - gap)]
                window = window[mwi[window] > 0.5 * thr]
                if window.size:
                    best = int(window[np.argmax(mwi[window])])
                    accepted.append(best)
                    spk = 0.25 * mwi[best] + 0.75 * spk
            accepted.append(int(c))
            spk = 0.125 * mwi[c] + 0.875 * spk
            if len(accepted) >= 2:
                recent = np.diff(accepted[-9:])
                rr_avg = float(np.mean(recent))
        else:
            npk = 0.125 * mwi[c] + 0.875 * npk

    half = max(1, int(round(search_s * fs)))
    r_peaks = []
    for c in accepted:
        lo, hi = max(0, c - half), min(x.size, c + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if 0 < r < x.size - 1:  # a maximum on the boundary is a beat cut off by the window
            r_peaks.append(r)
    r_peaks = sorted(set(r_peaks))
    if not r_peaks:
        return []
    # two integrator peaks can land on one R; enforce the refractory period again
    return [int(i) for i in _refractory(np.asarray(r_peaks), x, gap)]


def detect_peaks(segment, modality: str | None = None) -> list[int]:
    modality = modality or getattr(segment, "modality", "ECG")
    return detect_peaks_ecg(segment) if modality.upper() == "ECG" else detect_peaks_ppg(segment)


def peak_only_encode(segment, peaks):
    """Zero everywhere except at ``peaks``, where the original value is kept."""
    x, _ = _samples(segment)
    idx = np.asarray(list(peaks), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise IndexError(f"peak index out of range for a segment of {x.size} samples")
    out = np.zeros_like(x)
    out[idx] = x[idx]
    if isinstance(segment, SignalSegment):
        return SignalSegment(out, segment.sampling_rate, segment.modality, segment.patient_id,
                             segment.segment_index, segment.quality_flag)
    return out


def rmssd(peaks, fs: float) -> float:
    """Root mean square of successive RR differences (seconds); nan with < 3 peaks."""
    p = np.asarray(peaks, dtype=np.float64)
    if p.size < 3:
        return float("nan")
    rr = np.diff(p) / fs
    return float(np.sqrt(np.mean(np.diff(rr) ** 2)))
