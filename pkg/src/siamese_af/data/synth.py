"""Synthetic time-synchronized ECG/PPG pairs with known beat times.

ECG beats are sums of Gaussian bumps (P, Q, R, S, T; no P wave in AF), PPG
beats are asymmetric systolic pulses with a small dicrotic wave, delayed by
the pulse transit time. RR intervals are jittered-regular for NSR and i.i.d.
uniform for AF. Every sample draws from its own stream seeded by
``(seed, patient_id, segment_index)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .signals import CANONICAL_RATE, CANONICAL_SECONDS, ECG, PPG, PairedSample, SignalSegment

NSR, AF = "NSR", "AF"

# (offset from R in s, amplitude, width in s)
_ECG_WAVES = {
    "P": (-0.16, 0.15, 0.025),
    "Q": (-0.025, -0.12, 0.010),
    "R": (0.0, 1.0, 0.012),
    "S": (0.025, -0.22, 0.010),
    "T": (0.25, 0.30, 0.050),
}


@dataclass(frozen=True)
class SynthPatientParams:
    rhythm: str = NSR
    base_rr: float = 0.8
    nsr_rr_jitter_sd: float = 0.03
    af_rr_low: float = 0.40
    af_rr_high: float = 1.20
    pulse_transit_time: float = 0.25
    noise_sd: float = 0.0
    baseline_wander_amplitude: float = 0.0
    label_flip_prob: float = 0.0
    seed: int = 0
    patient_id: str = "P0000"
    ecg_amplitude: float = 1.0
    ppg_amplitude: float = 1.0

    def __post_init__(self):
        if self.rhythm not in (NSR, AF):
            raise ValueError(f"rhythm must be NSR or AF, got {self.rhythm!r}")
        if not 0.3 <= self.base_rr <= 1.5:
            raise ValueError(f"base_rr {self.base_rr} outside [0.3, 1.5]")
        if not self.af_rr_low < self.af_rr_high:
            raise ValueError("af_rr_low must be below af_rr_high")
        if not 0.0 <= self.label_flip_prob <= 0.5:
            raise ValueError("label_flip_prob must lie in [0, 0.5]")
        if self.noise_sd < 0 or self.baseline_wander_amplitude < 0 or self.nsr_rr_jitter_sd < 0:
            raise ValueError("noise levels must be non-negative")
        if self.pulse_transit_time < 0:
            raise ValueError("pulse_transit_time must be non-negative")


def sample_rng(seed: int, patient_id: str, segment_index: int) -> np.random.Generator:
    key = zlib.crc32(str(patient_id).encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(segment_index)]))


def draw_rr(params: SynthPatientParams, rng: np.random.Generator, total_s: float) -> np.ndarray:
    """Beat (R) times in seconds covering ``[-1, total_s + 1]``."""
    times = [-rng.uniform(0.0, params.base_rr) - 0.5]
    while times[-1] < total_s + 1.0:
        if params.rhythm == AF:
            rr = rng.uniform(params.af_rr_low, params.af_rr_high)
        else:
            rr = params.base_rr + params.nsr_rr_jitter_sd * rng.standard_normal()
        times.append(times[-1] + max(rr, 0.25))
    return np.asarray(times)


def _bump(t, center, amp, width):
    return amp * np.exp(-0.5 * ((t - center) / width) ** 2)


def ecg_waveform(t: np.ndarray, beats: np.ndarray, rhythm: str, amplitude: float = 1.0) -> np.ndarray:
    x = np.zeros_like(t)
    for tb in beats:
        for name, (off, amp, width) in _ECG_WAVES.items():
            if name == "P" and rhythm == AF:
                continue
            x += _bump(t, tb + off, amp, width)
    return amplitude * x


def ppg_waveform(t: np.ndarray, beats: np.ndarray, ptt: float, amplitude: float = 1.0) -> np.ndarray:
    x = np.zeros_like(t)
    for tb in beats:
        c = tb + ptt
        rise = t < c
        width = np.where(rise, 0.07, 0.16)  # fast rise, slow decay
        x += np.exp(-0.5 * ((t - c) / width) ** 2)
        x += _bump(t, c + 0.28, 0.18, 0.05)  # dicrotic wave
    return amplitude * x


def synthesize_pair(params: SynthPatientParams, segment_index: int, fs: float = CANONICAL_RATE,
                    seconds: float = CANONICAL_SECONDS, with_truth: bool = False):
    """One labelled ECG/PPG pair; optionally also the ground truth dict.

    Truth contains beat times, RR intervals, R indices and PPG peak indices
    (beats falling strictly inside the segment).
    """
    rng = sample_rng(params.seed, params.patient_id, segment_index)
    n = int(round(seconds * fs))
    t = np.arange(n) / fs
    beats = draw_rr(params, rng, seconds)
    ecg = ecg_waveform(t, beats, params.rhythm, params.ecg_amplitude)
    ppg = ppg_waveform(t, beats, params.pulse_transit_time, params.ppg_amplitude)
    for x in (ecg, ppg):
        if params.baseline_wander_amplitude:
            f = rng.uniform(0.15, 0.35)
            x += params.baseline_wander_amplitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if params.noise_sd:
            x += params.noise_sd * rng.standard_normal(n)
    label = 1 if params.rhythm == AF else 0
    if params.label_flip_prob and rng.uniform() < params.label_flip_prob:
        label = 1 - label
    pid = params.patient_id
    sample = PairedSample(SignalSegment(ecg, fs, ECG, pid, segment_index),
                          SignalSegment(ppg, fs, PPG, pid, segment_index), label, pid)
    if not with_truth:
        return sample
    r_idx = np.round(beats * fs).astype(int)
    p_idx = np.round((beats + params.pulse_transit_time) * fs).astype(int)
    truth = {
        "beat_times": beats,
        "rr": np.diff(beats),
        "r_indices": r_idx[(r_idx >= 1) & (r_idx < n - 1)],
        "ppg_indices": p_idx[(p_idx >= 1) & (p_idx < n - 1)],
        "rhythm": params.rhythm,
    }
    return sample, truth


NOISE_LEVELS = {
    "clean": {"noise_sd": 0.0, "baseline_wander_amplitude": 0.0},
    "moderate": {"noise_sd": 0.08, "baseline_wander_amplitude": 0.15},
    "high": {"noise_sd": 0.2, "baseline_wander_amplitude": 0.3},
}


def patient_params(seed: int, patient_index: int, rhythm: str, noise: str = "moderate",
                   label_flip_prob: float = 0.0) -> SynthPatientParams:
    """Per-patient physiology drawn from a stream keyed by ``(seed, patient_index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED, int(patient_index)]))
    return SynthPatientParams(
        rhythm=rhythm,
        base_rr=float(rng.uniform(0.6, 1.0)),
        nsr_rr_jitter_sd=float(rng.uniform(0.01, 0.04)),
        pulse_transit_time=float(rng.uniform(0.2, 0.3)),
        ecg_amplitude=float(rng.uniform(0.7, 1.3)),
        ppg_amplitude=float(rng.uniform(0.7, 1.3)),
        label_flip_prob=label_flip_prob,
        seed=seed,
        patient_id=f"P{patient_index:04d}",
        **NOISE_LEVELS[noise],
    )


def synthesize_cohort(n_patients: int, segments_per_patient: int, af_fraction: float = 0.5,
                      seed: int = 0, noise: str = "moderate", label_flip_prob: float = 0.0
                      ) -> list[SynthPatientParams]:
    """Patient parameter sets; ``round(af_fraction * n_patients)`` of them are AF."""
    if n_patients < 1 or segments_per_patient < 1:
        raise ValueError("need at least one patient and one segment per patient")
    if not 0.0 <= af_fraction <= 1.0:
        raise ValueError("af_fraction must lie in [0, 1]")
    n_af = int(round(af_fraction * n_patients))
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAF])).permutation(n_patients)
    af_set = set(order[:n_af].tolist())
    return [patient_params(seed, i, AF if i in af_set else NSR, noise, label_flip_prob)
            for i in range(n_patients)]
