"""Synthetic ECG/PPG pairs, peak detection, RMSSD and peak-only encoding.

Run: python demos/02_synthetic_signals_and_peaks.py
"""
import numpy as np

from siamese_af.data import (
    SignalSegment,
    detect_peaks_ecg,
    detect_peaks_ppg,
    peak_only_encode,
    resample,
    rmssd,
    slice_segments,
    synthesize_pair,
)
from siamese_af.data.synth import AF, NSR, patient_params

# %% one NSR and one AF patient, clean signals with ground truth
for rhythm in (NSR, AF):
    p = patient_params(seed=0, patient_index=3, rhythm=rhythm, noise="clean")
    pair, truth = synthesize_pair(p, segment_index=0, with_truth=True)
    r = detect_peaks_ecg(pair.ecg)
    q = detect_peaks_ppg(pair.ppg)
    print(f"{rhythm}: {len(r)} R peaks (truth {truth['r_indices'].size}), {len(q)} PPG peaks, "
          f"PTT {p.pulse_transit_time:.3f}s -> shift {round(p.pulse_transit_time * 80)} samples")
    print("   first R peaks  ", r[:5])
    print("   first PPG peaks", q[:5])
    print(f"   RMSSD from ECG peaks {rmssd(r, 80):.4f}s, from PPG peaks {rmssd(q, 80):.4f}s")

# %% peak-only encoding keeps the sample value at each peak and zeros elsewhere
enc = peak_only_encode(pair.ppg, q)
print("peak-only nonzeros:", np.count_nonzero(enc.samples), "of", len(enc))

# %% moderate noise: detectors still track the beats
noisy = synthesize_pair(patient_params(0, 3, AF, "moderate"), 0)
print("moderate noise, detected R/PPG:", len(detect_peaks_ecg(noisy.ecg)), len(detect_peaks_ppg(noisy.ppg)))

# %% a 90 s record at 240 Hz -> three canonical 30 s segments of 2400 samples
t = np.arange(90 * 240) / 240
segs = [resample(s) for s in slice_segments(np.sin(2 * np.pi * 1.2 * t), 240, patient_id="rec1")]
print([(s.segment_index, len(s), s.sampling_rate) for s in segs])
flat = SignalSegment(np.zeros(2400), 80, "PPG")
print("flat segment peaks:", detect_peaks_ppg(flat), "quality flag:", flat.quality_flag)
