"""Per-stage features of full versus peak-only signals, and ECG/PPG agreement of z.

Uses a checkpoint from demo 03 when present, otherwise a freshly initialised model.
Run: python demos/05_latent_exploration.py [checkpoint]
"""
import sys
from pathlib import Path

import numpy as np

from siamese_af.checkpoint import load_checkpoint
from siamese_af.data import detect_peaks, peak_only_encode, synthesize_dataset
from siamese_af.model import EncoderConfig, build_model, embed, stage_activations

path = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs/joint/final.ckpt")
model = load_checkpoint(path) if path.exists() else build_model(EncoderConfig("resnet10_1d"), seed=0).eval()
print("model from", path if path.exists() else "random init")

data = synthesize_dataset(6, 4, seed=5, noise="moderate")
ppg = data.ppg
ppg_peak = np.stack([peak_only_encode(x, detect_peaks(x.astype(float), "PPG")) for x in ppg])


def cos_rows(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return (a * b).sum(axis=1)


# %% stage by stage: channel means over time, full vs peak-only
full, peak = stage_activations(model, ppg), stage_activations(model, ppg_peak)
for k, (a, b) in enumerate(zip(full, peak)):
    fa = a.mean(axis=2) if a.ndim == 3 else a
    fb = b.mean(axis=2) if b.ndim == 3 else b
    print(f"stage {k + 1}: shape {a.shape}, mean cos(full, peak-only) {cos_rows(fa, fb).mean():.3f}")

# %% projections of paired vs mismatched ECG/PPG
if model.projector is not None:
    ze, zp = embed(model, data.ecg)["projection"], embed(model, data.ppg)["projection"]
    perm = np.roll(np.arange(len(zp)), 1)
    print(f"cos(z_ecg, z_ppg) paired {cos_rows(ze, zp).mean():.3f}, mismatched {cos_rows(ze, zp[perm]).mean():.3f}")
