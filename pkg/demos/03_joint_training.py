"""Joint ECG/PPG training on a small synthetic cohort, then single-modality inference.

A few minutes on one CPU core. Run: python demos/03_joint_training.py [out_dir]
"""
import logging
import sys
from pathlib import Path

import numpy as np

from siamese_af.checkpoint import load_checkpoint, save_checkpoint
from siamese_af.data import split_by_patient, synthesize_dataset
from siamese_af.eval import auroc, scored_set
from siamese_af.model import EncoderConfig, build_model, count_parameters
from siamese_af.train import TrainConfig, train_joint

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs/joint")

# %% data: 20 patients x 12 segments, patient-level split
data = synthesize_dataset(20, 12, af_fraction=0.5, seed=0, noise="moderate")
train, val, test = split_by_patient(data, (0.6, 0.2, 0.2), seed=0)
print(len(train), len(val), len(test), "pairs")

# %% desk-scale encoder; f, g, q and h are shared by both modalities
model = build_model(EncoderConfig("resnet10_1d"), seed=0)
print("parameters:", count_parameters(model))

cfg = TrainConfig(epochs=4, batch_size=32, seed=0)
model, history = train_joint({"train": train, "val": val}, model, cfg, out_dir=out)
print(history.to_csv())

# %% inference keeps f and h only; either modality alone
save_checkpoint(model, out / "inference.ckpt", inference_only=True)
f_h = load_checkpoint(out / "inference.ckpt")
print("components:", f_h.components)
for modality in ("ECG", "PPG"):
    s = scored_set(f_h, test, modality)
    print(f"test AUROC from {modality} alone: {auroc(s):.3f}")
print("collapse monitor per epoch:", np.round(history.column("collapse_std"), 4))
