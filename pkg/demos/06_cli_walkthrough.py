"""The siamaf command line, driven from Python (same as typing the commands in a shell).

Run: python demos/06_cli_walkthrough.py
"""
import tempfile
from pathlib import Path

from siamese_af.cli import run_cli

root = Path(tempfile.mkdtemp(prefix="siamaf_demo_"))
steps = [
    ["--out", str(root), "generate", "--patients", "30", "--segments-per-patient", "3", "--seed", "1"],
    ["--out", str(root), "train", "--data", str(root / "dataset"), "--mode", "joint", "--epochs", "2",
     "--batch-size", "16"],
    ["--out", str(root), "train", "--data", str(root / "dataset"), "--mode", "baseline", "--modality", "ppg",
     "--epochs", "2", "--batch-size", "16"],
    ["--out", str(root), "eval", "--checkpoint", str(root / "train_joint" / "inference.ckpt"),
     "--data", str(root / "dataset"), "--n-boot", "100",
     "--compare", str(root / "train_baseline" / "final.ckpt"), "--modality", "ppg"],
    ["--out", str(root), "embed", "--checkpoint", str(root / "train_joint" / "final.ckpt"),
     "--data", str(root / "dataset"), "--peak-only", "both", "--max-samples", "4"],
    ["--out", str(root), "peaks", "--data", str(root / "dataset"), "--max-samples", "4"],
    ["ckpt", "info", str(root / "train_joint" / "final.ckpt")],
]
for argv in steps:
    print("$ siamaf", " ".join(argv))
    assert run_cli(argv) == 0
print((root / "eval" / "report.txt").read_text())
print("artifacts under", root)
