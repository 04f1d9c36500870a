"""Array-backed paired datasets, patient-level splits, label masking and file I/O.

Label codes: 0 non-AF, 1 AF, 2 unlabeled.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signals import CANONICAL_LENGTH, CANONICAL_RATE, ECG, PPG, PairedSample, SignalSegment
from .synth import synthesize_cohort, synthesize_pair

NON_AF, AF, UNLABELED = 0, 1, 2
SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class PairedDataset:
    ecg: np.ndarray  # [N, L] float32
    ppg: np.ndarray  # [N, L] float32
    labels: np.ndarray  # [N] int8 label codes
    patient_ids: np.ndarray  # [N] str
    segment_index: np.ndarray  # [N] int64
    sampling_rate: float = CANONICAL_RATE

    def __post_init__(self):
        self.ecg = np.asarray(self.ecg, dtype=np.float32)
        self.ppg = np.asarray(self.ppg, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.patient_ids = np.asarray(self.patient_ids, dtype=str)
        self.segment_index = np.asarray(self.segment_index, dtype=np.int64)
        n = len(self.labels)
        if self.ecg.shape != self.ppg.shape or self.ecg.shape[0] != n:
            raise ValueError("ECG, PPG and label arrays disagree in size")
        if len(self.patient_ids) != n or len(self.segment_index) != n:
            raise ValueError("metadata arrays disagree in size")
        if not np.isin(self.labels, (NON_AF, AF, UNLABELED)).all():
            raise ValueError("label codes must be 0, 1 or 2")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def length(self) -> int:
        return self.ecg.shape[1]

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(self.ecg[idx], self.ppg[idx], self.labels[idx], self.patient_ids[idx],
                             self.segment_index[idx], self.sampling_rate)

    def signals(self, modality: str) -> np.ndarray:
        m = modality.upper()
        if m == ECG:
            return self.ecg
        if m == PPG:
            return self.ppg
        raise ValueError(f"unknown modality {modality!r}")

    def ce_labels(self) -> np.ndarray:
        """Cross-entropy targets: 0/1, and -1 for unlabeled."""
        y = self.labels.astype(np.int64)
        y[y == UNLABELED] = -1
        return y

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def samples(self):
        for i in range(len(self)):
            pid = str(self.patient_ids[i])
            k = int(self.segment_index[i])
            yield PairedSample(SignalSegment(self.ecg[i], self.sampling_rate, ECG, pid, k),
                               SignalSegment(self.ppg[i], self.sampling_rate, PPG, pid, k),
                               int(self.labels[i]), pid)

    @classmethod
    def from_samples(cls, samples) -> "PairedDataset":
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        rate = samples[0].ecg.sampling_rate
        return cls(np.stack([s.ecg.samples for s in samples]), np.stack([s.ppg.samples for s in samples]),
                   [s.label for s in samples], [s.patient_id for s in samples],
                   [s.ecg.segment_index for s in samples], rate)

    @classmethod
    def concat(cls, parts) -> "PairedDataset":
        parts = list(parts)
        return cls(np.concatenate([p.ecg for p in parts]), np.concatenate([p.ppg for p in parts]),
                   np.concatenate([p.labels for p in parts]), np.concatenate([p.patient_ids for p in parts]),
                   np.concatenate([p.segment_index for p in parts]), parts[0].sampling_rate)


def synthesize_dataset(n_patients: int, segments_per_patient: int, af_fraction: float = 0.5,
                       seed: int = 0, noise: str = "moderate", label_flip_prob: float = 0.0) -> PairedDataset:
    cohort = synthesize_cohort(n_patients, segments_per_patient, af_fraction, seed, noise, label_flip_prob)
    samples = (synthesize_pair(p, k) for p in cohort for k in range(segments_per_patient))
    return PairedDataset.from_samples(samples)


def split_by_patient(data: PairedDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Assign whole patients to train/val/test by a seeded shuffle of patient ids.

    Patient counts per split are ``floor(f * P)`` with the remainder handed
    out by largest fractional part (ties to the earlier split).
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or (fractions < 0).any() or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    patients = np.unique(data.patient_ids)
    P = len(patients)
    if P < int((fractions > 0).sum()):
        raise ValueError(f"{P} patients cannot fill {int((fractions > 0).sum())} non-empty splits")
    raw = fractions * P
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: P - counts.sum()]:
        counts[i] += 1
    # every non-zero fraction gets at least one patient
    for i in np.nonzero((fractions > 0) & (counts == 0))[0]:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] += 1
    shuffled = patients[np.random.default_rng(seed).permutation(P)]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        members = set(shuffled[a:b].tolist())
        out.append(data.subset(np.nonzero([p in members for p in data.patient_ids])[0]))
    return tuple(out)


def mask_labels(data: PairedDataset, keep_fraction: float, seed: int = 0) -> PairedDataset:
    """Relabel all but ``round(keep_fraction * N)`` samples as unlabeled.

    The kept subset is a seeded uniform draw, stratified so that each class
    present keeps at least one sample when the budget allows.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = len(data)
    k = int(round(keep_fraction * n))
    if k < 1:
        raise ValueError(f"keep_fraction={keep_fraction} leaves no labeled sample out of {n}")
    if k >= n:
        return data.subset(np.arange(n))
    rng = np.random.default_rng(seed)
    candidates = np.nonzero(data.labels != UNLABELED)[0]
    if k > candidates.size:
        raise ValueError("not enough labeled samples to keep")
    chosen: list[int] = []
    for cls in np.unique(data.labels[candidates]):
        if len(chosen) >= k:
            break
        members = candidates[data.labels[candidates] == cls]
        chosen.append(int(rng.choice(members)))
    rest = np.setdiff1d(candidates, chosen)
    chosen.extend(rng.choice(rest, size=k - len(chosen), replace=False).tolist())
    labels = np.full(n, UNLABELED, dtype=np.int8)
    labels[chosen] = data.labels[chosen]
    out = data.subset(np.arange(n))
    out.labels = labels
    return out


# on-disk format ------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_records(data: PairedDataset) -> bytes:
    """Records of ``<H pid_len><pid><I segment_index><B label><L f4 ECG><L f4 PPG>``, little-endian."""
    chunks = []
    ecg = data.ecg.astype("<f4")
    ppg = data.ppg.astype("<f4")
    for i in range(len(data)):
        pid = str(data.patient_ids[i]).encode()
        chunks.append(struct.pack("<H", len(pid)) + pid)
        chunks.append(struct.pack("<IB", int(data.segment_index[i]), int(data.labels[i])))
        chunks.append(ecg[i].tobytes())
        chunks.append(ppg[i].tobytes())
    return b"".join(chunks)


def decode_records(payload: bytes, length: int, rate: float = CANONICAL_RATE) -> PairedDataset:
    ecg, ppg, labels, pids, segs = [], [], [], [], []
    pos, nbytes = 0, 4 * length
    while pos < len(payload):
        try:
            (plen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            pids.append(payload[pos : pos + plen].decode())
            pos += plen
            seg, lab = struct.unpack_from("<IB", payload, pos)
            pos += 5
            if pos + 2 * nbytes > len(payload):
                raise struct.error("truncated waveform")
            ecg.append(np.frombuffer(payload, "<f4", length, pos))
            pos += nbytes
            ppg.append(np.frombuffer(payload, "<f4", length, pos))
            pos += nbytes
        except struct.error as exc:
            raise ValueError(f"corrupt record file at byte {pos}: {exc}") from None
        segs.append(seg)
        labels.append(lab)
    if not labels:
        empty = np.zeros((0, length), np.float32)
        return PairedDataset(empty, empty.copy(), [], [], [], rate)
    return PairedDataset(np.stack(ecg), np.stack(ppg), labels, pids, segs, rate)


def save_dataset(directory, splits: dict[str, PairedDataset], meta: dict | None = None) -> Path:
    """Write ``manifest`` plus one ``<split>.rec`` file per split."""
    directory = Path(directory)
    lengths = {d.length for d in splits.values() if len(d)}
    if len(lengths) > 1:
        raise ValueError("splits have different segment lengths")
    length = lengths.pop() if lengths else CANONICAL_LENGTH
    rate = next(iter(splits.values())).sampling_rate
    lines = [f"schema_version={SCHEMA_VERSION}", f"sampling_rate={rate:g}", f"segment_length={length}"]
    for name, d in splits.items():
        _atomic_write(directory / f"{name}.rec", encode_records(d))
        lines.append(f"count.{name}={len(d)}")
    lines.append(f"count.total={sum(len(d) for d in splits.values())}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={v}")
    _atomic_write(directory / "manifest", ("\n".join(lines) + "\n").encode())
    return directory


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / "manifest"
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {directory}")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_dataset(directory) -> dict[str, PairedDataset]:
    manifest = read_manifest(directory)
    if int(manifest.get("schema_version", -1)) != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
    length = int(manifest["segment_length"])
    rate = float(manifest["sampling_rate"])
    out = {}
    for key, count in manifest.items():
        if not key.startswith("count.") or key == "count.total":
            continue
        name = key[len("count."):]
        d = decode_records((Path(directory) / f"{name}.rec").read_bytes(), length, rate)
        if len(d) != int(count):
            raise ValueError(f"{name}: manifest says {count} records, file has {len(d)}")
        out[name] = d
    return out
