"""Ranking metrics, patient-level bootstrap, paired significance tests and reports.

Scores are AF probabilities; labels are 0 (non-AF) and 1 (AF).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data.dataset import UNLABELED, PairedDataset, _atomic_write
from .numerics import no_grad, ops

VERSION = "0.1.0"


class MetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    patient_ids: np.ndarray
    segment_index: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.patient_ids = np.asarray(self.patient_ids, dtype=str)
        self.segment_index = np.asarray(self.segment_index, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.scores)
        if not (len(self.patient_ids) == len(self.segment_index) == len(self.labels) == n):
            raise ValueError("ScoredSet columns differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("ScoredSet labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.scores)

    def sorted(self) -> "ScoredSet":
        order = np.lexsort((self.segment_index, self.patient_ids))
        return ScoredSet(self.patient_ids[order], self.segment_index[order], self.scores[order],
                         self.labels[order])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "segment_index", "score", "label"])
        for pid, k, s, y in zip(self.patient_ids, self.segment_index, self.scores, self.labels):
            w.writerow([pid, int(k), repr(float(s)), int(y)])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        _atomic_write(path, self.to_csv().encode())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "ScoredSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([r["patient_id"] for r in rows], [int(r["segment_index"]) for r in rows],
                   [float(r["score"]) for r in rows], [int(r["label"]) for r in rows])

    @classmethod
    def load(cls, path) -> "ScoredSet":
        return cls.from_csv(Path(path).read_text())


def _arrays(s, labels=None):
    if isinstance(s, ScoredSet):
        return s.scores, s.labels
    scores = np.asarray(s, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    return scores, labels.astype(np.int64)


def auroc(s, labels=None) -> float:
    """Mann-Whitney AUROC: (ordered pos/neg pairs + half the ties) / (P * N)."""
    scores, y = _arrays(s, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = stats.rankdata(scores)  # midranks for ties
    # the rank sum is a multiple of 1/2, so the numerator is exact
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(s, labels=None) -> float:
    """Average precision with tied scores sharing one threshold."""
    scores, y = _arrays(s, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s_sorted, y_sorted = scores[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]  # end of each tie group
    tp = np.cumsum(y_sorted == 1)[last]
    fp = (last + 1) - tp
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp * (tp / (tp + fp))) / n_pos)


METRICS = {"auroc": auroc, "auprc": auprc}


# bootstrap -------------------------------------------------------------------


@dataclass
class BootstrapResult:
    metric: str
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    samples: np.ndarray
    redraws: int = 0
    percentile_ci: tuple[float, float] | None = None

    @property
    def n_boot(self) -> int:
        return len(self.samples)


def _patient_groups(patient_ids: np.ndarray):
    patients, inverse = np.unique(patient_ids, return_inverse=True)
    return patients, [np.nonzero(inverse == i)[0] for i in range(len(patients))]


def bootstrap_by_patient(s: ScoredSet, metric: str = "auroc", n_boot: int = 1000, seed: int = 0,
                         percentile: bool = False, max_attempts: int = 100) -> BootstrapResult:
    """Resample patients with replacement and recompute ``metric`` per replicate.

    Replicate ``r`` draws from its own stream ``(seed, r)``. Replicates whose
    pooled labels are single-class are redrawn (up to ``max_attempts`` times);
    the number of redraws is reported. The interval is
    ``mean +/- 1.96 * sd / sqrt(n_boot)`` with ``sd`` the population standard
    deviation of the replicate values. ``percentile=True`` additionally
    reports the 2.5/97.5 percentile interval (not part of the reference
    protocol).
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    fn = METRICS[metric]
    patients, groups = _patient_groups(s.patient_ids)
    P = len(patients)
    if P < 2:
        raise MetricError("bootstrap by patient needs at least two patients")
    values = np.empty(n_boot)
    redraws = 0
    for r in range(n_boot):
        rng = np.random.default_rng([int(seed), r])
        for _ in range(max_attempts):
            pick = rng.integers(0, P, size=P)
            idx = np.concatenate([groups[i] for i in pick])
            y = s.labels[idx]
            if y.min() != y.max():
                break
            redraws += 1
        else:
            raise MetricError(f"replicate {r}: {max_attempts} draws were all single-class")
        values[r] = fn(s.scores[idx], y)
    mu = float(values.mean())
    sd = float(values.std())
    half = 1.96 * sd / math.sqrt(n_boot)
    pct = tuple(float(v) for v in np.percentile(values, [2.5, 97.5])) if percentile else None
    return BootstrapResult(metric, mu, sd, mu - half, mu + half, values, redraws, pct)


# paired tests ----------------------------------------------------------------


def _midrank(x: np.ndarray) -> np.ndarray:
    return stats.rankdata(x)


def delong_statistics(scores_a, scores_b, labels) -> dict[str, float]:
    """Fast DeLong structural components for two correlated AUROCs."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels)
    if not (a.shape == b.shape == y.shape) or a.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    pos = y == 1
    m, n = int(pos.sum()), int((~pos).sum())
    if m == 0 or n == 0:
        raise MetricError("DeLong test needs both classes")
    aucs, v10, v01 = [], [], []
    for s in (a, b):
        x, z = s[pos], s[~pos]
        tx, tz, t = _midrank(x), _midrank(z), _midrank(np.r_[x, z])
        aucs.append((t[:m].sum() - m * (m + 1) / 2.0) / (m * n))
        v10.append((t[:m] - tx) / n)
        v01.append(1.0 - (t[m:] - tz) / m)
    s10 = np.cov(np.vstack(v10)) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack(v01)) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = float(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1])
    diff = float(aucs[0] - aucs[1])
    z = diff / math.sqrt(var) if var > 0 else 0.0
    return {"auc_a": float(aucs[0]), "auc_b": float(aucs[1]), "var": var, "z": z}


def delong_test(scores_a, scores_b, labels) -> float:
    """Two-sided p-value for equal AUROCs of two scorings of the same samples."""
    z = delong_statistics(scores_a, scores_b, labels)["z"]
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def paired_t_test(samples_a, samples_b) -> float:
    """Two-sided paired t-test; zero-variance differences give p=1 (zero mean) or p=0."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise MetricError("paired_t_test needs two equal-length vectors of length >= 2")
    d = a - b
    if np.all(d == d[0]):
        return 1.0 if d[0] == 0 else 0.0
    n = d.size
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t), n - 1))


def bonferroni(p_values, alpha: float = 0.05) -> list[bool]:
    p = np.asarray(p_values, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("bonferroni needs at least one p-value")
    return [bool(v < alpha / p.size) for v in p]


# model scoring and reports ---------------------------------------------------


def score_signals(model, signals: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """AF probability from the encoder and classifier only."""
    from .model import prepare_input

    if model.training:
        raise RuntimeError("scoring requires an inference-mode model; call model.eval()")
    out = []
    with no_grad():
        for i in range(0, len(signals), batch_size):
            logits = model.forward(prepare_input(signals[i : i + batch_size]), with_heads=False).logits
            out.append(ops.softmax(logits.data.astype(np.float64))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def scored_set(model, dataset: PairedDataset, modality: str, batch_size: int = 256) -> ScoredSet:
    keep = dataset.labels != UNLABELED
    d = dataset.subset(np.nonzero(keep)[0])
    scores = score_signals(model, d.signals(modality), batch_size)
    return ScoredSet(d.patient_ids, d.segment_index, scores, d.labels)


@dataclass
class ModalityMetrics:
    auroc: float
    auprc: float
    auroc_boot: BootstrapResult
    auprc_boot: BootstrapResult


@dataclass
class Comparison:
    name: str
    modality: str
    p_auroc: float
    p_auprc: float
    significant_auroc: bool = False
    significant_auprc: bool = False


@dataclass
class EvalReport:
    modalities: dict[str, ModalityMetrics] = field(default_factory=dict)
    comparisons: list[Comparison] = field(default_factory=list)
    config_digest: str = ""
    version: str = VERSION
    n_boot: int = 1000
    seed: int = 0

    def apply_bonferroni(self, alpha: float = 0.05) -> None:
        ps = [c.p_auroc for c in self.comparisons] + [c.p_auprc for c in self.comparisons]
        if not ps:
            return
        flags = bonferroni(ps, alpha)
        k = len(self.comparisons)
        for i, c in enumerate(self.comparisons):
            c.significant_auroc, c.significant_auprc = flags[i], flags[k + i]

    def to_text(self) -> str:
        lines = [f"version={self.version}", f"config_digest={self.config_digest}",
                 f"n_boot={self.n_boot}", f"seed={self.seed}"]
        for mod, m in self.modalities.items():
            for name in ("auroc", "auprc"):
                boot = getattr(m, f"{name}_boot")
                lines += [f"{mod}.{name}={getattr(m, name)!r}", f"{mod}.{name}_boot_mean={boot.mean!r}",
                          f"{mod}.{name}_boot_sd={boot.sd!r}", f"{mod}.{name}_ci_low={boot.ci_low!r}",
                          f"{mod}.{name}_ci_high={boot.ci_high!r}", f"{mod}.{name}_redraws={boot.redraws}"]
        for c in self.comparisons:
            key = f"compare.{c.name}.{c.modality}"
            lines += [f"{key}.p_auroc={c.p_auroc!r}", f"{key}.p_auprc={c.p_auprc!r}",
                      f"{key}.significant_auroc={c.significant_auroc}",
                      f"{key}.significant_auprc={c.significant_auprc}"]
        return "\n".join(lines) + "\n"

    def bootstrap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["modality", "metric", "replicate", "value"])
        for mod, m in self.modalities.items():
            for name in ("auroc", "auprc"):
                for r, v in enumerate(getattr(m, f"{name}_boot").samples):
                    w.writerow([mod, name, r, repr(float(v))])
        return buf.getvalue()

    def save(self, directory, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        txt, boot = directory / f"{stem}.txt", directory / f"{stem}_bootstrap.csv"
        _atomic_write(txt, self.to_text().encode())
        _atomic_write(boot, self.bootstrap_csv().encode())
        return txt, boot


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def modality_metrics(s: ScoredSet, n_boot: int = 1000, seed: int = 0) -> ModalityMetrics:
    s = s.sorted()
    return ModalityMetrics(auroc(s), auprc(s), bootstrap_by_patient(s, "auroc", n_boot, seed),
                           bootstrap_by_patient(s, "auprc", n_boot, seed))


def compare_scored(name: str, modality: str, ours: ScoredSet, other: ScoredSet, n_boot: int = 1000,
                   seed: int = 0) -> Comparison:
    """DeLong on AUROC and a paired t-test on patient-bootstrap AUPRC samples."""
    a, b = ours.sorted(), other.sorted()
    if not (np.array_equal(a.patient_ids, b.patient_ids) and np.array_equal(a.segment_index, b.segment_index)
            and np.array_equal(a.labels, b.labels)):
        raise MetricError("compared scored sets must cover the same labelled segments")
    p_auroc = delong_test(a.scores, b.scores, a.labels)
    # same seed and same patients -> identical resampling in both bootstraps
    pa = bootstrap_by_patient(a, "auprc", n_boot, seed).samples
    pb = bootstrap_by_patient(b, "auprc", n_boot, seed).samples
    return Comparison(name, modality, p_auroc, paired_t_test(pa, pb) if n_boot >= 2 else 1.0)


def report_from_scored(scored: dict[str, ScoredSet], n_boot: int = 1000, seed: int = 0,
                       config_digest: str = "", baselines: dict[str, dict[str, ScoredSet]] | None = None,
                       alpha: float = 0.05) -> EvalReport:
    """Assemble a report from persisted or in-memory scored sets.

    ``baselines`` maps a comparison name to per-modality scored sets of the
    competing model.
    """
    rep = EvalReport(config_digest=config_digest, n_boot=n_boot, seed=seed)
    for mod, s in scored.items():
        rep.modalities[mod] = modality_metrics(s, n_boot, seed)
    for name, per_mod in (baselines or {}).items():
        for mod, other in per_mod.items():
            if mod in scored:
                rep.comparisons.append(compare_scored(name, mod, scored[mod], other, n_boot, seed))
    rep.apply_bonferroni(alpha)
    return rep


def evaluate_model(model, dataset: PairedDataset, modality: str, n_boot: int = 1000, seed: int = 0,
                   batch_size: int = 256) -> tuple[ScoredSet, EvalReport]:
    """Score ``dataset`` with f and h and attach bootstrap CIs for ``modality``."""
    s = scored_set(model, dataset, modality, batch_size)
    return s, report_from_scored({modality.lower(): s}, n_boot, seed, model.digest)
