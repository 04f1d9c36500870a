"""AUROC/AUPRC, patient bootstrap CIs, DeLong and paired t-tests, Bonferroni.

Run: python demos/04_evaluation_statistics.py
"""
import numpy as np

from siamese_af.eval import (
    ScoredSet,
    auprc,
    auroc,
    bonferroni,
    bootstrap_by_patient,
    delong_test,
    paired_t_test,
    report_from_scored,
)

rng = np.random.default_rng(0)

# %% two scorers of the same 30 patients x 8 segments
pids = np.repeat([f"p{i:02d}" for i in range(30)], 8)
labels = np.repeat(rng.integers(0, 2, 30), 8)
strong = ScoredSet(pids, np.tile(range(8), 30), labels + rng.normal(0, 0.7, pids.size), labels)
weak = ScoredSet(pids, np.tile(range(8), 30), labels + rng.normal(0, 1.5, pids.size), labels)
print(f"AUROC {auroc(strong):.3f} vs {auroc(weak):.3f}; AUPRC {auprc(strong):.3f} vs {auprc(weak):.3f}")

# %% bootstrap by patient: CI = mean +/- 1.96 sd / sqrt(n_boot)
b = bootstrap_by_patient(strong, "auroc", n_boot=1000, seed=0, percentile=True)
print(f"bootstrap mean {b.mean:.4f} sd {b.sd:.4f} CI [{b.ci_low:.4f}, {b.ci_high:.4f}] "
      f"(percentile CI {b.percentile_ci[0]:.3f}-{b.percentile_ci[1]:.3f}, redraws {b.redraws})")

# %% paired tests
print("DeLong p:", delong_test(strong.scores, weak.scores, labels))
pa = bootstrap_by_patient(strong, "auprc", 500, seed=1).samples
pb = bootstrap_by_patient(weak, "auprc", 500, seed=1).samples
print("paired t-test on bootstrap AUPRC p:", paired_t_test(pa, pb))

# %% three comparisons at alpha 0.05 -> threshold 0.0167
print(bonferroni([0.001, 0.02, 0.012]))

# %% full key-value report
print(report_from_scored({"ppg": strong}, n_boot=200, seed=0, baselines={"weak": {"ppg": weak}}).to_text())
