"""Agreement, joint and unpaired-extension objectives.

All losses are mean-reduced over the minibatch. Labels use ``-1`` for
"unlabeled"; such rows drop out of the cross-entropy terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, Tensor, ops

AF, NON_AF, UNLABELED = 1, 0, -1


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0  # classification weight
    lam_unpaired: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.lam_unpaired < 0:
            raise ValueError("loss weights must be non-negative")


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.atleast_2d(np.asarray(v, dtype=np.float64)))


def agreement_loss(q_zE, zP, q_zP, zE, stop_gradient: bool = True) -> Tensor:
    """``-cos(q(z_ecg), z_ppg) - cos(q(z_ppg), z_ecg)``, averaged over rows.

    With ``stop_gradient`` the projection targets ``zP`` and ``zE`` are
    treated as constants. Zero-norm rows raise instead of being smoothed,
    since that is how a collapsed representation shows up.
    """
    q_zE, zP, q_zP, zE = (_as_tensor(v) for v in (q_zE, zP, q_zP, zE))
    if stop_gradient:
        zP, zE = ops.stop_gradient(zP), ops.stop_gradient(zE)
    try:
        c1 = ops.cosine_similarity(q_zE, zP)
        c2 = ops.cosine_similarity(q_zP, zE)
    except NumericsError as exc:
        raise NumericsError(f"agreement loss: {exc}") from None
    return ops.scale_add([ops.mean(c1), ops.mean(c2)], [-1.0, -1.0])


def _labels(label, n: int) -> np.ndarray:
    y = np.asarray(label, dtype=np.int64).reshape(-1)
    if y.size == 1 and n > 1:
        y = np.full(n, int(y[0]))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got {y.shape}")
    if not np.isin(y, (NON_AF, AF, UNLABELED)).all():
        raise ValueError(f"labels must be 0 (non-AF), 1 (AF) or -1 (unlabeled); got {np.unique(y)}")
    return y


def cross_entropy(logits: Tensor, label) -> Tensor:
    logits = _as_tensor(logits)
    return ops.softmax_cross_entropy(logits, _labels(label, logits.shape[0]))


def joint_loss_terms(bundle_ecg, bundle_ppg, label, w: LossWeights = LossWeights(),
                     stop_gradient: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
    """Joint loss together with its named terms ``agree``, ``ce_ppg`` and ``ce_ecg``."""
    terms = {
        "agree": agreement_loss(bundle_ecg.prediction, bundle_ppg.projection,
                                bundle_ppg.prediction, bundle_ecg.projection, stop_gradient),
        "ce_ppg": cross_entropy(bundle_ppg.logits, label),
        "ce_ecg": cross_entropy(bundle_ecg.logits, label),
    }
    total = ops.scale_add(list(terms.values()), [1.0, w.lam, w.lam])
    return total, terms


def joint_loss(bundle_ecg, bundle_ppg, label, w: LossWeights = LossWeights(),
               stop_gradient: bool = True) -> Tensor:
    """Agreement loss plus ``lam`` times the summed ECG and PPG cross-entropy."""
    return joint_loss_terms(bundle_ecg, bundle_ppg, label, w, stop_gradient)[0]


def joint_loss_with_unpaired(bundle_ecg, bundle_ppg, label, unpaired_ecg=None, unpaired_ppg=None,
                             w: LossWeights = LossWeights(), stop_gradient: bool = True) -> Tensor:
    """Joint loss plus ``lam_unpaired`` times CE over unpaired PPG and unpaired ECG.

    ``unpaired_ecg`` / ``unpaired_ppg`` are ``(logits, labels)`` pairs or None;
    each CE is averaged within its own list.
    """
    terms = [joint_loss(bundle_ecg, bundle_ppg, label, w, stop_gradient)]
    coeffs = [1.0]
    for extra in (unpaired_ppg, unpaired_ecg):
        if extra is None:
            continue
        logits, labels = extra
        logits = getattr(logits, "logits", logits)
        if _as_tensor(logits).shape[0] == 0:
            continue
        terms.append(cross_entropy(logits, labels))
        coeffs.append(w.lam_unpaired)
    return terms[0] if len(terms) == 1 else ops.scale_add(terms, coeffs)
