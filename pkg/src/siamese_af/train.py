"""Joint ECG/PPG training, the semi-supervised variant and the single-modality baseline.

Each step pushes the ECG and PPG halves of a batch through the shared
network as one concatenated batch, so batch-norm statistics are pooled over
both modalities.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import decode_checkpoint, load_state, model_state, require_resumable, save_checkpoint
from .data.dataset import PairedDataset, _atomic_write
from .eval import MetricError, auroc
from .loss import LossWeights, cross_entropy, joint_loss_terms
from .model import ForwardBundle, SiamAFModel, prepare_input
from .numerics import NonFiniteError, NumericsError, Tensor, backward, make_optimizer, no_grad, ops, recording

log = logging.getLogger(__name__)

COLLAPSE_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"name": "sgd_momentum", "lr": 0.1, "momentum": 0.9})
    weights: LossWeights = field(default_factory=LossWeights)
    agreement_stop_gradient: bool = True
    seed: int = 0
    semi_supervised: bool = False
    labeled_duplication: float = 0.25  # labelled share of each semi-supervised batch
    checkpoint_every: int = 0  # epochs; 0 keeps only final and best
    probe_size: int = 64
    validate: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.labeled_duplication < 1.0:
            raise ValueError("labeled_duplication must lie in (0, 1)")

    @classmethod
    def baseline(cls, **kw) -> "TrainConfig":
        """Defaults for the cross-entropy baselines: Adam with learning rate 1e-4."""
        kw.setdefault("optimizer", {"name": "adam", "lr": 1e-4})
        return cls(**kw)

    def flat(self) -> dict[str, object]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    out[f"{k}.{kk}"] = vv
            else:
                out[k] = v
        return out


HISTORY_FIELDS = ("epoch", "loss_agree", "loss_ce_ecg", "loss_ce_ppg", "loss_joint",
                  "val_auroc_ecg", "val_auroc_ppg", "val_auroc_mean", "collapse_std")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    best_state: dict | None = None
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()


# minibatches ------------------------------------------------------------------


def _labels_of(data) -> np.ndarray:
    labels = data.labels if hasattr(data, "labels") else data
    return np.asarray(labels)


def make_minibatches(data, batch_size: int, semi_supervised: bool = False, seed: int = 0, epoch: int = 0,
                     labeled_duplication: float = 0.25):
    """Index arrays for one epoch.

    Supervised: a seeded permutation cut into consecutive batches (the last
    one may be short). Semi-supervised: every batch holds
    ``max(1, round(labeled_duplication * batch_size))`` labelled samples,
    cycled from a shuffled labelled pool (so they repeat across batches),
    and is filled with unlabelled samples; the epoch ends when the unlabelled
    pool is used up.
    """
    labels = _labels_of(data)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([int(seed), int(epoch), 0xBA7C])
    if not semi_supervised:
        perm = rng.permutation(n)
        return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    labeled = np.nonzero(labels != 2)[0]
    unlabeled = np.nonzero(labels == 2)[0]
    if labeled.size == 0:
        raise ValueError("semi-supervised batches need at least one labelled sample")
    n_lab = min(batch_size, max(1, int(round(labeled_duplication * batch_size))))
    n_unl = batch_size - n_lab
    lab_order = rng.permutation(labeled)
    unl_order = rng.permutation(unlabeled)
    n_batches = max(1, math.ceil(unl_order.size / n_unl)) if n_unl else 1
    batches = []
    for b in range(n_batches):
        take = np.arange(b * n_lab, (b + 1) * n_lab) % lab_order.size
        batches.append(np.concatenate([lab_order[take], unl_order[b * n_unl : (b + 1) * n_unl]]))
    return batches


# helpers ------------------------------------------------------------------------


def _ce_labels(codes: np.ndarray) -> np.ndarray:
    y = codes.astype(np.int64)
    y[y == 2] = -1
    return y


def _split_bundle(out: ForwardBundle, start: int, stop: int) -> ForwardBundle:
    def cut(t):
        return None if t is None else ops.slice_rows(t, start, stop)

    return ForwardBundle(cut(out.feature), cut(out.projection), cut(out.prediction), cut(out.logits))


def _num(t) -> float:
    return float(t.data) if isinstance(t, Tensor) else float(t)


def _probe(train: PairedDataset, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0x9E0B])
    return np.sort(rng.choice(len(train), size=min(size, len(train)), replace=False))


def collapse_monitor(model: SiamAFModel, signals: np.ndarray) -> float:
    """Mean over coordinates of the across-sample std of L2-normalised projections."""
    was_training = model.training
    model.eval()
    with no_grad():
        z = model(prepare_input(signals)).projection.data.astype(np.float64)
    model.train(was_training)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(norms > 0, norms, 1.0)
    return float(z.std(axis=0).mean())


def _scores(model: SiamAFModel, signals: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(signals), batch_size):
            logits = model.forward(prepare_input(signals[i : i + batch_size]), with_heads=False).logits
            out.append(ops.softmax(logits.data.astype(np.float64))[:, 1])
    return np.concatenate(out)


def _val_auroc(model: SiamAFModel, val, modality: str) -> float:
    labels = np.asarray(val.labels)
    keep = np.nonzero(labels != 2)[0]
    if keep.size == 0:
        return float("nan")
    was_training = model.training
    model.eval()
    try:
        s = _scores(model, val.signals(modality)[keep])
        return auroc(s, labels[keep])
    except MetricError:
        return float("nan")
    finally:
        model.train(was_training)


def _nanmean(*v) -> float:
    v = [x for x in v if not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")


def _write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode())


def run_config_text(cfg: TrainConfig, extra: dict | None = None) -> str:
    items = {f"train.{k}": v for k, v in cfg.flat().items()}
    items.update(extra or {})
    return "".join(f"{k}={v}\n" for k, v in sorted(items.items()))


# joint training -------------------------------------------------------------------


def train_joint(splits, model: SiamAFModel, cfg: TrainConfig = TrainConfig(), unpaired=None,
                out_dir=None, resume_from=None):
    """Minimise the joint objective over ``splits['train']``.

    ``splits`` is a mapping with ``train`` and optionally ``val`` datasets
    (or a bare training dataset). ``unpaired`` may map ``"ecg"`` / ``"ppg"``
    to ``(signals, labels)`` of single-modality labelled data; these add the
    unpaired cross-entropy terms. Returns ``(model, history)``; the model is
    left in inference mode holding the final weights, and the best-epoch
    weights (by mean validation AUROC) are kept in ``history.best_state``.
    """
    if isinstance(splits, PairedDataset):
        splits = {"train": splits}
    train, val = splits["train"], splits.get("val")
    if model.components != ("encoder", "projector", "predictor", "classifier"):
        raise ValueError("joint training needs the projector and predictor; got an inference-only model")
    if cfg.semi_supervised and not (train.labels != 2).any():
        raise ValueError("semi-supervised training needs at least one labelled sample")
    out_dir = Path(out_dir) if out_dir is not None else None
    opt = make_optimizer(cfg.optimizer)
    params = model.parameters()
    history = TrainHistory()
    start_epoch = 1
    if resume_from is not None:
        require_resumable(resume_from)
        _, _, header, state = decode_checkpoint(Path(resume_from).read_bytes())
        load_state(model, state)
        start_epoch = int(header.get("epoch", 0)) + 1
        history.records = list(header.get("history", []))
        for key in ("best_epoch", "best_score"):
            if key in header:
                setattr(history, key, header[key])
    probe = _probe(train, cfg.probe_size, cfg.seed)
    probe_signals = np.concatenate([train.ecg[probe], train.ppg[probe]])
    ce_all = _ce_labels(train.labels)
    unp = _prepare_unpaired(unpaired)
    if out_dir is not None:
        _write_text(out_dir / "run_config.txt", run_config_text(cfg, {"model.digest": model.digest}))

    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs + 1):
        model.train()
        sums = {"agree": 0.0, "ce_ecg": 0.0, "ce_ppg": 0.0, "joint": 0.0}
        batches = make_minibatches(train.labels, cfg.batch_size, cfg.semi_supervised, cfg.seed, epoch,
                                   cfg.labeled_duplication)
        for b, idx in enumerate(batches):
            extra = [(name, sig[take], lab[take]) for name, (sig, lab) in unp.items()
                     for take in [np.arange(b * len(idx), (b + 1) * len(idx)) % len(lab)]]
            vals = _joint_step(model, params, opt, train.ecg[idx], train.ppg[idx], ce_all[idx], extra, cfg,
                               epoch, b)
            for k in sums:
                sums[k] += vals[k]
        nb = len(batches)
        rec = {"epoch": epoch, "loss_agree": sums["agree"] / nb, "loss_ce_ecg": sums["ce_ecg"] / nb,
               "loss_ce_ppg": sums["ce_ppg"] / nb, "loss_joint": sums["joint"] / nb}
        v_e = _val_auroc(model, val, "ECG") if (val is not None and cfg.validate) else float("nan")
        v_p = _val_auroc(model, val, "PPG") if (val is not None and cfg.validate) else float("nan")
        rec.update(val_auroc_ecg=v_e, val_auroc_ppg=v_p, val_auroc_mean=_nanmean(v_e, v_p),
                   collapse_std=collapse_monitor(model, probe_signals))
        history.records.append(rec)
        score = rec["val_auroc_mean"]
        if history.best_state is None or (not math.isnan(score) and score > history.best_score):
            history.best_epoch, history.best_score = epoch, (score if not math.isnan(score) else -math.inf)
            history.best_state = model_state(model)
            if out_dir is not None:
                _save(model, out_dir / "best.ckpt", epoch, history)
        log.info("epoch %d joint %.4f agree %.4f val %.4f collapse %.4g", epoch, rec["loss_joint"],
                 rec["loss_agree"], score, rec["collapse_std"])
        if out_dir is not None:
            _write_text(out_dir / "history.csv", history.to_csv())
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                _save(model, out_dir / f"epoch_{epoch:03d}.ckpt", epoch, history)
    history.seconds = time.perf_counter() - t0
    if out_dir is not None:
        _save(model, out_dir / "final.ckpt", cfg.epochs, history)
    model.eval()
    return model, history


def _save(model, path, epoch, history):
    meta = {"epoch": epoch, "history": history.records, "best_epoch": history.best_epoch,
            "best_score": history.best_score if math.isfinite(history.best_score) else None}
    save_checkpoint(model, path, meta=meta)


def _prepare_unpaired(unpaired) -> dict:
    out = {}
    for name in ("ecg", "ppg"):
        item = (unpaired or {}).get(name)
        if item is None:
            continue
        sig, lab = item
        lab = _ce_labels(np.asarray(lab))
        if len(lab) == 0:
            continue
        if (lab < 0).any():
            raise ValueError(f"unpaired {name} samples must all be labelled")
        out[name] = (np.asarray(sig), lab)
    return out


def _joint_step(model, params, opt, ecg, ppg, labels, extra, cfg: TrainConfig, epoch: int, batch: int):
    n = len(labels)
    parts = [ecg, ppg] + [sig for _, sig, _ in extra]
    x = prepare_input(np.concatenate(parts))
    try:
        with recording() as tape:
            out = model(x)
            be, bp = _split_bundle(out, 0, n), _split_bundle(out, n, 2 * n)
            total, terms = joint_loss_terms(be, bp, labels, cfg.weights, cfg.agreement_stop_gradient)
            pos = 2 * n
            if extra:
                pieces, coeffs = [total], [1.0]
                for name, sig, lab in extra:
                    logits = ops.slice_rows(out.logits, pos, pos + len(lab))
                    pos += len(lab)
                    term = cross_entropy(logits, lab)
                    terms[f"unpaired_{name}"] = term
                    pieces.append(term)
                    coeffs.append(cfg.weights.lam_unpaired)
                total = ops.scale_add(pieces, coeffs)
        vals = {k: _num(v) for k, v in terms.items()}
        vals["joint"] = _num(total)
        bad = [k for k, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise TrainingDiverged(f"non-finite loss term(s) {bad} at epoch {epoch}, batch {batch}: {vals}")
        backward(total, tape)
        opt.step(params)
    except (NonFiniteError, NumericsError) as exc:
        raise TrainingDiverged(f"epoch {epoch}, batch {batch}: {exc}") from exc
    return vals


# single-modality baseline ------------------------------------------------------------


def train_baseline_single_modality(train, modality: str, model: SiamAFModel, cfg: TrainConfig | None = None,
                                   val=None):
    """Cross-entropy training of encoder + classifier on one modality's labelled samples.

    Only ``train.signals(modality)`` and the labels are read; the other
    modality is never touched. Returns ``(model, history)`` with the model in
    inference mode.
    """
    cfg = TrainConfig.baseline() if cfg is None else cfg
    modality = modality.upper()
    labels = np.asarray(train.labels)
    keep = np.nonzero(labels != 2)[0]
    if keep.size == 0:
        raise ValueError("baseline training needs labelled samples")
    signals = train.signals(modality)
    X, y = signals[keep], _ce_labels(labels[keep])
    opt = make_optimizer(cfg.optimizer)
    params = model.parameters_of("encoder", "classifier")
    history = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        batches = make_minibatches(y, cfg.batch_size, False, cfg.seed, epoch)
        total = 0.0
        for b, idx in enumerate(batches):
            try:
                with recording() as tape:
                    out = model.forward(prepare_input(X[idx]), with_heads=False)
                    loss = cross_entropy(out.logits, y[idx])
                v = _num(loss)
                if not math.isfinite(v):
                    raise TrainingDiverged(f"non-finite ce_{modality.lower()} at epoch {epoch}, batch {b}")
                backward(loss, tape)
                opt.step(params)
            except (NonFiniteError, NumericsError) as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += v
        v_auc = _val_auroc(model, val, modality) if val is not None and cfg.validate else float("nan")
        rec = {"epoch": epoch, "loss_agree": float("nan"), "loss_ce_ecg": float("nan"),
               "loss_ce_ppg": float("nan"), "loss_joint": total / len(batches),
               "val_auroc_ecg": v_auc if modality == "ECG" else float("nan"),
               "val_auroc_ppg": v_auc if modality == "PPG" else float("nan"),
               "val_auroc_mean": v_auc, "collapse_std": float("nan")}
        rec[f"loss_ce_{modality.lower()}"] = total / len(batches)
        history.records.append(rec)
        if history.best_state is None or (not math.isnan(v_auc) and v_auc > history.best_score):
            history.best_epoch = epoch
            history.best_score = v_auc if not math.isnan(v_auc) else -math.inf
            history.best_state = model_state(model)
    history.seconds = time.perf_counter() - t0
    model.eval()
    return model, history


def restore_best(model: SiamAFModel, history: TrainHistory) -> SiamAFModel:
    if history.best_state is None:
        raise ValueError("history holds no best state")
    return load_state(model, history.best_state, strict=False)
