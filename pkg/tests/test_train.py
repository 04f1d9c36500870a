import math

import numpy as np
import pytest

from siamese_af.data import mask_labels, synthesize_dataset
from siamese_af.loss import LossWeights, joint_loss_terms
from siamese_af.model import EncoderConfig, build_model, prepare_input
from siamese_af.numerics import backward, recording
from siamese_af.train import (
    COLLAPSE_FLOOR,
    HISTORY_FIELDS,
    TrainConfig,
    TrainingDiverged,
    _split_bundle,
    make_minibatches,
    train_baseline_single_modality,
    train_joint,
)

DESK = EncoderConfig(depth_preset="resnet10_1d")
TINY = EncoderConfig(depth_preset="resnet10_1d", stage_channels=(8, 8, 16, 16))


@pytest.fixture(scope="module")
def data200():
    return synthesize_dataset(8, 25, seed=0, noise="moderate")


@pytest.fixture(scope="module")
def data8():
    d = synthesize_dataset(4, 2, seed=1, noise="clean")
    assert sorted(d.labels.tolist()) == [0, 0, 0, 0, 1, 1, 1, 1]
    return d


# minibatches ------------------------------------------------------------


def test_supervised_batch_sizes():
    batches = make_minibatches(np.zeros(100, int), 32, seed=0, epoch=1)
    assert [len(b) for b in batches] == [32, 32, 32, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))


def test_semi_single_labeled_in_every_batch():
    labels = np.full(200, 2)
    labels[17] = 1
    batches = make_minibatches(labels, 32, semi_supervised=True, seed=0, epoch=1)
    assert all(17 in b for b in batches)
    assert all(np.sum(labels[b] != 2) >= 8 for b in batches)
    unl = np.concatenate([b[labels[b] == 2] for b in batches])
    assert sorted(unl.tolist()) == sorted(set(range(200)) - {17})


def test_semi_labeled_share():
    labels = np.full(300, 2)
    labels[:6] = [0, 1, 0, 1, 0, 1]
    for b in make_minibatches(labels, 64, semi_supervised=True, seed=3, epoch=2):
        assert np.sum(labels[b] != 2) == 16


def test_minibatches_deterministic_per_epoch():
    labels = np.zeros(50, int)
    a = make_minibatches(labels, 8, seed=4, epoch=2)
    b = make_minibatches(labels, 8, seed=4, epoch=2)
    c = make_minibatches(labels, 8, seed=4, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_minibatch_errors():
    with pytest.raises(ValueError):
        make_minibatches(np.zeros(0, int), 4)
    with pytest.raises(ValueError):
        make_minibatches(np.full(10, 2), 4, semi_supervised=True)


def test_config_validation():
    for kw in ({"epochs": 0}, {"batch_size": 1}, {"labeled_duplication": 1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    assert TrainConfig.baseline().optimizer == {"name": "adam", "lr": 1e-4}


# loss-term properties on a real forward pass ----------------------------------------


def _step_grads(model, data, labels, lam):
    model.train()
    n = len(labels)
    x = prepare_input(np.concatenate([data.ecg[:n], data.ppg[:n]]))
    with recording() as tape:
        out = model(x)
        total, terms = joint_loss_terms(_split_bundle(out, 0, n), _split_bundle(out, n, 2 * n),
                                        np.asarray(labels), LossWeights(lam), True)
    backward(total, tape)
    grads = {c: sum(0.0 if p.grad is None else float(np.abs(p.grad).sum()) for p in model.parameters_of(c))
             for c in ("encoder", "projector", "predictor", "classifier")}
    for p in model.parameters():
        p.grad = None
    return grads, {k: float(v.data) for k, v in terms.items()}


def test_lambda_zero_gives_no_gradient_to_classifier(data8):
    g, _ = _step_grads(build_model(TINY, seed=0), data8, [0, 1, 0, 1], lam=0.0)
    assert g["classifier"] == 0.0
    assert g["encoder"] > 0 and g["predictor"] > 0


def test_unlabeled_contribute_only_agreement(data8):
    g, terms = _step_grads(build_model(TINY, seed=0), data8, [-1, -1, -1, -1], lam=1.0)
    assert terms["ce_ecg"] == 0.0 and terms["ce_ppg"] == 0.0
    assert terms["agree"] != 0.0
    assert g["classifier"] == 0.0 and g["encoder"] > 0


def test_lambda_zero_training_leaves_classifier_unchanged(data8):
    m = build_model(TINY, seed=0)
    before = [p.data.copy() for p in m.parameters_of("classifier")]
    enc_before = [p.data.copy() for p in m.parameters_of("encoder")]
    train_joint(data8, m, TrainConfig(epochs=2, batch_size=4, weights=LossWeights(0.0), validate=False))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters_of("classifier")))
    assert not all(np.array_equal(a, p.data) for a, p in zip(enc_before, m.parameters_of("encoder")))


# training behaviour ------------------------------------------------------------


def test_joint_overfits_eight_pairs(data8):
    m = build_model(DESK, seed=0)
    _, hist = train_joint(data8, m, TrainConfig(epochs=200, batch_size=8, validate=False, probe_size=8))
    last = hist.records[-1]
    assert last["loss_ce_ecg"] < 0.05 and last["loss_ce_ppg"] < 0.05
    assert len(hist.records) == 200
    assert set(hist.records[0]) == set(HISTORY_FIELDS)


def test_baseline_overfits_eight_samples(data8):
    m = build_model(DESK, seed=0)
    cfg = TrainConfig.baseline(epochs=200, batch_size=8, optimizer={"name": "adam", "lr": 1e-3})
    _, hist = train_baseline_single_modality(data8, "ppg", m, cfg)
    assert hist.records[-1]["loss_ce_ppg"] < 0.05


def test_collapse_monitor_above_floor_without_ce(data200):
    m = build_model(DESK, seed=0)
    _, hist = train_joint(data200, m, TrainConfig(epochs=5, weights=LossWeights(0.0), validate=False))
    std = hist.column("collapse_std")
    assert std.size == 5
    assert np.all(std > COLLAPSE_FLOOR)


class PpgSpy:
    """Duck-typed dataset that fails loudly if PPG data is requested."""

    def __init__(self, data):
        self._data = data
        self.labels = data.labels
        self.touched = []

    def signals(self, modality):
        self.touched.append(modality.upper())
        if modality.upper() == "PPG":
            raise AssertionError("PPG read during ECG baseline training")
        return self._data.ecg

    @property
    def ppg(self):
        raise AssertionError("PPG array accessed")


def test_baseline_never_reads_other_modality(data8):
    spy = PpgSpy(data8)
    m = build_model(TINY, seed=0)
    train_baseline_single_modality(spy, "ecg", m, TrainConfig.baseline(epochs=2, batch_size=4), val=PpgSpy(data8))
    assert spy.touched == ["ECG"]


def params_bytes(model):
    return [p.data.tobytes() for p in model.parameters()]


def test_joint_deterministic(data8):
    cfg = TrainConfig(epochs=3, batch_size=4, validate=False)
    a, ha = train_joint(data8, build_model(TINY, seed=3), cfg)
    b, hb = train_joint(data8, build_model(TINY, seed=3), cfg)
    assert params_bytes(a) == params_bytes(b)
    assert ha.to_csv() == hb.to_csv()


def test_baseline_deterministic(data8):
    cfg = TrainConfig.baseline(epochs=3, batch_size=4)
    a, _ = train_baseline_single_modality(data8, "ecg", build_model(TINY, seed=3), cfg)
    b, _ = train_baseline_single_modality(data8, "ecg", build_model(TINY, seed=3), cfg)
    assert params_bytes(a) == params_bytes(b)


def test_non_finite_aborts_with_diagnostics(data8):
    m = build_model(TINY, seed=0)
    m.predictor.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match=r"epoch 1, batch 0"):
        train_joint(data8, m, TrainConfig(epochs=1, batch_size=4, validate=False))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_diverges_cleanly(data8):
    m = build_model(TINY, seed=0)
    cfg = TrainConfig(epochs=20, batch_size=4, validate=False, optimizer={"name": "sgd_momentum", "lr": 1e12,
                                                                           "momentum": 0.9})
    with pytest.raises(TrainingDiverged, match="batch"):
        train_joint(data8, m, cfg)


def test_semi_supervised_and_outputs(tmp_path, data200):
    d = mask_labels(data200, 0.05, seed=0)
    m = build_model(TINY, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=32, semi_supervised=True, checkpoint_every=1)
    _, hist = train_joint({"train": d, "val": data200}, m, cfg, out_dir=tmp_path)
    for name in ("run_config.txt", "history.csv", "best.ckpt", "final.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"):
        assert (tmp_path / name).exists(), name
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == ",".join(HISTORY_FIELDS)
    assert "semi_supervised=True" in (tmp_path / "run_config.txt").read_text()
    assert hist.best_epoch in (1, 2) and not math.isnan(hist.best_score)


def test_resume_matches_uninterrupted(tmp_path, data8):
    cfg = TrainConfig(epochs=4, batch_size=4, validate=False, checkpoint_every=2)
    full, _ = train_joint(data8, build_model(TINY, seed=1), cfg, out_dir=tmp_path / "a")
    resumed, hist = train_joint(data8, build_model(TINY, seed=99), cfg, out_dir=tmp_path / "b",
                                resume_from=tmp_path / "a" / "epoch_002.ckpt")
    assert params_bytes(full) == params_bytes(resumed)
    assert [r["epoch"] for r in hist.records] == [1, 2, 3, 4]


def test_resume_from_inference_only_refused(tmp_path, data8):
    from siamese_af.checkpoint import CheckpointError, save_checkpoint

    path = save_checkpoint(build_model(TINY, seed=0), tmp_path / "inf.ckpt", inference_only=True)
    with pytest.raises(CheckpointError):
        train_joint(data8, build_model(TINY, seed=0), TrainConfig(epochs=1), resume_from=path)


def test_joint_loss_decreases_by_epoch_five(data200):
    # reduced-scale version of the 10-seed monotonicity check
    small = data200.subset(np.arange(0, 200, 2))
    wins = 0
    for seed in range(10):
        _, hist = train_joint(small, build_model(DESK, seed=seed),
                              TrainConfig(epochs=5, seed=seed, batch_size=32, validate=False))
        j = hist.column("loss_joint")
        wins += j[4] < j[0]
    assert wins >= 9
