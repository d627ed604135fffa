import numpy as np
import pytest

from dismax.data import Dataset, synth_blobs, synth_ood
from dismax.errors import ConfigError, DataError
from dismax.evaluation import auroc
from dismax.model import Checkpoint
from dismax.pipeline import (SGD, TrainConfig, calibrate, evaluate, infer, init_model, learning_rate, report,
                             train, validation_split)
from dismax.numerics import Tensor


def blob_config(**kw):
    base = dict(loss="dismax", layer_dims=[4, 16, 8], num_classes=3, epochs=10, lr_decay_epochs=[5, 8],
                batch_size=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 4, 100, 1.0, seed=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge").validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss="dismax-fpr", batch_size=63).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"preset": "huge"})
    paper = TrainConfig.from_dict({"preset": "paper"})
    assert paper.epochs == 300 and paper.lr_decay_epochs == [150, 200, 250]
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.1, lr_decay_epochs=[2, 4])
    assert [learning_rate(cfg, e) for e in range(6)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_sgd_nesterov_matches_reference_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01, nesterov=True)
    x, buf = p.data.copy(), np.zeros(2)
    for step in range(3):
        grad = np.array([0.5, 0.25]) * (step + 1)
        p.grad = grad.copy()
        opt.step()
        g = grad + 0.01 * x
        buf = g if step == 0 else 0.9 * buf + g
        x = x - 0.1 * (g + 0.9 * buf)
        np.testing.assert_allclose(p.data, x, rtol=1e-15)


def test_zero_epochs_equals_initialization(blobs):
    cfg = blob_config(epochs=0)
    assert train(cfg, blobs).dumps() == init_model(cfg).dumps()


def test_data_mismatch_fails_before_training(blobs):
    with pytest.raises(ConfigError):
        train(blob_config(num_classes=2), blobs)
    with pytest.raises(ConfigError):
        train(blob_config(layer_dims=[5, 8]), blobs)
    with pytest.raises(ConfigError):
        train(blob_config(loss="dismax-fpr"), blobs)


def test_separable_blobs_train_to_high_accuracy(blobs):
    ckpt = train(blob_config(epochs=50, lr_decay_epochs=[25, 40]), blobs)
    assert ckpt.metadata["history"][-1]["acc"] >= 0.99


def test_training_is_deterministic(blobs):
    assert train(blob_config(), blobs).dumps() == train(blob_config(), blobs).dumps()


def test_fpr_training_runs_on_images():
    rng = np.random.default_rng(0)
    x = rng.random((80, 16))
    labels = np.arange(80) % 2
    x[labels == 1, :8] += 1.0
    ds = Dataset(x, labels, "tiny", image_shape=(4, 4))
    cfg = TrainConfig(loss="dismax-fpr", layer_dims=[16, 8, 4], num_classes=2, epochs=3,
                      lr_decay_epochs=[], batch_size=10, lr=0.01)
    ckpt = train(cfg, ds)
    assert len(ckpt.metadata["history"]) == 3
    # rows counted towards ACC are the CE rows: half of each batch plus leftovers
    assert all(np.isfinite(h["loss"]) for h in ckpt.metadata["history"])


def test_calibrate_is_idempotent_and_keeps_accuracy(blobs):
    ckpt = train(blob_config(), blobs)
    val = validation_split(ckpt, blobs)
    once = calibrate(ckpt, val)
    twice = calibrate(once, val)
    assert once.calibration.T_star == twice.calibration.T_star
    assert once.calibration.ece_after <= once.calibration.ece_before
    a = infer(ckpt, blobs.x)[0].argmax(1)
    b = infer(once, blobs.x)[0].argmax(1)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DataError):
        calibrate(ckpt, blobs.subset([]))


def test_evaluate_requires_calibration_for_ece(blobs):
    ckpt = train(blob_config(epochs=1), blobs)
    with pytest.raises(ConfigError, match="calibrate"):
        evaluate(ckpt, blobs, {"o": blobs.unlabeled()})
    reports, dump = evaluate(ckpt, blobs, {"o": blobs.unlabeled()}, with_ece=False)
    assert reports["mps"].ece is None


def test_evaluate_dump_and_exchangeability(blobs):
    ckpt = calibrate(train(blob_config(), blobs), validation_split(train(blob_config(), blobs), blobs))
    test = synth_blobs(3, 4, 100, 1.0, seed=0)
    far = synth_ood(4, 150, 100.0, seed=1, reference=blobs)
    reports, dump = evaluate(ckpt, test, {"same": test.unlabeled(), "far": far})
    assert len(dump) == len(test) + len(test) + len(far)
    for kind, r in reports.items():
        assert r.ood["same"]["auroc"] == pytest.approx(0.5)
        assert r.ece is not None
    rows = report([("a", dump, ["mps", "mds"])])
    assert [r.score_kind for r in rows] == ["mps", "mds"]


def test_ood_not_counted_in_accuracy(blobs):
    ckpt = train(blob_config(), blobs)
    reports, dump = evaluate(ckpt, blobs, {"far": synth_ood(4, 50, 100.0, 1, reference=blobs)}, with_ece=False)
    id_mask = dump.mask("ID")
    assert reports["mps"].acc == np.mean(dump.pred_class[id_mask] == dump.true_class[id_mask])
    assert reports["mps"].id_count == len(blobs)


def test_checkpoint_survives_save(tmp_path, blobs):
    ckpt = train(blob_config(epochs=2), blobs)
    ckpt.save(tmp_path / "c.json")
    back = Checkpoint.load(tmp_path / "c.json")
    np.testing.assert_array_equal(infer(back, blobs.x)[0], infer(ckpt, blobs.x)[0])
