import numpy as np
import pytest

from cadtrans.backbone import ConfigError
from cadtrans.params import ADM_PREFIXES, CLASSIFIER_PREFIXES, FEATURE_PREFIXES
from cadtrans.pipeline import (SGD, AdaptConfig, accuracy_from_predictions, adapt_target, evaluate,
                               train_source)
from cadtrans.synthdata import Dataset, DomainSpec, generate


@pytest.fixture(scope="module")
def small():
    src, tgt = generate(DomainSpec(samples_per_class=16))
    model, hist = train_source(src, AdaptConfig(source_epochs=4))
    return src, tgt, model, hist


@pytest.fixture(scope="module")
def full_source():
    src, tgt = generate(DomainSpec())
    model, hist = train_source(src, AdaptConfig())
    return src, tgt, model, hist


@pytest.mark.slow
def test_source_loss_decreases(full_source):
    hist = full_source[3]
    assert hist[4]["ce"] < hist[0]["ce"]


@pytest.mark.slow
def test_source_accuracy(full_source):
    src, _, model, _ = full_source
    assert evaluate(model, src)["accuracy"] >= 0.95


def test_distillation_does_not_touch_backbone():
    src, _ = generate(DomainSpec(samples_per_class=6))
    with_kd, _ = train_source(src, AdaptConfig(source_epochs=2, distill_weight=1.0))
    plain, _ = train_source(src, AdaptConfig(source_epochs=2, distill_weight=0.0))
    for name in with_kd.names(FEATURE_PREFIXES + CLASSIFIER_PREFIXES):
        assert np.array_equal(with_kd[name].data, plain[name].data), name
    assert not all(np.array_equal(with_kd[n].data, plain[n].data) for n in with_kd.names(ADM_PREFIXES))


def test_empty_source_rejected():
    with pytest.raises(ValueError):
        train_source(Dataset(images=np.zeros((0, 1, 16, 16), np.float32), labels=np.zeros(0, np.int32)),
                     AdaptConfig())


def test_frozen_parameters_bitwise_unchanged(small):
    _, tgt, model, _ = small
    before = model.snapshot(CLASSIFIER_PREFIXES + ADM_PREFIXES)
    res = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=2))
    after = res.model.snapshot(CLASSIFIER_PREFIXES + ADM_PREFIXES)
    assert before.keys() == after.keys()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes(), k
    assert all(r["frozen_grad_norm"] == 0.0 for r in res.metrics)
    # the backbone did move
    assert any(not np.array_equal(model[n].data, res.model[n].data) for n in model.names(FEATURE_PREFIXES))


def test_input_model_not_mutated(small):
    _, tgt, model, _ = small
    before = model.snapshot()
    adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=1))
    for k, v in model.snapshot().items():
        assert np.array_equal(v, before[k])


def test_zero_weights_is_im_baseline(small):
    _, tgt, model, _ = small
    a = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=2, alpha=0, beta=0))
    # different pseudo-label settings cannot matter when both label-driven terms are off
    b = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=2, alpha=0, beta=0, knn_k=1,
                                                               refine_rounds=0))
    for r in a.metrics:
        assert r["L_total"] == r["L_im"]
    for k, v in a.model.snapshot().items():
        assert np.array_equal(v, b.model.snapshot()[k])


def test_adaptation_deterministic(small):
    _, tgt, model, _ = small
    truth = tgt.sidecar["labels"]
    a = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=2), truth=truth)
    b = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=2), truth=truth)
    assert a.metrics == b.metrics


def test_metrics_columns(small):
    _, tgt, model, _ = small
    res = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=1), truth=tgt.sidecar["labels"])
    row = res.metrics[0]
    for key in ("L_im", "L_cst", "L_cmk", "L_total", "easy_count", "hard_count", "pl_acc_easy", "pl_acc_all",
                "target_acc"):
        assert key in row
    assert row["easy_count"] + row["hard_count"] == len(tgt)


def test_no_truth_gives_nan_accuracy(small):
    _, tgt, model, _ = small
    row = adapt_target(model, tgt.without_sidecar(), AdaptConfig(target_epochs=1)).metrics[0]
    assert np.isnan(row["target_acc"])


def test_evaluate_recount(small):
    _, tgt, model, _ = small
    res = evaluate(model, tgt)
    truth = tgt.sidecar["labels"]
    assert res["accuracy"] == accuracy_from_predictions(res["predictions"], truth)
    assert res["accuracy"] == int(np.sum(res["predictions"] == truth)) / len(truth)
    assert len(res["per_class"]) == 4


def test_perfect_and_chance_accuracy():
    truth = np.random.default_rng(0).integers(0, 4, 2000)
    assert accuracy_from_predictions(truth, truth) == 1.0
    acc = accuracy_from_predictions(np.random.default_rng(1).integers(0, 4, 2000), truth)
    sd = np.sqrt(0.25 * 0.75 / 2000)
    assert abs(acc - 0.25) < 3 * sd


def test_sgd_momentum_and_decay():
    from cadtrans.params import ModelState
    from cadtrans.tensor import Tensor
    m = ModelState()
    m.add("w", np.array([1.0]))
    opt = SGD(m, lr=0.1, momentum=0.9, weight_decay=0.5)
    for _ in range(2):
        m["w"].grad = Tensor(np.array([2.0]))
        opt.step()
    # g1 = 2 + 0.5 = 2.5 -> w = 0.75; g2 = 2 + 0.375 = 2.375, buf = 2.25 + 2.375
    assert m["w"].data[0] == pytest.approx(0.75 - 0.1 * (0.9 * 2.5 + 2.375))


@pytest.mark.parametrize("kwargs", [dict(lr=-1), dict(batch_size=1), dict(precision="float16"),
                                    dict(centroid_momentum=1.5), dict(knn_k=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AdaptConfig(**kwargs)
