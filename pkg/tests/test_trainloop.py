import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_batch, tiny_model
from guidedrep.autodiff import NesterovSGD
from guidedrep.evalkit import ScoredSet, roc_auc
from guidedrep.guidance import Batch, LossWeighter, ModelConfig, MultiTaskModel, backward_all, main_head
from guidedrep.seeding import substream
from guidedrep.trainloop import TrainConfig, class_weights, early_stop_check, evaluate_losses, train


def test_early_stop_examples():
    assert early_stop_check([1.0, 0.9, 0.8], 5) == (False, 3)
    assert early_stop_check([1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99], 5) == (True, 2)
    const = [0.5] * 6
    assert early_stop_check(const[:5], 5) == (False, 1)
    assert early_stop_check(const, 5) == (True, 1)
    with pytest.raises(ValueError):
        early_stop_check([], 5)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 6))
def test_early_stop_best_is_first_minimum(losses, patience):
    stop, best = early_stop_check(losses, patience)
    assert best == int(np.argmin(losses)) + 1
    assert stop == (len(losses) - best >= patience)


def test_config_contracts():
    for bad in ({"patience": 0}, {"batch_size": 0}, {"max_epochs": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_class_weights_from_prevalence():
    assert class_weights(np.array([1, 0, 0, 0, np.nan])) == (0.75, 0.25)


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    x += 0.3 * np.sign(x[:, :1] + 0.5 * x[:, 1:]) * np.array([1.0, 0.5])
    return Batch(x, y)


def _dense_model(seed=0, **kw):
    cfg = ModelConfig((2,), dense_widths=(8,), dropout=0.0, l2=0.0, **kw)
    return MultiTaskModel(cfg, [main_head()], seed=seed)


def test_separable_toy_reaches_auc_one():
    data = _toy(200, 0)
    model = _dense_model()
    weighter = LossWeighter.for_model(model, "vanilla")
    train(model, weighter, data, data, TrainConfig(lr=0.05, max_epochs=50, patience=50, weighting="vanilla"))
    assert roc_auc(ScoredSet(model.predict(data.inputs), data.labels)) == 1.0


def test_patience_never_fires_when_improving():
    data = _toy(64, 1)
    model = _dense_model()
    w = LossWeighter.for_model(model, "vanilla")
    hist = train(model, w, data, data, TrainConfig(lr=0.01, momentum=0.0, max_epochs=8, batch_size=64,
                                                   weighting="vanilla"))
    assert all(b < a for a, b in zip(hist.val_totals, hist.val_totals[1:]))
    assert hist.stopped_epoch == 8 and len(hist.records) == 8


def _train_tiny(seed, dropout=0.5, epochs=3):
    model = tiny_model(dropout=dropout, seed=seed)
    w = LossWeighter.for_model(model, "uncertainty")
    hist = train(model, w, tiny_batch(12, seed=1), tiny_batch(6, seed=2),
                 TrainConfig(lr=0.05, max_epochs=epochs, batch_size=4, seed=seed))
    return model, w, hist


def test_same_seed_bit_identical():
    a, wa, ha = _train_tiny(3)
    b, wb, hb = _train_tiny(3)
    for p, q in zip(a.params(), b.params()):
        assert p.values.tobytes() == q.values.tobytes()
    assert wa.log_vars.values.tobytes() == wb.log_vars.values.tobytes()
    assert ha.val_totals == hb.val_totals
    c, _, _ = _train_tiny(4)
    assert any(not np.array_equal(p.values, q.values) for p, q in zip(a.params(), c.params()))


def test_restores_best_validation_parameters():
    model = tiny_model(seed=5)
    w = LossWeighter.for_model(model, "uncertainty")
    val = tiny_batch(6, seed=2)
    hist = train(model, w, tiny_batch(12, seed=1), val, TrainConfig(lr=0.3, max_epochs=12, patience=2, batch_size=3))
    total, _ = evaluate_losses(model, w, val)
    assert total == pytest.approx(min(hist.val_totals), rel=1e-12)
    assert hist.val_totals[hist.best_epoch - 1] == min(hist.val_totals)
    assert hist.stopped_epoch <= 12


def test_k0_uncertainty_matches_tracked_vanilla():
    data = _toy(40, 2)
    mu, lr = 0.9, 0.05
    mu_model, va_model = _dense_model(seed=1), _dense_model(seed=1)
    uw = LossWeighter.for_model(mu_model, "uncertainty")
    opt_u = NesterovSGD(mu_model.params() + uw.params(), lr, mu)
    opt_v = NesterovSGD(va_model.params(), lr, mu)
    for step in range(10):
        batch = data.subset(substream(0, "shuffle", step).permutation(40)[:8])
        # The look-ahead moves s too, so the tracked weight is taken at s + mu*v.
        s_look = uw.log_vars.values[0] + mu * opt_u.velocity[-1][0]
        vw = LossWeighter.for_model(va_model, "vanilla", lambdas={"main": float(np.exp(-s_look) / 2)})
        for model, weighter, opt in ((mu_model, uw, opt_u), (va_model, vw, opt_v)):
            opt.lookahead()
            opt.zero_grad()
            backward_all(model, batch, weighter)
            opt.step()
        for p, q in zip(mu_model.params(), va_model.params()):
            np.testing.assert_allclose(p.values, q.values, rtol=1e-12, atol=1e-14)
    assert uw.log_vars.values[0] != 0.0


def test_shuffle_is_pure_function_of_seed_and_epoch():
    a = substream(7, "shuffle", 3).permutation(50)
    assert np.array_equal(a, substream(7, "shuffle", 3).permutation(50))
    assert not np.array_equal(a, substream(7, "shuffle", 4).permutation(50))
    # Drawing from other streams does not disturb it.
    substream(7, "dropout", 3).random(100)
    assert np.array_equal(a, substream(7, "shuffle", 3).permutation(50))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_location():
    model = tiny_model()
    w = LossWeighter.for_model(model)
    bad = tiny_batch(8)
    bad.targets["count"][:] = np.inf
    with pytest.raises(FloatingPointError, match="epoch 1"):
        train(model, w, bad, bad, TrainConfig(lr=0.01, max_epochs=2, batch_size=4))


def test_missing_targets_rows_still_train():
    model = tiny_model()
    w = LossWeighter.for_model(model)
    data = tiny_batch(8)
    data.targets["count"][::2] = np.nan
    hist = train(model, w, data, data, TrainConfig(lr=0.01, max_epochs=2, batch_size=4))
    assert all(np.isfinite(r.val_total) for r in hist.records)


def test_history_csv(tmp_path):
    _, w, hist = _train_tiny(0, epochs=2)
    path = tmp_path / "history.csv"
    hist.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "val_total", *(f"{k}_{t}" for k in ("train", "val", "s") for t in w.tasks)}
    assert float(rows[1]["val_total"]) == hist.val_totals[1]
