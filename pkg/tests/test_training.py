import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import REL_TOL, gradcheck, leaf, synth_examples
from marmot.model import ModelConfig, forward, init_params, parameter_group
from marmot.tensor import Tensor
from marmot.training import (
    AdamConfig,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    adam_step,
    cross_entropy,
    deep_ensemble,
    ensemble_predict,
    grid_search,
    lr_at,
    majority_vote,
    score_model,
    train,
    trainable_groups,
)


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, channels=4, d=8, heads=2, encoder_layers=1, decoder_layers=1,
                max_positions=8, pooling="mean", k_hidden=16)
    base.update(kw)
    return ModelConfig(**base)


def snapshot(params):
    return {n: t.data.copy() for n, t in params.named_parameters().items()}


class TestCrossEntropy:
    def test_ln2(self):
        assert float(cross_entropy(Tensor([0.0, 0.0]), 1).data) == pytest.approx(math.log(2), abs=1e-15)

    def test_stable(self):
        assert float(cross_entropy(Tensor([0.0, 100.0]), 1).data) == pytest.approx(0.0, abs=1e-40)
        assert float(cross_entropy(Tensor([0.0, 1000.0]), 0).data) == pytest.approx(1000.0)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.0, 0.0]), 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = leaf(rng, 2, scale=3.0)
        label = seed % 2
        assert gradcheck(lambda: cross_entropy(logits, label), {"z": logits})["z"] < REL_TOL


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self):
        w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        w.grad = np.zeros(2)
        before = w.data.copy()
        adam_step({"w": w}, {}, 0.1, AdamConfig(weight_decay=0.0))
        assert np.array_equal(w.data, before)

    def test_hand_evaluated_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        w.grad = np.array([1.0])
        cfg = AdamConfig(weight_decay=0.0)
        adam_step({"w": w}, {}, 0.1, cfg)
        # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert w.data[0] == pytest.approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)
        assert w.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_two_hand_steps(self):
        w = Tensor(np.array([0.5]), requires_grad=True)
        cfg = AdamConfig(weight_decay=0.01)
        state = {}
        m = v = 0.0
        expected = 0.5
        for t, g in enumerate([0.3, -0.7], start=1):
            w.grad = np.array([g])
            adam_step({"w": w}, state, 0.01, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.98 * v + 0.02 * g * g
            m_hat, v_hat = m / (1 - 0.9**t), v / (1 - 0.98**t)
            expected = expected - 0.01 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.01 * expected)
        assert w.data[0] == pytest.approx(expected, abs=1e-15)
        assert state["w"].t == 2

    def test_decoupled_decay(self):
        w = Tensor(np.array([2.0, -4.0]), requires_grad=True)
        w.grad = np.zeros(2)
        adam_step({"w": w}, {}, 0.1, AdamConfig(weight_decay=0.5))
        np.testing.assert_allclose(w.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)

    def test_no_decay_set_and_frozen(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        state = {}
        adam_step({"a": a, "b": b}, state, 0.1, AdamConfig(weight_decay=0.5), trainable=lambda n: n == "a",
                  no_decay=frozenset({"a"}))
        assert a.data[0] == 1.0 and b.data[0] == 1.0
        assert "b" not in state and state["a"].t == 1

    def test_nan_gradient_names_group(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        w.grad = np.array([np.nan])
        with pytest.raises(TrainingDiverged, match="decoder.*translation_decoder.0"):
            adam_step({"translation_decoder.0.ff.w1": w}, {}, 0.1, AdamConfig())


class TestSchedule:
    cfg = TrainConfig(learning_rate=1e-3, epochs=8, freeze_decoder_epochs=2, freeze_encoder_epochs=4)

    def test_starts_at_zero(self):
        assert lr_at(0, 80, self.cfg) == 0.0

    def test_warmup_end(self):
        # warmup covers 8 of 80 steps; the last warmup step is one increment short of lr
        assert lr_at(7, 80, self.cfg) == pytest.approx(1e-3 * 7 / 8)
        assert lr_at(8, 80, self.cfg) == 1e-3

    def test_plateau_while_frozen(self):
        frozen_steps = range(8, 40)  # epochs [0, 4) at 10 steps each, after warmup
        assert all(lr_at(i, 80, self.cfg) == 1e-3 for i in frozen_steps)

    def test_final_is_zero(self):
        assert lr_at(79, 80, self.cfg) == pytest.approx(0.0, abs=1e-18)

    def test_cosine_midpoint(self):
        # decay runs from step 40 to step 79
        mid = 40 + 39 / 2
        assert lr_at(int(mid), 80, self.cfg) == pytest.approx(1e-3 * 0.5 * (1 + math.cos(math.pi * 19 / 39)))

    def test_no_freeze_is_warmup_then_cosine(self):
        cfg = TrainConfig(learning_rate=1.0, epochs=4)
        values = [lr_at(i, 40, cfg) for i in range(40)]
        assert values[4] == 1.0
        assert all(a >= b for a, b in zip(values[4:], values[5:]))
        assert values[-1] == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 400), st.integers(1, 10), st.data())
    def test_continuity_and_bounds(self, total, epochs, data):
        fd = data.draw(st.integers(0, epochs))
        fe = data.draw(st.integers(fd, epochs))
        cfg = TrainConfig(learning_rate=1.0, epochs=epochs, freeze_decoder_epochs=fd, freeze_encoder_epochs=fe)
        values = [lr_at(i, total, cfg) for i in range(total)]
        assert values[0] == 0.0
        assert all(0.0 <= v <= 1.0 for v in values)
        warm = int(0.1 * total)
        step = max(1.0 / max(warm, 1), math.pi / max(total - 1 - max(warm, total * fe // epochs), 1))
        jumps = [abs(a - b) for a, b in zip(values, values[1:])]
        # the only allowed discontinuity is the cosine span collapsing to a point at the very end
        assert all(j <= step + 1e-12 for j in jumps[:-1])

    def test_groups(self):
        cfg = TrainConfig(epochs=8, freeze_decoder_epochs=2, freeze_encoder_epochs=4)
        assert tuple(trainable_groups(0, cfg)) == (True, False, False)
        assert tuple(trainable_groups(3, cfg)) == (True, True, False)
        assert tuple(trainable_groups(7, cfg)) == (True, True, True)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=4, freeze_decoder_epochs=3, freeze_encoder_epochs=2)
        with pytest.raises(ValueError):
            TrainConfig(warmup_fraction=1.0)


@pytest.fixture(scope="module")
def synth():
    train_set, vocab = synth_examples(16, 3)
    val_set, _ = synth_examples(8, 4, vocab=vocab)
    return train_set, val_set, vocab


class TestTrain:
    def test_freeze_schedule_is_bitwise(self, synth):
        train_set, val_set, vocab = synth
        params = init_params(tiny_config(len(vocab)), 0)
        cfg = TrainConfig(learning_rate=1e-2, batch_size=4, epochs=6, freeze_decoder_epochs=2, freeze_encoder_epochs=4)
        start = snapshot(params)
        snaps = []
        train(train_set, None, params, cfg, on_epoch_end=lambda rec, p: snaps.append(snapshot(p)))

        def changed(group, a, b):
            return any(not np.array_equal(a[n], b[n]) for n in a if parameter_group(n) == group)

        history = [start] + snaps
        for epoch in range(6):
            before, after = history[epoch], history[epoch + 1]
            assert changed("image", before, after)
            assert changed("head", before, after)
            assert changed("decoder", before, after) == (epoch >= 2), epoch
            assert changed("encoder", before, after) == (epoch >= 4), epoch

    def test_zero_learning_rate_keeps_params(self, synth):
        train_set, _, vocab = synth
        params = init_params(tiny_config(len(vocab)), 0)
        start = snapshot(params)
        report = train(train_set, None, params, TrainConfig(learning_rate=0.0, batch_size=4, epochs=2))
        assert all(np.array_equal(start[n], t.data) for n, t in params.named_parameters().items())
        assert report.loss_curve[0] == report.loss_curve[1]

    def test_deterministic_report(self, synth):
        train_set, val_set, vocab = synth

        def run():
            params = init_params(tiny_config(len(vocab)), 1)
            report = train(train_set, val_set, params, TrainConfig(learning_rate=3e-3, batch_size=4, epochs=2, seed=5))
            return json.dumps(report.to_dict(), sort_keys=True), snapshot(params)

        (a, pa), (b, pb) = run(), run()
        assert a == b
        assert all(pa[n].tobytes() == pb[n].tobytes() for n in pa)

    def test_report_shape(self, synth):
        train_set, val_set, vocab = synth
        report = train(train_set, val_set, init_params(tiny_config(len(vocab)), 0),
                       TrainConfig(learning_rate=1e-3, batch_size=8, epochs=3))
        assert len(report.val_curve) == len(report.loss_curve) == 3
        assert all(0 <= v <= 1 for v in report.val_curve)
        assert report.to_dict()["config"]["epochs"] == 3

    def test_empty_and_unlabelled(self, synth):
        train_set, _, vocab = synth
        params = init_params(tiny_config(len(vocab)), 0)
        with pytest.raises(ValueError):
            train([], None, params, TrainConfig())
        with pytest.raises(ValueError):
            train([dataclasses.replace(train_set[0], label=None)], None, params, TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_carries_report(self, synth):
        train_set, _, vocab = synth
        params = init_params(tiny_config(len(vocab)), 0)
        params.classifier.b2.data[:] = [np.inf, 0.0]
        with pytest.raises(TrainingDiverged) as info:
            train(train_set, None, params, TrainConfig(batch_size=4, epochs=1))
        assert info.value.report is not None


class TestGridSearch:
    def test_singleton(self, synth):
        train_set, val_set, vocab = synth
        base = TrainConfig(batch_size=4, epochs=1)
        result = grid_search(train_set, val_set, tiny_config(len(vocab)), base, [1e-3], [4], [1], metric="accuracy")
        assert result.best == dataclasses.replace(base, learning_rate=1e-3)
        assert len(result.cells) == 1

    def test_zero_lr_cell_loses(self):
        # text-only examples labelled by their keyword: learnable in a few epochs
        train_set, vocab = synth_examples(16, 3, missing_fraction=1.0)
        cfg = tiny_config(len(vocab))
        base = TrainConfig(batch_size=4)
        # init seed 2 starts at chance level on this data
        result = grid_search(train_set, train_set, cfg, base, [0.0, 1e-2], [4], [6], metric="accuracy", init_seed=2)
        scores = dict((c.learning_rate, s) for c, s in result.cells)
        assert scores[1e-2] > max(0.5, scores[0.0])
        assert result.best.learning_rate == 1e-2

    def test_two_by_two_matches_manual(self, synth):
        train_set, val_set, vocab = synth
        cfg = tiny_config(len(vocab))
        base = TrainConfig(epochs=2)
        result = grid_search(train_set, val_set, cfg, base, [1e-3, 1e-2], [4, 8], [2], metric="auc")
        manual = []
        for lr in (1e-3, 1e-2):
            for bs in (4, 8):
                params = init_params(cfg, 0)
                train(train_set, val_set, params, dataclasses.replace(base, learning_rate=lr, batch_size=bs))
                manual.append(score_model(params, val_set, "auc"))
        assert [s for _, s in result.cells] == manual
        first_best = manual.index(max(manual))
        assert result.best == result.cells[first_best][0]

    def test_ties_go_to_first_cell(self, synth):
        train_set, val_set, vocab = synth
        result = grid_search(train_set, val_set, tiny_config(len(vocab)), TrainConfig(epochs=1),
                             [0.0, 0.0], [4], [1], metric="accuracy")
        assert result.cells[0][1] == result.cells[1][1]
        assert result.best is result.cells[0][0]

    def test_empty_grid(self, synth):
        train_set, val_set, vocab = synth
        with pytest.raises(ValueError):
            grid_search(train_set, val_set, tiny_config(len(vocab)), TrainConfig(), [], [4], [1])


class TestEnsemble:
    def test_majority(self):
        assert majority_vote([1] * 6 + [0] * 5) == 1
        assert majority_vote([0] * 6 + [1] * 5) == 0

    def test_hand_counted_votes(self):
        rng = np.random.default_rng(0)
        votes = rng.integers(0, 2, size=(20, 11))
        for row in votes:
            ones = 0
            for v in row:
                ones += int(v)
            assert majority_vote(row) == (1 if ones >= 6 else 0)

    def test_even_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([1, 0])
        with pytest.raises(ValueError):
            deep_ensemble([], tiny_config(10), TrainConfig(), members=10)

    def test_identical_members_match_single(self, synth):
        _, val_set, vocab = synth
        params = init_params(tiny_config(len(vocab)), 2)
        for ex in val_set:
            single = int(float(_p(ex, params)) >= 0.5)
            assert ensemble_predict([params] * 11, ex)[0] == single

    def test_members_differ_and_are_reproducible(self, synth):
        train_set, _, vocab = synth
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=1, seed=7)
        a = deep_ensemble(train_set, tiny_config(len(vocab)), cfg, members=3)
        b = deep_ensemble(train_set, tiny_config(len(vocab)), cfg, members=3)
        assert len(a) == 3
        assert not np.array_equal(a[0].proj_w.data, a[1].proj_w.data)
        assert all(np.array_equal(x.proj_w.data, y.proj_w.data) for x, y in zip(a, b))


def _p(example, params):
    from marmot.model import positive_probability

    return positive_probability(forward(example, params).logits)


def test_accuracy_helper(synth):
    train_set, _, vocab = synth
    params = init_params(tiny_config(len(vocab)), 0)
    params.classifier.w2.data[:] = 0.0
    params.classifier.b2.data[:] = [0.0, 5.0]  # always predicts 1
    expected = np.mean([ex.label == 1 for ex in train_set])
    assert accuracy(params, train_set) == expected
