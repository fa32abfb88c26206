import itertools
import math

import numpy as np
import pytest

from transmil.data import SyntheticConfig, generate_synthetic_dataset
from transmil.errors import ParameterError
from transmil.mil import MeanPoolMIL
from transmil.model import TransMILModel
from transmil.tensor import GradTape, Tensor, backward
from transmil.train import (
    LOG_HEADER,
    Lookahead,
    TrainConfig,
    UndefinedMetricError,
    accuracy,
    auc_binary,
    auc_macro_ovr,
    auc_per_class,
    cross_entropy_loss,
    evaluate,
    lookahead_step,
    train_loop,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestCrossEntropy:
    def test_uniform_two_class(self):
        assert cross_entropy_loss(Tensor(np.zeros(2)), 0).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident(self):
        assert cross_entropy_loss(Tensor(np.array([20.0, 0.0])), 0).item() < 1e-8

    def test_large_logits_stable(self):
        loss = cross_entropy_loss(Tensor(np.array([1000.0, 0.0, -1000.0])), 1).item()
        assert loss == pytest.approx(1000.0, abs=1e-9)

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.random.default_rng(0).normal(size=4)
        t = Tensor(z, requires_grad=True)
        with GradTape() as tape:
            loss = cross_entropy_loss(t, 2)
        backward(loss, tape)
        p = np.exp(z - z.max())
        p /= p.sum()
        np.testing.assert_allclose(t.grad, p - np.eye(4)[2], rtol=0, atol=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            cross_entropy_loss(Tensor(np.zeros(2)), 2)


class TestLookahead:
    def make(self, alpha, k=2, lr=0.1):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        cfg = TrainConfig(learning_rate=lr, weight_decay=0.0, lookahead_k=k, lookahead_alpha=alpha)
        return p, Lookahead([p], cfg)

    def run(self, p, opt, steps):
        fast = []
        for _ in range(steps):
            p.grad = np.array([0.5, -1.0])
            opt.step()
            fast.append(p.data.copy())
        return fast

    def test_first_adam_step_is_lr_times_sign(self):
        p, opt = self.make(1.0, k=10)
        self.run(p, opt, 1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=0, atol=1e-8)

    def test_alpha_one_tracks_fast_weights(self):
        p, opt = self.make(1.0, k=2)
        q, plain = self.make(1.0, k=10**6)
        np.testing.assert_array_equal(self.run(p, opt, 6), self.run(q, plain, 6))

    def test_alpha_half_interpolates(self):
        p, opt = self.make(0.5, k=2)
        self.run(p, opt, 2)
        # two constant-gradient Adam steps move each coordinate by 2 * lr; half of that sticks
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=0, atol=1e-7)
        np.testing.assert_array_equal(opt.state.slow[0], p.data)
        assert opt.state.counter == 0

    def test_counter_cycles(self):
        p, opt = self.make(0.5, k=3)
        seen = []
        for _ in range(7):
            p.grad = np.ones(2)
            seen.append(lookahead_step(opt).counter)
        assert seen == [1, 2, 0, 1, 2, 0, 1]

    def test_weight_decay_shrinks_without_gradient(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Lookahead([p], TrainConfig(learning_rate=0.1, weight_decay=0.5, lookahead_alpha=1.0))
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    @pytest.mark.parametrize(
        "kwargs", [{"learning_rate": 0}, {"lookahead_alpha": 0}, {"lookahead_alpha": 1.5}, {"lookahead_k": 0}, {"mode": "fast"}]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ParameterError):
            TrainConfig(**kwargs)


class TestMetrics:
    def test_auc_examples(self):
        assert auc_binary([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
        assert auc_binary([0.1, 0.3, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
        assert auc_binary([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
        assert auc_binary([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75

    @pytest.mark.parametrize("seed", range(20))
    def test_auc_matches_pairwise_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 15))
        labels = rng.permutation(np.r_[1, 0, rng.integers(0, 2, n - 2)])
        scores = rng.integers(0, 4, n) / 4.0
        assert auc_binary(scores, labels) == pairwise_auc(scores, labels)

    def test_auc_invariant_under_monotone_map(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=30)
        y = np.r_[np.ones(15), np.zeros(15)]
        assert auc_binary(s, y) == auc_binary(np.exp(3 * s) + 1, y)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auc_binary([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auc_macro_ovr(np.eye(3)[[0, 1, 1]], [0, 1, 1])

    def test_macro_perfect(self):
        probs = np.eye(3)[[0, 1, 2, 2, 1]]
        assert auc_macro_ovr(probs, [0, 1, 2, 2, 1]) == 1.0

    def test_macro_is_mean_of_one_vs_rest(self):
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(3), size=12)
        labels = np.arange(12) % 3
        per = [pairwise_auc(probs[:, c], labels == c) for c in range(3)]
        assert auc_per_class(probs, labels) == per
        assert auc_macro_ovr(probs, labels) == pytest.approx(np.mean(per), abs=1e-15)

    def test_accuracy_threshold_and_tie(self):
        assert accuracy([0.5, 0.51, 0.49], [0, 1, 0]) == 1.0
        assert accuracy([0.5], [1]) == 0.0
        assert accuracy(np.array([[0.5, 0.5], [0.2, 0.8]]), [0, 1]) == 1.0
        assert accuracy(np.array([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]), [2, 1]) == 0.5


def toy_bags(seed, count=16):
    cfg = SyntheticConfig(bag_count=count, instances_per_bag=(4, 9), feature_dim=6, witness_rate=0.5, cluster_separation=3.0, seed=seed)
    return generate_synthetic_dataset(cfg).bags


class TestTrainLoop:
    def test_zero_epochs_leaves_model_unchanged(self, tmp_path):
        bags = toy_bags(0)
        model = TransMILModel(6, 8, 2, landmarks=4, seed=0)
        before = [p.data.copy() for p in model.parameters()]
        _, report = train_loop(bags[:10], bags[10:], model, TrainConfig(epochs=0, mode="exact"), tmp_path / "log.csv")
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
        assert report.best_epoch == 0 and len(report.loss_curve) == 1
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 2 and lines[1].startswith("0,")

    def test_log_has_row_per_epoch(self, tmp_path):
        bags = toy_bags(1)
        _, report = train_loop(
            bags[:10], bags[10:], TransMILModel(6, 8, 2, 4, seed=1), TrainConfig(epochs=3, mode="nystrom"), tmp_path / "l.csv"
        )
        rows = (tmp_path / "l.csv").read_text().splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["0", "1", "2", "3"]
        assert report.best_val_auc == max(report.val_auc_curve)

    def test_deterministic(self):
        curves = []
        for _ in range(2):
            bags = toy_bags(2)
            _, rep = train_loop(bags[:10], bags[10:], TransMILModel(6, 8, 2, 4, seed=2), TrainConfig(epochs=2, mode="exact"))
            curves.append(rep.loss_curve)
        assert curves[0] == curves[1]

    def test_restores_best_epoch(self):
        bags = toy_bags(3)
        model = TransMILModel(6, 8, 2, 4, seed=3)
        model, rep = train_loop(bags[:10], bags[10:], model, TrainConfig(epochs=4, mode="exact", learning_rate=1e-2))
        assert evaluate(model, bags[10:], "exact")["auc"] == rep.best_val_auc

    def test_loss_decreases_on_toy_problem(self):
        decreased = 0
        for seed in range(10):
            bags = toy_bags(10 + seed, count=12)
            cfg = TrainConfig(epochs=5, mode="exact", learning_rate=1e-3, seed=seed)
            _, rep = train_loop(bags[:8], bags[8:], TransMILModel(6, 8, 2, 4, seed=seed), cfg)
            decreased += rep.loss_curve[-1] < rep.loss_curve[0]
        assert decreased >= 9

    def test_mean_pool_baseline_trains(self):
        bags = toy_bags(4)
        _, rep = train_loop(bags[:10], bags[10:], MeanPoolMIL(6, 8), TrainConfig(epochs=3, learning_rate=1e-2))
        assert rep.loss_curve[-1] < rep.loss_curve[0]

    def test_rejects_width_mismatch(self):
        bags = toy_bags(5)
        with pytest.raises(ParameterError, match="width"):
            train_loop(bags[:10], bags[10:], TransMILModel(7, 8, 2), TrainConfig(epochs=1))
