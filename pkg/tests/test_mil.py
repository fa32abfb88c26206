import itertools
import math

import numpy as np
import pytest

from transmil.errors import EmptyBagError, ParameterError
from transmil.mil import (
    Bag,
    DiscreteJoint,
    MeanPoolMIL,
    PoolingMatrix,
    bag_label_rule,
    build_pooling_matrix,
    check_pooling_matrix,
    conditional_chain_entropy,
    entropy_sweep,
    generic_three_step,
    identity_f,
    joint_entropy,
    marginal_entropy_sum,
    pooled_row,
    product_joint,
    random_joint,
    transmil_components,
    zero_h,
)
from transmil.model import TransMILModel
from transmil.ppeg import PPEGWeights
from transmil.tensor import Tensor


def h2(p):
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


class TestLabelRule:
    @pytest.mark.parametrize("labels,want", [([0, 0, 0], 0), ([0, 1, 0], 1), ([1], 1), ([1, 1], 1)])
    def test_examples(self, labels, want):
        assert bag_label_rule(labels) == want

    def test_exhaustive_small(self):
        for n in range(1, 7):
            for labels in itertools.product((0, 1), repeat=n):
                assert bag_label_rule(labels) == max(labels)

    def test_empty(self):
        with pytest.raises(EmptyBagError):
            bag_label_rule([])


class TestPooling:
    def test_mean(self):
        p = build_pooling_matrix("mean", 4)
        np.testing.assert_array_equal(p.matrix, np.diag([0.25] * 4))
        assert check_pooling_matrix(p)

    def test_max(self):
        p = build_pooling_matrix("max", 3, scores=[0.1, 0.9, 0.3])
        np.testing.assert_array_equal(p.matrix, np.diag([0.0, 1.0, 0.0]))
        assert check_pooling_matrix(p)

    def test_bypass_attention(self):
        p = build_pooling_matrix("bypass_attention", 3, scores=[0.0, 0.0, math.log(2.0)])
        np.testing.assert_allclose(np.diag(p.matrix), [0.25, 0.25, 0.5], atol=1e-15)
        assert check_pooling_matrix(p)

    def test_bypass_equal_scores(self):
        np.testing.assert_array_equal(build_pooling_matrix("bypass_attention", 2, scores=[1.0, 1.0]).matrix, np.diag([0.5, 0.5]))

    def test_self_attention_rows_stochastic(self):
        x = np.random.default_rng(0).normal(size=(6, 4))
        p = build_pooling_matrix("self_attention", 6, features=x)
        assert check_pooling_matrix(p)
        assert np.count_nonzero(p.matrix - np.diag(np.diag(p.matrix))) > 0

    def test_errors(self):
        with pytest.raises(ParameterError):
            build_pooling_matrix("median", 3)
        with pytest.raises(ParameterError):
            build_pooling_matrix("max", 3)
        with pytest.raises(EmptyBagError):
            build_pooling_matrix("mean", 0)

    def test_check_rejects_bad_matrices(self):
        assert not check_pooling_matrix(PoolingMatrix("mean", np.diag([0.5, 0.4])))
        assert not check_pooling_matrix(PoolingMatrix("self_attention", np.full((2, 2), 0.6)))


class TestThreeStep:
    def test_mean_pool_reduction(self):
        x = np.random.default_rng(1).normal(size=(5, 3))
        w = np.random.default_rng(2).normal(size=(3, 2))
        out = generic_three_step(
            Bag(x, 1), identity_f, zero_h, lambda t: build_pooling_matrix("mean", 5), lambda xp: pooled_row(xp) @ Tensor(w)
        )
        np.testing.assert_allclose(out.data[0], x.mean(axis=0) @ w, atol=1e-14)

    def test_max_pool_reduction(self):
        x = np.random.default_rng(3).normal(size=(6, 2))
        out = generic_three_step(
            x, identity_f, zero_h, lambda t: build_pooling_matrix("max", 6, scores=t.data[:, 0]), pooled_row
        )
        np.testing.assert_array_equal(out.data[0], x[np.argmax(x[:, 0])])

    def test_mean_pool_model_uses_mean(self):
        model = MeanPoolMIL(3, 4, 2, seed=0)
        x = np.random.default_rng(4).normal(size=(7, 3))
        want = (x @ model.embed_w.data + model.embed_b.data).mean(axis=0) @ model.head_w.data + model.head_b.data
        np.testing.assert_allclose(model.logits(x).data, want, atol=1e-14)

    def test_hand_chain_two_instances(self):
        x = np.array([[1.0, 5.0], [3.0, -1.0]])
        seen = []

        def g(xp):
            row = pooled_row(xp)
            seen.append(row.data.copy())
            return Tensor(np.sign(row.data[:, :1]))

        out = generic_three_step(x, identity_f, zero_h, lambda t: build_pooling_matrix("mean", 2), g)
        np.testing.assert_array_equal(seen[0], [[2.0, 2.0]])
        assert out.data.item() == 1.0

    @pytest.mark.parametrize("n", [4, 5, 7, 16])
    def test_transmil_decomposition(self, n):
        rng = np.random.default_rng(n)
        model = TransMILModel(5, 8, 2, landmarks=4, seed=n)
        model.ppeg = PPEGWeights.random(8, rng, scale=0.5)
        model.class_token.data[...] = rng.normal(size=(1, 8))
        model.layer2.ln_gamma.data += rng.normal(scale=0.2, size=8)
        model.layer2.ln_beta.data += rng.normal(scale=0.2, size=8)
        x = rng.normal(size=(n, 5))
        out = generic_three_step(x, *transmil_components(model))
        np.testing.assert_allclose(out.data, model.logits(x, "exact").data, rtol=0, atol=1e-9)

    def test_transmil_pooling_stack_rows(self):
        rng = np.random.default_rng(0)
        model = TransMILModel(5, 8, 2, seed=0)
        f, h, pooling, _ = transmil_components(model)
        x = Tensor(rng.normal(size=(4, 5)))
        stack = pooling(f(x) + h(x)).data
        assert stack.shape == (3, 5, 5)
        np.testing.assert_array_equal(stack[0], np.eye(5))


class TestEntropy:
    def test_independent_fair_bits(self):
        j = product_joint([0.5, 0.5])
        assert joint_entropy(j) == pytest.approx(2.0, abs=1e-12)
        assert marginal_entropy_sum(j) == pytest.approx(2.0, abs=1e-12)

    def test_copy_variable(self):
        j = DiscreteJoint([[0.5, 0.0], [0.0, 0.5]])
        assert joint_entropy(j) == pytest.approx(1.0, abs=1e-12)
        assert marginal_entropy_sum(j) == pytest.approx(2.0, abs=1e-12)

    def test_product_of_half_and_quarter(self):
        j = product_joint([0.5, 0.25])
        assert marginal_entropy_sum(j) == pytest.approx(1.811278, abs=1e-6)
        assert joint_entropy(j) == pytest.approx(marginal_entropy_sum(j), abs=1e-12)

    def test_partial_dependence(self):
        # T1 fair; T2 equals T1 except it flips a quarter of the time
        j = DiscreteJoint([[0.375, 0.125], [0.125, 0.375]])
        assert joint_entropy(j) == pytest.approx(1 + h2(0.25), abs=1e-12)
        assert joint_entropy(j) == pytest.approx(1.811278124459133, abs=1e-12)
        assert conditional_chain_entropy(j) == pytest.approx(joint_entropy(j), abs=1e-12)

    def test_flat_table_accepted(self):
        j = DiscreteJoint(np.full(8, 0.125))
        assert j.n == 3 and joint_entropy(j) == pytest.approx(3.0, abs=1e-12)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [0.2, 0.3, 0.5], [[1.5, -0.5], [0.0, 0.0]]])
    def test_invalid_tables(self, bad):
        with pytest.raises(ParameterError):
            DiscreteJoint(bad)

    def test_chain_rule_handles_zero_mass(self):
        j = DiscreteJoint(np.array([0.5, 0, 0, 0.25, 0, 0, 0.25, 0]))
        assert conditional_chain_entropy(j) == pytest.approx(joint_entropy(j), abs=1e-12)
        assert joint_entropy(j) == pytest.approx(1.5, abs=1e-12)

    def test_random_joint_is_valid(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 5):
            j = random_joint(n, rng)
            assert j.table.shape == (2,) * n

    def test_sweep_small(self):
        report = entropy_sweep(trials=50)
        assert report.ok
        assert report.worst_chain_gap < 1e-9 and report.worst_product_gap < 1e-9
        assert report.max_slack > 0

    def test_sweep_rejects_zero_trials(self):
        with pytest.raises(ParameterError):
            entropy_sweep(trials=0)
