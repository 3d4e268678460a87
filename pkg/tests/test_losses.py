import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cemb import diffcore as dc
from cemb.batching import AnchorGroup
from cemb.diffcore import Tensor
from cemb.errors import ParameterError, UsageError
from cemb.losses import (Hyperparams, combined_loss, cross_entropy, per_anchor_contrastive,
                         supervised_contrastive)

from oracles import scl_nested_loop


def random_groups(rng, n):
    """Up to 3 anchor groups over n sentences with disjoint positives/negatives."""
    groups = []
    for anchor in rng.choice(n, size=min(3, n - 1), replace=False):
        others = [i for i in range(n) if i != anchor]
        rng.shuffle(others)
        n_pos = int(rng.integers(1, len(others) + 1))
        n_neg = int(rng.integers(0, len(others) - n_pos + 1))
        groups.append(AnchorGroup(int(anchor), tuple(others[:n_pos]), tuple(others[n_pos:n_pos + n_neg])))
    return groups


class TestCrossEntropy:
    def test_confident_and_correct(self):
        assert cross_entropy(np.eye(3), [0, 1, 2]).item() == 0.0

    def test_uniform(self):
        assert round(cross_entropy(np.full((4, 3), 1 / 3), [0, 2, 1, 1]).item(), 5) == 1.09861

    def test_two_rows(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.3, 0.4, 0.3]])
        expected = -(math.log(0.7) + math.log(0.4)) / 2
        assert abs(cross_entropy(probs, [0, 1]).item() - expected) <= 1e-15
        assert abs(expected - 0.636483) < 1e-6

    def test_one_hot_labels_equal_ids(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.3, 0.4, 0.3]])
        assert cross_entropy(probs, [0, 1]).item() == cross_entropy(probs, np.eye(3)[[0, 1]]).item()

    def test_zero_probability_is_clamped(self):
        assert abs(cross_entropy(np.array([[0.0, 1.0, 0.0]]), [0]).item() + math.log(1e-12)) < 1e-9

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            cross_entropy(np.zeros((0, 3)), [])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 10), st.randoms(use_true_random=False))
    def test_row_permutation_invariance(self, n, rnd):
        rng = np.random.default_rng(rnd.randint(0, 2**31))
        probs = rng.dirichlet(np.ones(3), size=n)
        labels = rng.integers(0, 3, size=n)
        perm = rng.permutation(n)
        a = cross_entropy(probs, labels).item()
        b = cross_entropy(probs[perm], labels[perm]).item()
        assert abs(a - b) <= 4 * np.finfo(float).eps * abs(a)


class TestSupervisedContrastive:
    def test_single_positive_no_negatives(self):
        emb = np.array([[1.0, 0.0], [0.3, 0.9]])
        assert supervised_contrastive(emb, [AnchorGroup(0, (1,), ())], 1.0).item() == 0.0

    def test_one_positive_one_negative(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        loss = supervised_contrastive(emb, [AnchorGroup(0, (1,), (2,))], 1.0, normalize=False).item()
        assert abs(loss - math.log1p(math.exp(-1.0))) <= 1e-15
        assert round(loss, 5) == 0.31326

    def test_zero_positive_group_rejected(self):
        with pytest.raises(UsageError):
            supervised_contrastive(np.eye(3), [AnchorGroup(0, (), (1, 2))], 1.0)

    def test_index_out_of_range(self):
        with pytest.raises(UsageError):
            supervised_contrastive(np.eye(3), [AnchorGroup(0, (5,), ())], 1.0)

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_bad_temperature(self, tau):
        with pytest.raises(ParameterError):
            supervised_contrastive(np.eye(2), [AnchorGroup(0, (1,), ())], tau)

    @pytest.mark.parametrize("seed", range(20))
    def test_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        emb = rng.normal(size=(n, int(rng.integers(1, 9))))
        groups = random_groups(rng, n)
        for tau in (0.1, 0.5, 1.0):
            for normalize in (True, False):
                got = supervised_contrastive(emb, groups, tau, normalize).item()
                want = float(np.mean(scl_nested_loop(emb, groups, tau, normalize)))
                assert abs(got - want) <= 1e-9 * max(abs(want), 1e-300), (tau, normalize)

    def test_per_anchor_matches_oracle(self):
        rng = np.random.default_rng(11)
        emb = rng.normal(size=(6, 4))
        groups = random_groups(rng, 6)
        np.testing.assert_allclose(per_anchor_contrastive(emb, groups, 0.5),
                                   scl_nested_loop(emb, groups, 0.5, True), rtol=1e-12)

    def test_anchor_not_in_denominator(self):
        # a huge self-similarity would dominate if the anchor were counted
        emb = np.array([[10.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        loss = supervised_contrastive(emb, [AnchorGroup(0, (1,), (2,))], 1.0, normalize=False).item()
        assert abs(loss - math.log1p(math.exp(-10.0))) <= 1e-15

    def test_large_logits_are_stable(self):
        emb = np.array([[30.0, 0.0], [30.0, 0.0], [0.0, 30.0]])
        loss = supervised_contrastive(emb, [AnchorGroup(0, (1,), (2,))], 0.1, normalize=False).item()
        assert math.isfinite(loss) and 0.0 <= loss < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_high_temperature_limit(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        emb = rng.normal(size=(n, 4))
        groups = random_groups(rng, n)
        per = per_anchor_contrastive(emb, groups, 1e6, normalize=False)
        for g, loss in zip(groups, per):
            assert abs(loss - math.log(len(g.positives) + len(g.negatives))) <= 1e-3

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.01, 2), st.sampled_from([0.1, 0.5, 1.0]))
    def test_monotone_in_negative_similarity(self, s, delta, tau):
        def loss(neg):
            emb = np.array([[1.0, 0.0], [0.5, 0.0], [neg, 0.0]])
            return supervised_contrastive(emb, [AnchorGroup(0, (1,), (2,))], tau, normalize=False).item()
        assert loss(s + delta) > loss(s)

    @pytest.mark.parametrize("normalize", [True, False])
    def test_gradients(self, normalize):
        rng = np.random.default_rng(4)
        emb = Tensor(rng.normal(size=(6, 5)), requires_grad=True, name="emb")
        groups = random_groups(rng, 6)
        assert dc.gradcheck(lambda: supervised_contrastive(emb, groups, 0.5, normalize), [emb]) == []


class TestCombined:
    def test_endpoints_are_identity(self):
        ce, scl = Tensor(0.8), Tensor(5.0)
        assert combined_loss(ce, scl, 0.0) is ce
        assert combined_loss(ce, scl, 1.0) is scl
        assert combined_loss(0.8, 5.0, 0.0) == 0.8
        assert combined_loss(0.8, 5.0, 1.0) == 5.0

    def test_interpolation(self):
        assert combined_loss(1.0, 2.0, 0.3) == pytest.approx(1.3, abs=1e-15)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, lam):
        with pytest.raises(ParameterError):
            combined_loss(1.0, 2.0, lam)


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert h.normalize_embeddings and h.tau == 1.0 and h.n_pos_cap is None

    @pytest.mark.parametrize("kw", [{"lam": 2.0}, {"tau": 0.0}, {"n_pos_cap": 0}, {"n_neg_cap": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            Hyperparams(**kw)
