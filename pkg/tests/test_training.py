import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cemb import diffcore as dc
from cemb.batching import LabeledPair
from cemb.encoder import Vocab
from cemb.errors import ParameterError, UsageError
from cemb.training import (AUGMENT, CE_ONLY, COMBINED, Adam, TrainConfig, TrainState, compute_losses,
                           iter_batches, lr_schedule, train, train_step, with_overrides)

from oracles import adam_scalar

TOY = dict(d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=16, learning_rate=3e-3, seed=3)


def make_state(batch, config, total_steps=10):
    vocab = Vocab.build([s for p in batch for s in (p.premise, p.hypothesis)])
    return TrainState.initial(vocab, config, total_steps)


def params_bytes(state):
    return {k: p.data.tobytes() for k, p in state.params.items()}


def leaves(root):
    seen, stack, out = set(), [root], []
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen.add(node.uid)
        if not node._parents and node.requires_grad:
            out.append(node)
        stack.extend(node._parents)
    return out


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(5, 100, 1.0, 0.1) == 0.5
        assert lr_schedule(55, 100, 1.0, 0.1) == 0.5
        assert lr_schedule(10, 100, 1.0, 0.1) == 1.0
        assert lr_schedule(100, 100, 1.0, 0.1) == 0.0
        assert lr_schedule(0, 100, 1.0, 0.1) == 0.0

    def test_no_warmup(self):
        assert lr_schedule(0, 4, 2.0, 0.0) == 2.0
        assert lr_schedule(2, 4, 2.0, 0.0) == 1.0

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            lr_schedule(11, 10, 1.0, 0.1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 500), st.sampled_from([0.0, 0.05, 0.1, 0.3, 0.9]), st.floats(1e-6, 10.0))
    def test_continuous_piecewise_linear_with_peak(self, total, wf, base):
        lrs = [lr_schedule(s, total, base, wf) for s in range(total + 1)]
        assert max(lrs) == pytest.approx(base, rel=1e-12)
        assert lrs[-1] == 0.0
        assert all(0.0 <= x <= base * (1 + 1e-12) for x in lrs)
        # slopes are bounded by base / segment length, so no jumps
        warmup = math.ceil(wf * total)
        max_slope = base / max(1, min(x for x in (warmup, total - warmup) if x > 0))
        diffs = np.abs(np.diff(lrs))
        assert np.all(diffs <= max_slope * (1 + 1e-9))


class TestAdam:
    def test_matches_scalar_reference(self):
        x = dc.Tensor(np.array([0.5]), requires_grad=True)
        opt = Adam()
        grad_fn = lambda v: 2.0 * (v - 3.0)  # noqa: E731
        path = []
        for _ in range(10):
            opt.step({"x": x}, {"x": grad_fn(x.data)}, 0.1)
            path.append(float(x.data[0]))
        ref = adam_scalar(grad_fn, 0.5, 0.1, 10)
        assert max(abs(a - b) for a, b in zip(path, ref)) <= 1e-12


class TestConfig:
    def test_defaults_follow_recipe(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.warmup_fraction) == (64, 1, 2e-5, 0.1)
        assert cfg.betas == (0.9, 0.999) and cfg.eps == 1e-8

    @pytest.mark.parametrize("kw", [{"warmup_fraction": 1.0}, {"batch_size": 0}, {"learning_rate": 0.0},
                                    {"mode": "scl"}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = with_overrides(TrainConfig(**TOY), lam=0.3, n_pos_cap=3, mode=AUGMENT)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.effective_lambda == 0.0


class TestTrainStep:
    def test_lambda_zero_is_ce_only(self, nli_batch):
        ce = TrainConfig(mode=CE_ONLY, **TOY)
        comb = with_overrides(ce, mode=COMBINED, lam=0.0)
        s1, m1 = train_step(nli_batch, make_state(nli_batch, ce), ce)
        s1, m1 = train_step(nli_batch, s1, ce)
        s2, m2 = train_step(nli_batch, make_state(nli_batch, comb), comb)
        s2, m2 = train_step(nli_batch, s2, comb)
        assert params_bytes(s1) == params_bytes(s2)
        assert m1["total"] == m2["total"]

    def test_lambda_one_ignores_ce_branch(self, nli_batch):
        cfg = with_overrides(TrainConfig(**TOY), lam=1.0)
        a = make_state(nli_batch, cfg)
        b = make_state(nli_batch, cfg)
        rng = np.random.default_rng(0)
        for name, p in b.head_params.items():
            p.data += rng.normal(size=p.shape)
        head_before = {k: p.data.copy() for k, p in b.head_params.items()}
        for _ in range(3):
            a, ma = train_step(nli_batch, a, cfg)
            b, mb = train_step(nli_batch, b, cfg)
        assert ma["total"] == ma["scl_loss"] == mb["total"]
        for name in a.encoder_params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        for name, p in b.head_params.items():
            assert p.data.tobytes() == head_before[name].tobytes()

    def test_no_groups(self):
        batch = [LabeledPair("A dog runs.", "A cat sleeps.", "neutral"),
                 LabeledPair("A man cooks.", "Nobody cooks.", "contradiction")]
        cfg = TrainConfig(**TOY)
        _, metrics = train_step(batch, make_state(batch, cfg), cfg)
        assert metrics["n_groups"] == 0 and metrics["scl_loss"] is None
        assert metrics["total"] == pytest.approx(0.5 * metrics["ce_loss"], rel=1e-15)

    def test_metrics(self, nli_batch):
        cfg = TrainConfig(**TOY)
        _, m = train_step(nli_batch, make_state(nli_batch, cfg), cfg)
        assert m["n_pairs"] == 7 and m["n_groups"] == 3
        assert m["n_sentences"] == len({s for p in nli_batch for s in (p.premise, p.hypothesis)})
        assert m["total"] == pytest.approx(0.5 * m["ce_loss"] + 0.5 * m["scl_loss"], rel=1e-14)
        assert m["lr"] == 0.0  # first warmup step

    def test_augment_uses_expanded_pairs(self, nli_batch):
        cfg = TrainConfig(mode=AUGMENT, **TOY)
        _, m = train_step(nli_batch, make_state(nli_batch, cfg), cfg)
        assert m["n_pairs"] > len(nli_batch) and m["scl_loss"] is None

    def test_empty_batch(self, nli_batch):
        cfg = TrainConfig(**TOY)
        with pytest.raises(UsageError):
            train_step([], make_state(nli_batch, cfg), cfg)

    def test_gradient_decomposition(self, nli_batch):
        cfg = with_overrides(TrainConfig(**TOY), lam=0.3)
        state = make_state(nli_batch, cfg)
        losses = compute_losses(nli_batch, state, cfg)
        total = dc.backward(losses.total)
        ce = dc.backward(losses.ce)
        scl = dc.backward(losses.scl)
        for name, p in state.params.items():
            want = 0.7 * ce.get(p.uid, 0.0) + 0.3 * scl.get(p.uid, 0.0)
            np.testing.assert_allclose(total.get(p.uid, np.zeros(p.shape)), want, rtol=0, atol=1e-10)

    def test_weight_tying(self, nli_batch):
        cfg = TrainConfig(**TOY)
        state = make_state(nli_batch, cfg)
        losses = compute_losses(nli_batch, state, cfg)
        owned = {p.uid for p in state.params.values()}
        for branch in (losses.ce, losses.scl):
            used = {leaf.uid for leaf in leaves(branch)}
            assert used <= owned
        ce_enc = {leaf.uid for leaf in leaves(losses.ce)} & {p.uid for p in state.encoder_params.values()}
        scl_enc = {leaf.uid for leaf in leaves(losses.scl)}
        assert ce_enc == scl_enc == {p.uid for p in state.encoder_params.values()}
        n_layers = cfg.n_layers
        assert len(state.encoder_params) == 2 + 16 * n_layers + 2
        assert len(state.head_params) == 4

    def test_repeated_batch_loss_decreases(self, nli_batch):
        cfg = with_overrides(TrainConfig(**TOY), lam=0.5, learning_rate=1e-2, warmup_fraction=0.0)
        state = make_state(nli_batch, cfg, total_steps=50)
        totals = []
        for _ in range(50):
            state, m = train_step(nli_batch, state, cfg)
            totals.append(m["total"])
        assert all(totals[t] < totals[t - 5] for t in range(5, 50))


class TestTrain:
    def test_batch_sizes(self):
        corpus = [LabeledPair(f"p{i}", f"h{i}", "entailment") for i in range(130)]
        sizes = [len(b) for b in iter_batches(corpus, 64, np.random.default_rng(0))]
        assert sizes == [64, 64, 2]

    def test_deterministic(self, nli_batch):
        cfg = with_overrides(TrainConfig(**TOY), batch_size=3, epochs=2)
        h1, h2 = [], []
        a = train(nli_batch, cfg, history=h1)
        b = train(nli_batch, cfg, history=h2)
        assert a.to_bytes() == b.to_bytes()
        assert h1 == h2 and len(h1) == 6
        assert a.step == 6

    def test_seed_matters(self, nli_batch):
        cfg = TrainConfig(**TOY)
        assert train(nli_batch, cfg).to_bytes() != train(nli_batch, with_overrides(cfg, seed=4)).to_bytes()

    def test_empty_corpus(self):
        with pytest.raises(UsageError):
            train([], TrainConfig(**TOY))
