import numpy as np
import pytest

from cemb.batching import LabeledPair
from cemb.encoder import EncoderConfig, Vocab, init_encoder, init_head

_acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and (report.when == "call" or (report.when == "setup" and not report.passed)):
        _acceptance_results.append((marker.args[0], report.passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, duration in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  ({duration:.1f}s)")


SENTENCES = [
    "A dog runs in the park.",
    "The cat sleeps on a warm mat.",
    "A brown dog has a ball in its mouth.",
    "Two children play football outside.",
    "A man is cooking soup.",
    "Nobody is here.",
]


@pytest.fixture
def vocab():
    return Vocab.build(SENTENCES)


@pytest.fixture
def toy_config(vocab):
    return EncoderConfig(vocab_size=len(vocab), d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=12)


@pytest.fixture
def toy_params(toy_config):
    rng = np.random.default_rng(0)
    params = init_encoder(toy_config, rng)
    # larger-than-default weights so finite differences see nontrivial curvature
    for p in params.values():
        p.data += rng.normal(0.0, 0.3, size=p.shape)
    return params


@pytest.fixture
def toy_head(toy_config):
    rng = np.random.default_rng(1)
    head = init_head(toy_config, rng)
    for p in head.values():
        p.data += rng.normal(0.0, 0.3, size=p.shape)
    return head


@pytest.fixture
def nli_batch():
    return [
        LabeledPair("A dog runs in the park.", "A dog is outside.", "entailment"),
        LabeledPair("A dog runs in the park.", "The cat sleeps on a warm mat.", "contradiction"),
        LabeledPair("A dog runs in the park.", "A brown dog has a ball in its mouth.", "neutral"),
        LabeledPair("A man is cooking soup.", "A man is cooking.", "entailment"),
        LabeledPair("A man is cooking soup.", "Nobody is here.", "contradiction"),
        LabeledPair("Two children play football outside.", "Children play.", "entailment"),
        LabeledPair("Two children play football outside.", "Two children play football in a stadium.", "neutral"),
    ]
