"""Fine-tuning loop: shared encoder, CE/SCL objectives, Adam with linear warmup/decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .batching import LabeledPair, SelectionPolicy, build_groups, expand_augment, sentence_table
from .checkpoint import Checkpoint
from .encoder import EncoderConfig, Vocab, classify_pair, encode_batch, init_encoder, init_head, tokenize
from .errors import NumericalError, ParameterError, UsageError
from .losses import Hyperparams, combined_loss, cross_entropy, supervised_contrastive

log = logging.getLogger(__name__)

CE_ONLY, AUGMENT, COMBINED = "ce", "augment", "combined"
MODES = (CE_ONLY, AUGMENT, COMBINED)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = COMBINED
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    batch_size: int = 64
    epochs: int = 1
    learning_rate: float = 2e-5
    warmup_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = None
    seed: int = 0
    # encoder shape; vocab_size comes from the corpus
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 32
    dropout_rate: float = 0.0
    min_count: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ParameterError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be positive")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def policy(self) -> SelectionPolicy:
        return SelectionPolicy(self.hyperparams.n_pos_cap, self.hyperparams.n_neg_cap)

    @property
    def effective_lambda(self) -> float:
        return self.hyperparams.lam if self.mode == COMBINED else 0.0

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                             n_heads=self.n_heads, d_ff=self.d_ff, max_seq_len=self.max_seq_len,
                             dropout_rate=self.dropout_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hyperparams"] = Hyperparams(**d.get("hyperparams", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear ramp 0 -> base_lr over ceil(warmup_fraction * total) steps, then linear decay to 0.

    The warmup is capped at total - 1 steps.
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    # leave at least one decay step so the peak is reached inside the run
    warmup = min(math.ceil(warmup_fraction * total_steps), total_steps - 1)
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, dc.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    vocab: Vocab
    encoder_config: EncoderConfig
    params: dict[str, dc.Tensor]  # encoder and head parameters in one namespace
    optimizer: Adam
    total_steps: int
    step: int = 0
    dropout_rng: np.random.Generator | None = None

    @classmethod
    def initial(cls, vocab: Vocab, config: TrainConfig, total_steps: int) -> "TrainState":
        enc_cfg = config.encoder_config(len(vocab))
        init_rng = np.random.default_rng([config.seed, 0])
        params = init_encoder(enc_cfg, init_rng)
        params.update(init_head(enc_cfg, init_rng))
        return cls(vocab, enc_cfg, params, Adam(config.betas, config.eps), total_steps,
                   dropout_rng=np.random.default_rng([config.seed, 2]))

    @property
    def encoder_params(self) -> dict[str, dc.Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    @property
    def head_params(self) -> dict[str, dc.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    def checkpoint(self, config: TrainConfig) -> Checkpoint:
        return Checkpoint(
            encoder_config=self.encoder_config, vocab=self.vocab,
            params={k: p.data.copy() for k, p in self.params.items()},
            train_config=config.to_dict(), step=self.step)


@dataclass
class StepLosses:
    ce: dc.Tensor | None
    scl: dc.Tensor | None
    total: dc.Tensor
    n_pairs: int
    n_sentences: int
    n_groups: int
    mean_pos: float
    mean_neg: float


def compute_losses(batch: Sequence[LabeledPair], state: TrainState, config: TrainConfig) -> StepLosses:
    """Forward pass for one batch: encode every distinct sentence once, then build the objective."""
    if not batch:
        raise UsageError("train_step needs a nonempty batch")
    hp = config.hyperparams
    groups = []
    if config.mode == AUGMENT:
        batch = expand_augment(batch, config.policy, seed=[config.seed, 3, state.step])
    sentences, idx = sentence_table(batch)
    if config.mode == COMBINED:
        grouped = build_groups(batch, config.policy, seed=[config.seed, 3, state.step])
        assert grouped.sentences == sentences
        groups = grouped.groups

    cfg = state.encoder_config
    tokens = [tokenize(s, state.vocab, cfg.max_seq_len) for s in sentences]
    emb = encode_batch(tokens, state.encoder_params, cfg, train_mode=True, rng=state.dropout_rng)

    prem = np.array([p for p, _ in idx], dtype=np.intp)
    hyp = np.array([h for _, h in idx], dtype=np.intp)
    probs = classify_pair(emb[prem], emb[hyp], state.head_params)
    ce = cross_entropy(probs, [p.class_id for p in batch])

    lam = config.effective_lambda
    scl = supervised_contrastive(emb, groups, hp.tau, hp.normalize_embeddings) if groups else None
    if scl is not None:
        total = combined_loss(ce, scl, lam)
    else:
        # no usable anchors: the contrastive term contributes nothing
        total = combined_loss(ce, dc.Tensor(0.0), lam)

    n_pos = [len(g.positives) for g in groups]
    n_neg = [len(g.negatives) for g in groups]
    return StepLosses(ce, scl, total, len(batch), len(sentences), len(groups),
                      float(np.mean(n_pos)) if groups else 0.0, float(np.mean(n_neg)) if groups else 0.0)


def _grads_by_name(loss: dc.Tensor, params: dict[str, dc.Tensor]) -> dict[str, np.ndarray]:
    by_uid = dc.backward(loss)
    return {name: by_uid.get(p.uid, np.zeros_like(p.data)) for name, p in params.items()}


def train_step(batch: Sequence[LabeledPair], state: TrainState, config: TrainConfig) -> tuple[TrainState, dict]:
    """One Adam update on ``batch``; mutates and returns ``state`` with a metrics record."""
    lr = lr_schedule(state.step, state.total_steps, config.learning_rate, config.warmup_fraction)
    try:
        losses = compute_losses(batch, state, config)
        grads = _grads_by_name(losses.total, state.params)
    except NumericalError as exc:
        raise NumericalError(f"numerical failure at step {state.step} (lr={lr:.3g}): {exc}") from exc
    metrics = {
        "step": state.step,
        "lr": lr,
        "ce_loss": losses.ce.item(),
        "scl_loss": losses.scl.item() if losses.scl is not None else None,
        "total": losses.total.item(),
        "n_pairs": losses.n_pairs,
        "n_sentences": losses.n_sentences,
        "n_groups": losses.n_groups,
        "mean_pos": losses.mean_pos,
        "mean_neg": losses.mean_neg,
    }
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError(f"non-finite gradient at step {state.step} (lr={lr:.3g}); losses {metrics}")
    if config.max_grad_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        metrics["grad_norm"] = norm
        if norm > config.max_grad_norm:
            scale = config.max_grad_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    with np.errstate(over="ignore", invalid="ignore"):
        state.optimizer.step(state.params, grads, lr)
    bad = [k for k, p in state.params.items() if not np.all(np.isfinite(p.data))]
    if bad:
        raise NumericalError(f"non-finite parameters after update at step {state.step} (lr={lr:.3g}): "
                             f"{', '.join(bad[:3])}; losses {metrics}")
    state.step += 1
    return state, metrics


def iter_batches(corpus: Sequence[LabeledPair], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield [corpus[i] for i in order[start:start + batch_size]]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(corpus: Sequence[LabeledPair], config: TrainConfig, vocab: Vocab | None = None,
          history: list | None = None) -> Checkpoint:
    """Train from scratch on ``corpus``; deterministic given ``config.seed``."""
    if not corpus:
        raise UsageError("training corpus is empty")
    if vocab is None:
        vocab = Vocab.build([s for p in corpus for s in (p.premise, p.hypothesis)], config.min_count)
    total = config.epochs * steps_per_epoch(len(corpus), config.batch_size)
    state = TrainState.initial(vocab, config, total)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    for epoch in range(config.epochs):
        for batch in iter_batches(corpus, config.batch_size, shuffle_rng):
            state, metrics = train_step(batch, state, config)
            metrics["epoch"] = epoch
            if history is not None:
                history.append(metrics)
            log.debug("step %(step)d lr=%(lr).3g total=%(total).4f ce=%(ce_loss).4f", metrics)
        log.info("epoch %d done, last total loss %.4f", epoch, metrics["total"])
    return state.checkpoint(config)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``config`` with top-level or hyperparameter fields replaced."""
    hp_fields = {"lam", "tau", "n_pos_cap", "n_neg_cap", "normalize_embeddings"}
    hp = {k: kw.pop(k) for k in list(kw) if k in hp_fields}
    if hp:
        kw["hyperparams"] = replace(config.hyperparams, **hp)
    return replace(config, **kw)
