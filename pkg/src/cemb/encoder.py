"""Toy tokenizer, transformer sentence encoder and the pair-classification head."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataError, DimensionError, ParameterError, UsageError

PAD, START, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[START]", "[UNK]")
N_CLASSES = 3
# additive attention bias for PAD keys; exp() of it underflows to exactly 0
_MASK_BIAS = -1e30

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token/id bijection with PAD=0, START=1, UNK=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @property
    def tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def build(cls, sentences: Iterable[str], min_count: int = 1) -> "Vocab":
        counts = Counter(tok for s in sentences for tok in split_words(s))
        kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != RESERVED:
            raise DataError(f"{path}: vocabulary must start with the reserved header {RESERVED}")
        return cls(lines[3:])


def tokenize(text: str, vocab: Vocab, max_seq_len: int) -> list[int]:
    ids = [START] + [vocab.id(t) for t in split_words(text)]
    return ids[:max_seq_len]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 32
    dropout_rate: float = 0.0
    head_hidden: int | None = None  # classifier hidden width; defaults to d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ParameterError("max_seq_len must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ParameterError("encoder sizes must be positive")

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Normal(0, 0.02) embeddings and weights, zero biases, unit layer-norm gains."""
    D, F = config.d_model, config.d_ff

    def normal(name, *shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def const(name, value, *shape):
        return Tensor(np.full(shape, value), requires_grad=True, name=name)

    params = {
        "tok_emb": normal("tok_emb", config.vocab_size, D),
        "pos_emb": normal("pos_emb", config.max_seq_len, D),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        params.update({
            p + "ln1.g": const(p + "ln1.g", 1.0, D), p + "ln1.b": const(p + "ln1.b", 0.0, D),
            p + "attn.wq": normal(p + "attn.wq", D, D), p + "attn.bq": const(p + "attn.bq", 0.0, D),
            p + "attn.wk": normal(p + "attn.wk", D, D), p + "attn.bk": const(p + "attn.bk", 0.0, D),
            p + "attn.wv": normal(p + "attn.wv", D, D), p + "attn.bv": const(p + "attn.bv", 0.0, D),
            p + "attn.wo": normal(p + "attn.wo", D, D), p + "attn.bo": const(p + "attn.bo", 0.0, D),
            p + "ln2.g": const(p + "ln2.g", 1.0, D), p + "ln2.b": const(p + "ln2.b", 0.0, D),
            p + "ff.w1": normal(p + "ff.w1", D, F), p + "ff.b1": const(p + "ff.b1", 0.0, F),
            p + "ff.w2": normal(p + "ff.w2", F, D), p + "ff.b2": const(p + "ff.b2", 0.0, D),
        })
    params["final_ln.g"] = const("final_ln.g", 1.0, D)
    params["final_ln.b"] = const("final_ln.b", 0.0, D)
    return params


def init_head(config: EncoderConfig, rng: np.random.Generator, n_classes: int = N_CLASSES) -> dict[str, Tensor]:
    D, H = config.d_model, config.hidden
    return {
        "head.w1": Tensor(rng.normal(0.0, 0.02, size=(3 * D, H)), requires_grad=True, name="head.w1"),
        "head.b1": Tensor(np.zeros(H), requires_grad=True, name="head.b1"),
        "head.w2": Tensor(rng.normal(0.0, 0.02, size=(H, n_classes)), requires_grad=True, name="head.w2"),
        "head.b2": Tensor(np.zeros(n_classes), requires_grad=True, name="head.b2"),
    }


def pad_batch(seqs: Sequence[Sequence[int]], max_seq_len: int) -> np.ndarray:
    if not seqs:
        raise UsageError("cannot encode an empty batch")
    lengths = [len(s) for s in seqs]
    if min(lengths) < 1:
        raise UsageError("token sequences must contain at least the START token")
    if max(lengths) > max_seq_len:
        raise UsageError(f"sequence of length {max(lengths)} exceeds max_seq_len={max_seq_len}; truncate first")
    ids = np.full((len(seqs), max(lengths)), PAD, dtype=np.intp)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids


def pool_indices(length: int) -> np.ndarray:
    """Positions averaged into the sentence vector: everything after START.

    A START-only sentence falls back to pooling the START output.
    """
    return np.arange(1, length) if length > 1 else np.arange(1)


def _attention(x: Tensor, params: dict, p: str, key_bias: np.ndarray, config: EncoderConfig,
               train: bool, rng) -> Tensor:
    B, T, D = x.shape
    H = config.n_heads
    dh = D // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params[p + "attn.wq"] + params[p + "attn.bq"])
    k = heads(x @ params[p + "attn.wk"] + params[p + "attn.bk"])
    v = heads(x @ params[p + "attn.wv"] + params[p + "attn.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + key_bias
    weights = dc.dropout(dc.softmax(scores), config.dropout_rate, rng, train)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]


def encode_hidden(token_seqs: Sequence[Sequence[int]], params: dict, config: EncoderConfig,
                  train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Final-layer outputs (B, T, D) for a padded batch of token id sequences."""
    ids = pad_batch(token_seqs, config.max_seq_len)
    B, T = ids.shape
    if ids.max() >= config.vocab_size:
        raise UsageError(f"token id {ids.max()} outside vocabulary of size {config.vocab_size}")
    # (B, 1, 1, T) bias broadcast over heads and query positions
    key_bias = np.where(ids == PAD, _MASK_BIAS, 0.0)[:, None, None, :]
    x = params["tok_emb"][ids] + params["pos_emb"][np.arange(T)]
    x = dc.dropout(x, config.dropout_rate, rng, train_mode)
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        h = dc.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + dc.dropout(_attention(h, params, p, key_bias, config, train_mode, rng),
                           config.dropout_rate, rng, train_mode)
        h = dc.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = dc.gelu(h @ params[p + "ff.w1"] + params[p + "ff.b1"]) @ params[p + "ff.w2"] + params[p + "ff.b2"]
        x = x + dc.dropout(h, config.dropout_rate, rng, train_mode)
    return dc.layer_norm(x, params["final_ln.g"], params["final_ln.b"])


def pool(hidden: Tensor, lengths: Sequence[int]) -> Tensor:
    return dc.masked_mean(hidden, [pool_indices(n) for n in lengths])


def encode_batch(token_seqs: Sequence[Sequence[int]], params: dict, config: EncoderConfig,
                 train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Sentence embeddings (B, d_model) for a batch of token id sequences."""
    hidden = encode_hidden(token_seqs, params, config, train_mode, rng)
    return pool(hidden, [len(s) for s in token_seqs])


def encode(tokens: Sequence[int], params: dict, config: EncoderConfig,
           train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Embedding (d_model,) of a single sentence."""
    return encode_batch([tokens], params, config, train_mode, rng)[0]


def pair_features(u: Tensor, v: Tensor) -> Tensor:
    """concat(u, v, |u - v|) along the last axis."""
    if u.shape != v.shape:
        raise DimensionError(f"pair features need equal shapes, got {u.shape} and {v.shape}")
    return dc.concat([u, v, dc.tabs(u - v)], axis=-1)


def classify_pair(u: Tensor, v: Tensor, head: dict) -> Tensor:
    """Class probabilities for one pair (shape (3,)) or a batch of pairs (shape (N, 3))."""
    feats = pair_features(dc.as_tensor(u), dc.as_tensor(v))
    if feats.shape[-1] != head["head.w1"].shape[0]:
        raise DimensionError(f"head expects features of width {head['head.w1'].shape[0]}, got {feats.shape[-1]}")
    single = feats.ndim == 1
    if single:
        feats = feats.reshape(1, -1)
    hidden = dc.tanh(feats @ head["head.w1"] + head["head.b1"])
    probs = dc.softmax(hidden @ head["head.w2"] + head["head.b2"], temperature=1.0)
    return probs.reshape(-1) if single else probs


def embed_sentences(sentences: Sequence[str], vocab: Vocab, params: dict, config: EncoderConfig,
                    batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings as a plain (n, d_model) array."""
    seqs = [tokenize(s, vocab, config.max_seq_len) for s in sentences]
    # length-sorted batches keep padding small; results are reassembled in input order
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    out = np.zeros((len(seqs), config.d_model))
    with dc.no_grad():
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            out[chunk] = encode_batch([seqs[i] for i in chunk], params, config).data
    return out
