"""Cross-entropy, supervised contrastive and interpolated training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .batching import AnchorGroup
from .diffcore import Tensor
from .errors import ParameterError, UsageError

ALL = None  # an uncapped selection
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 0.5
    tau: float = 1.0
    n_pos_cap: int | None = ALL
    n_neg_cap: int | None = ALL
    normalize_embeddings: bool = True

    def __post_init__(self):
        check_lambda(self.lam)
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        for cap in (self.n_pos_cap, self.n_neg_cap):
            if cap is not None and cap < 1:
                raise ParameterError(f"selection caps must be positive or ALL, got {cap}")


def check_lambda(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-probability of the true class over the batch.

    ``probs`` is (N, C) predicted probabilities; ``labels`` is either N class
    ids or an (N, C) one-hot matrix. Probabilities are floored at 1e-12
    before the log.
    """
    probs = dc.as_tensor(probs)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise UsageError(f"cross_entropy needs a nonempty (N, C) probability matrix, got {probs.shape}")
    onehot = np.asarray(labels)
    if onehot.ndim == 1:
        ids = onehot.astype(np.intp)
        if ids.shape[0] != probs.shape[0] or ids.min() < 0 or ids.max() >= probs.shape[1]:
            raise UsageError("cross_entropy: labels do not match the probability matrix")
        onehot = np.zeros(probs.shape)
        onehot[np.arange(len(ids)), ids] = 1.0
    elif onehot.shape != probs.shape:
        raise UsageError(f"cross_entropy: label shape {onehot.shape} != probability shape {probs.shape}")
    logp = dc.log(dc.clamp_min(probs, PROB_FLOOR))
    return -(dc.tsum(logp * onehot) * (1.0 / probs.shape[0]))


def _validate_groups(groups: Sequence[AnchorGroup], n: int) -> None:
    if not groups:
        raise UsageError("supervised_contrastive needs at least one anchor group")
    for g in groups:
        if not g.positives:
            raise UsageError(f"anchor {g.anchor} has no positives; such groups must be dropped upstream")
        idx = (g.anchor, *g.positives, *g.negatives)
        if min(idx) < 0 or max(idx) >= n:
            raise UsageError(f"anchor group {g} indexes outside {n} embeddings")


def supervised_contrastive(embeddings, groups: Sequence[AnchorGroup], tau: float,
                           normalize: bool = True) -> Tensor:
    """Mean over anchor groups of the per-anchor supervised contrastive loss.

    For anchor a with positives P and negatives N, the loss is
    -1/|P| * sum_{p in P} log(exp(s_ap / tau) / sum_{k in P u N} exp(s_ak / tau))
    with s the dot product of (optionally L2-normalised) embeddings. The anchor
    is never part of its own denominator.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    emb = embeddings if isinstance(embeddings, Tensor) else dc.stack(list(embeddings))
    _validate_groups(groups, emb.shape[0])
    if normalize:
        emb = dc.l2_normalize(emb)
    G, S = len(groups), emb.shape[0]
    anchors = np.array([g.anchor for g in groups], dtype=np.intp)
    cand = np.zeros((G, S), dtype=bool)
    pos = np.zeros((G, S))
    for i, g in enumerate(groups):
        cand[i, list(g.positives) + list(g.negatives)] = True
        pos[i, list(g.positives)] = 1.0 / len(g.positives)
    sims = emb[anchors] @ emb.T
    logp = dc.log_softmax(sims, temperature=tau, mask=cand)
    per_anchor = -dc.tsum(logp * pos, axis=-1)
    return dc.mean(per_anchor)


def per_anchor_contrastive(embeddings, groups: Sequence[AnchorGroup], tau: float,
                           normalize: bool = True) -> np.ndarray:
    """Unreduced per-anchor losses as a plain array (no graph)."""
    with dc.no_grad():
        emb = embeddings if isinstance(embeddings, Tensor) else dc.stack(list(embeddings))
        _validate_groups(groups, emb.shape[0])
        return np.array([supervised_contrastive(emb, [g], tau, normalize).item() for g in groups])


def combined_loss(ce, scl, lam: float):
    """(1 - lam) * ce + lam * scl; the endpoints return the selected term itself."""
    check_lambda(lam)
    if lam == 0.0:
        return ce
    if lam == 1.0:
        return scl
    return (1.0 - lam) * ce + lam * scl
