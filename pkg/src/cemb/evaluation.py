"""STS rank-correlation scoring and k-fold logistic-regression probes over frozen embeddings."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, UsageError

Embedder = Callable[[Sequence[str]], np.ndarray]


@dataclass(frozen=True)
class StsPair:
    sentence_a: str
    sentence_b: str
    gold_score: float
    subset_name: str = "default"

    def __post_init__(self):
        if not 0.0 <= self.gold_score <= 5.0:
            raise UsageError(f"gold score {self.gold_score} outside [0, 5]")


@dataclass
class ProbeTask:
    name: str
    examples: list  # (text, label) or ((text_a, text_b), label)
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise UsageError(f"probe task {self.name!r} needs at least 2 classes")
        for _, label in self.examples:
            if not 0 <= label < self.n_classes:
                raise UsageError(f"probe task {self.name!r}: label {label} outside [0, {self.n_classes})")

    @property
    def is_pair_task(self) -> bool:
        return bool(self.examples) and isinstance(self.examples[0][0], tuple)


@dataclass
class EvalReport:
    scores: dict[str, float]
    details: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else float("nan")

    def to_dict(self) -> dict:
        return {"scores": self.scores, "average": self.average, "details": self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_table(self, row_name: str = "model") -> str:
        return format_table([row_name], [self], first_header="Model")


def format_table(row_names: Sequence[str], reports: Sequence[EvalReport], first_header: str = "Model") -> str:
    """Aligned plain-text table, one row per report, scores with two decimals plus an Avg. column."""
    tasks = list(reports[0].scores) if reports else []
    header = [first_header, *tasks, "Avg."]
    rows = [[name, *(f"{r.scores[t]:.2f}" for t in tasks), f"{r.average:.2f}"]
            for name, r in zip(row_names, reports)]
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    fmt = lambda row: " | ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)  # noqa: E731
                                 for i, (c, w) in enumerate(zip(row, widths)))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *map(fmt, rows)]) + "\n"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CEMB_THREADS", "1")))
    except ValueError:
        return 1


def _embedder(model) -> Embedder:
    return model.embed if hasattr(model, "embed") else model


# --- similarity and correlation --------------------------------------------------


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine similarity is undefined for a zero-norm vector")
    return np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)


def spearman(x, y) -> float:
    """Pearson correlation of average-tie fractional ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError(f"spearman needs equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UsageError("spearman needs at least 2 observations")
    rx, ry = rankdata(x) - (x.size + 1) / 2.0, rankdata(y) - (y.size + 1) / 2.0
    sxx, syy = float(np.dot(rx, rx)), float(np.dot(ry, ry))
    if sxx == 0 or syy == 0:
        raise UsageError("spearman is undefined for a constant input")
    # one sqrt of the product keeps identical rankings at exactly 1.0
    return float(np.clip(np.dot(rx, ry) / math.sqrt(sxx * syy), -1.0, 1.0))


# --- STS ---------------------------------------------------------------------------


def eval_sts(pairs: Sequence[StsPair], model) -> dict:
    """Size-weighted mean of per-subset Spearman(cosine, gold), scaled by 100.

    ``model`` is a checkpoint (anything with ``.embed``) or a callable
    mapping sentences to an embedding matrix.
    """
    if not pairs:
        raise UsageError("eval_sts needs at least one pair")
    embed = _embedder(model)
    sentences = list(dict.fromkeys(s for p in pairs for s in (p.sentence_a, p.sentence_b)))
    where = {s: i for i, s in enumerate(sentences)}
    emb = np.asarray(embed(sentences), dtype=np.float64)

    subsets: dict[str, list[StsPair]] = {}
    for p in pairs:
        subsets.setdefault(p.subset_name, []).append(p)
    per_subset = {}
    for name, sub in subsets.items():
        if len(sub) < 2:
            raise UsageError(f"STS subset {name!r} has fewer than 2 pairs")
        sims = rowwise_cosine(emb[[where[p.sentence_a] for p in sub]], emb[[where[p.sentence_b] for p in sub]])
        try:
            per_subset[name] = (spearman(sims, [p.gold_score for p in sub]), len(sub))
        except UsageError as exc:
            raise UsageError(f"STS subset {name!r}: {exc}") from exc
    total = sum(n for _, n in per_subset.values())
    weighted = sum(rho * n for rho, n in per_subset.values()) / total
    return {"score": 100.0 * weighted, "subsets": {k: {"spearman": r, "n": n} for k, (r, n) in per_subset.items()}}


def eval_sts_tasks(tasks: dict[str, Sequence[StsPair]], model) -> EvalReport:
    results = {name: eval_sts(pairs, model) for name, pairs in tasks.items()}
    return EvalReport({k: v["score"] for k, v in results.items()},
                      {k: v["subsets"] for k, v in results.items()})


# --- transfer probes -------------------------------------------------------------------


def fold_assignment(n: int, n_folds: int, seed: int) -> np.ndarray:
    """Fold id per example; a seeded partition whose fold sizes differ by at most one."""
    if n < n_folds:
        raise UsageError(f"{n} examples cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.intp)
    folds[order] = np.arange(n) % n_folds
    return folds


@dataclass
class LogisticRegression:
    """Multinomial logistic regression fit by full-batch gradient descent.

    L2 penalty on weights only; features are standardised with training
    statistics. Stops when the gradient norm drops below ``tol``.
    """

    n_classes: int
    reg: float = 1e-3
    tol: float = 1e-6
    max_iter: int = 5000
    weights: np.ndarray | None = None
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None
    n_iter: int = 0

    def _design(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mu) / self.sd
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LogisticRegression":
        self.mu = x.mean(axis=0)
        sd = x.std(axis=0)
        self.sd = np.where(sd > 1e-12, sd, 1.0)
        X = self._design(x)
        n, d = X.shape
        Y = np.zeros((n, self.n_classes))
        Y[np.arange(n), y] = 1.0
        penalty = np.ones((d, 1))
        penalty[-1] = 0.0
        # softmax log-loss Hessian is bounded by 0.5 * X^T X / n (per class block)
        lipschitz = 0.5 * np.linalg.norm(X, 2) ** 2 / n + self.reg
        lr = 1.0 / lipschitz
        W = np.zeros((d, self.n_classes))
        for it in range(self.max_iter):
            logits = X @ W
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            grad = X.T @ (P - Y) / n + self.reg * penalty * W
            if np.linalg.norm(grad) < self.tol:
                break
            W -= lr * grad
        self.n_iter = it + 1
        self.weights = W
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self._design(x) @ self.weights, axis=1)


def probe_features(task: ProbeTask, embed: Embedder) -> np.ndarray:
    if task.is_pair_task:
        a = np.asarray(embed([ex[0][0] for ex in task.examples]))
        b = np.asarray(embed([ex[0][1] for ex in task.examples]))
        return np.hstack([a, b, np.abs(a - b)])
    return np.asarray(embed([ex[0] for ex in task.examples]))


def cross_validate(features: np.ndarray, labels: np.ndarray, n_classes: int, n_folds: int = 10,
                   seed: int = 0, **lr_kw) -> float:
    """Mean held-out accuracy (x100) of the logistic probe over seeded folds."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    folds = fold_assignment(len(labels), n_folds, seed)
    accs = []
    for k in range(n_folds):
        test = folds == k
        clf = LogisticRegression(n_classes, **lr_kw).fit(features[~test], labels[~test])
        accs.append(np.mean(clf.predict(features[test]) == labels[test]))
    return 100.0 * float(np.mean(accs))


def eval_probe(task: ProbeTask, model, seed: int = 0, n_folds: int = 10) -> float:
    if len(task.examples) < n_folds:
        raise UsageError(f"probe task {task.name!r} has {len(task.examples)} examples, fewer than {n_folds} folds")
    feats = probe_features(task, _embedder(model))
    return cross_validate(feats, np.array([lab for _, lab in task.examples]), task.n_classes, n_folds, seed)


def eval_transfer(tasks: Sequence[ProbeTask], model, seed: int = 0) -> EvalReport:
    """Probe accuracy per task; tasks may run in parallel (CEMB_THREADS) but report in input order."""
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        scores = list(pool.map(lambda t: eval_probe(t, model, seed), tasks))
    return EvalReport({t.name: s for t, s in zip(tasks, scores)})
