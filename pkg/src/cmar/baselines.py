"""Comparison interpreters: attention, integrated gradients, a local linear surrogate, random.

Each reduces to per-word weights, averages them per thread and ranks threads
largest first with ties in story order, like the CMA-R ranking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Story
from .model.network import (
    RumourTransformer,
    argmax_label,
    embeddings,
    forward,
    forward_batch,
    logits_from_embeddings,
)
from .model.tokens import MASK_ID, TokenizedEvent, mask_positions, tokenize
from .ranking import Ranking, score_rank

IG_BATCH = 32
IG_RULES = ("right", "midpoint")
SURROGATE_BATCH = 128


class DegenerateDesign(ValueError):
    pass


def story_seed(seed: int, story_id: str) -> int:
    """Per-story seed that does not depend on processing order."""
    digest = hashlib.sha256(f"{seed}:{story_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def thread_scores(story: Story, te: TokenizedEvent, word_weights: Sequence[float]) -> list[float]:
    """Mean word weight per thread, in story order; a thread with no words scores 0."""
    per_thread: dict[str, list[float]] = {tid: [] for tid in story.thread_ids}
    for span, w in zip(te.word_spans, word_weights):
        if span.thread_id in per_thread:
            per_thread[span.thread_id].append(float(w))
    return [float(np.mean(v)) if v else 0.0 for v in per_thread.values()]


def _rank(story: Story, te: TokenizedEvent, word_weights: Sequence[float]) -> Ranking:
    return score_rank(list(story.thread_ids), thread_scores(story, te, word_weights))


# --------------------------------------------------------------------------- attention


def received_attention(te: TokenizedEvent, attention: np.ndarray) -> np.ndarray:
    """Attention into each position, averaged over layers, heads and non-special queries."""
    specials = te.special_positions
    queries = [i for i in range(len(te)) if i not in specials]
    return attention[:, :, queries, :].mean(axis=(0, 1, 2))


def attention_word_weights(model: RumourTransformer, te: TokenizedEvent) -> np.ndarray:
    _, trace = forward(model, te)
    received = received_attention(te, trace.attention.numpy())
    return np.array([received[list(w.positions)].mean() for w in te.word_spans])


def attention_rank(model: RumourTransformer, story: Story) -> Ranking:
    te = tokenize(story, model.cfg)
    return _rank(story, te, attention_word_weights(model, te))


# --------------------------------------------------------------------------- gradients


@dataclass(frozen=True)
class Attribution:
    attributions: np.ndarray  # (seq_len, d_model)
    word_weights: np.ndarray  # one per word span
    logit_input: float
    logit_baseline: float

    @property
    def completeness_gap(self) -> float:
        """Relative mismatch between summed attributions and the logit difference."""
        delta = self.logit_input - self.logit_baseline
        return abs(float(self.attributions.sum()) - delta) / abs(delta)


def baseline_state(model: RumourTransformer, te: TokenizedEvent, baseline: str) -> torch.Tensor:
    if baseline == "zero":
        return torch.zeros(len(te), model.cfg.d_model, dtype=torch.float64)
    if baseline == "mask":
        words = [p for w in te.word_spans for p in w.positions]
        return embeddings(model, mask_positions(te, words))
    raise ValueError(f"unknown baseline {baseline!r}")


def _word_norms(te: TokenizedEvent, attributions: np.ndarray) -> np.ndarray:
    return np.array([np.linalg.norm(attributions[list(w.positions)]) for w in te.word_spans])


def integrated_gradients(
    model: RumourTransformer,
    te: TokenizedEvent,
    target: int,
    steps: int = 64,
    baseline: str = "mask",
    rule: str = "midpoint",
) -> Attribution:
    """Integrated gradients of the target logit over the layer-0 state.

    Gradients are averaged at the m points b + a_k (x - b) and multiplied by
    (x - b). ``rule="right"`` uses a_k = k/m, k = 1..m; ``rule="midpoint"``
    uses a_k = (k - 1/2)/m, whose error shrinks as 1/m^2 instead of 1/m.
    A word's weight is the L2 norm of its attributions.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if rule not in IG_RULES:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    x = embeddings(model, te)
    b = baseline_state(model, te, baseline)
    offset = 0.5 if rule == "midpoint" else 0.0
    alphas = (torch.arange(1, steps + 1, dtype=torch.float64) - offset) / steps
    total = np.zeros(x.shape)
    for start in range(0, steps, IG_BATCH):
        a = alphas[start : start + IG_BATCH, None, None]
        _, grads = logits_from_embeddings(model, te, b + a * (x - b), target)
        total += grads.sum(axis=0)
    attributions = (x - b).numpy() * (total / steps)
    ends, _ = logits_from_embeddings(model, te, torch.stack([x, b]), target)
    return Attribution(attributions, _word_norms(te, attributions), float(ends[0]), float(ends[1]))


def grad_x_input(model: RumourTransformer, te: TokenizedEvent, target: int) -> Attribution:
    x = embeddings(model, te)
    logit, grads = logits_from_embeddings(model, te, x[None], target)
    attributions = x.numpy() * grads[0]
    return Attribution(attributions, _word_norms(te, attributions), float(logit[0]), float("nan"))


def gradient_rank(
    model: RumourTransformer,
    story: Story,
    steps: int = 64,
    baseline: str = "mask",
    method: str = "ig",
    rule: str = "midpoint",
) -> Ranking:
    """Rank threads by mean word attribution norm for the predicted class."""
    te = tokenize(story, model.cfg)
    probs, _ = forward(model, te)
    target = int(argmax_label(probs))
    if method == "ig":
        attr = integrated_gradients(model, te, target, steps, baseline, rule)
    elif method == "grad_x_input":
        attr = grad_x_input(model, te, target)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return _rank(story, te, attr.word_weights)


# --------------------------------------------------------------------------- local surrogate


def weighted_ridge(X: np.ndarray, y: np.ndarray, w: np.ndarray, alpha: float = 1.0) -> tuple[np.ndarray, float]:
    """Weighted ridge regression with an unpenalized intercept.

    Solves (Xc' W Xc + alpha I) beta = Xc' W yc on the weighted-mean-centred
    design Xc and target yc.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.all(y == y[0]):
        return np.zeros(X.shape[1]), float(y[0])
    x_mean = w @ X / w.sum()
    y_mean = w @ y / w.sum()
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ (w[:, None] * Xc) + alpha * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (w * yc))
    return coef, float(y_mean - x_mean @ coef)


def proximity_weights(Z: np.ndarray, kernel_width: float = 0.5) -> np.ndarray:
    """exp(-(1 - cos)^2 / width^2), cos = cosine between each presence vector and all-ones."""
    Z = np.asarray(Z, dtype=float)
    present = Z.sum(axis=1)
    cos = np.sqrt(present / Z.shape[1])
    return np.exp(-((1.0 - cos) ** 2) / kernel_width**2)


@dataclass(frozen=True)
class SurrogateFit:
    presence: np.ndarray  # (n_samples, n_words) 0/1
    target_probs: np.ndarray
    weights: np.ndarray
    coef: np.ndarray
    intercept: float


def local_surrogate(
    model: RumourTransformer,
    te: TokenizedEvent,
    n_samples: int = 500,
    seed: int = 0,
    kernel_width: float = 0.5,
    alpha: float = 1.0,
    target: int | None = None,
) -> SurrogateFit:
    """Fit a locally weighted linear model of the target-class probability on word presence."""
    if n_samples < 50:
        raise ValueError("n_samples must be >= 50")
    if target is None:
        probs, _ = forward(model, te)
        target = int(argmax_label(probs))
    rng = np.random.default_rng(seed)
    W = len(te.word_spans)
    for _ in range(2):
        Z = (rng.random((n_samples, W)) >= 0.5).astype(np.int8)
        if not np.all(Z == Z[0]):
            break
    else:
        raise DegenerateDesign("every perturbation sample is identical")

    base = np.asarray(te.token_ids)
    ids = np.tile(base, (n_samples, 1))
    for j, span in enumerate(te.word_spans):
        absent = Z[:, j] == 0
        ids[np.ix_(absent, list(span.positions))] = MASK_ID
    y = np.concatenate(
        [forward_batch(model, te, ids[i : i + SURROGATE_BATCH])[:, target] for i in range(0, n_samples, SURROGATE_BATCH)]
    )
    weights = proximity_weights(Z, kernel_width)
    coef, intercept = weighted_ridge(Z, y, weights, alpha)
    return SurrogateFit(Z, y, weights, coef, intercept)


def local_surrogate_rank(
    model: RumourTransformer,
    story: Story,
    n_samples: int = 500,
    seed: int = 0,
    kernel_width: float = 0.5,
    alpha: float = 1.0,
) -> Ranking:
    te = tokenize(story, model.cfg)
    fit = local_surrogate(model, te, n_samples, seed, kernel_width, alpha)
    return _rank(story, te, fit.coef)


# --------------------------------------------------------------------------- random


def random_rank(story: Story, seed: int) -> Ranking:
    """Uniformly random thread order."""
    k = len(story.threads)
    perm = np.random.default_rng(seed).permutation(k)
    scores = np.empty(k)
    scores[perm] = np.arange(k, 0, -1)
    return score_rank(list(story.thread_ids), scores.tolist())
