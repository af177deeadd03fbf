"""Causal mediation analysis of a rumour classifier.

Total effects mask whole threads in the input; indirect effects copy hidden
states from the masked run into the unmasked run at chosen layers, positions
and dimensions. Effects are scored with total variation distance (t1) and the
largest per-class probability ratio (t2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import Story
from .model.network import (
    ActivationTrace,
    Patch,
    RumourTransformer,
    forward,
    forward_with_patch,
    run_from_layer,
)
from .model.tokens import TokenizedEvent, mask_threads, tokenize
from .ranking import Ranking, aggregate_rank_sums, competition_ranks, sum_rank

PROB_FLOOR = 1e-9
PROFILE_CHUNK = 32


class UnknownThread(KeyError):
    def __init__(self, thread_id: str):
        super().__init__(thread_id)
        self.thread_id = thread_id


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class EffectScore:
    t1: float
    t2: float


NO_EFFECT = EffectScore(0.0, 1.0)


def tvd(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance, half the L1 distance."""
    return 0.5 * float(np.sum(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))))


def ratio_metric(p: np.ndarray, q: np.ndarray, floor: float = PROB_FLOOR) -> float:
    """Largest per-class ratio max(p/q, q/p), probabilities floored at ``floor``.

    Equal to exp(max_y |log p_y - log q_y|).
    """
    p = np.maximum(np.asarray(p, dtype=float), floor)
    q = np.maximum(np.asarray(q, dtype=float), floor)
    return float(np.max(np.maximum(p / q, q / p)))


def effect(p: np.ndarray, q: np.ndarray) -> EffectScore:
    return EffectScore(tvd(p, q), ratio_metric(p, q))


@dataclass(frozen=True)
class Run:
    event: TokenizedEvent
    probs: np.ndarray
    trace: ActivationTrace


@dataclass(frozen=True)
class TotalEffect:
    score: EffectScore
    null: Run
    masked: Run


def _check_threads(story: Story, thread_ids: Iterable[str]) -> list[str]:
    ids = list(thread_ids)
    known = set(story.thread_ids)
    for tid in ids:
        if tid not in known:
            raise UnknownThread(tid)
    return ids


def null_run(model: RumourTransformer, story: Story) -> Run:
    te = tokenize(story, model.cfg)
    probs, trace = forward(model, te)
    return Run(te, probs, trace)


def masked_run(model: RumourTransformer, null: Run, thread_ids: Iterable[str]) -> Run:
    te = mask_threads(null.event, thread_ids)
    probs, trace = forward(model, te)
    return Run(te, probs, trace)


def total_effect(
    model: RumourTransformer, story: Story, masked_thread_ids: Iterable[str], null: Run | None = None
) -> TotalEffect:
    """Effect on the output of replacing every token of the given threads with [MASK]."""
    ids = _check_threads(story, masked_thread_ids)
    null = null or null_run(model, story)
    masked = masked_run(model, null, ids)
    return TotalEffect(effect(null.probs, masked.probs), null, masked)


def thread_effects(model: RumourTransformer, story: Story) -> tuple[Run, list[TotalEffect]]:
    null = null_run(model, story)
    return null, [total_effect(model, story, [tid], null) for tid in story.thread_ids]


def rank_tweets(model: RumourTransformer, story: Story) -> Ranking:
    """Mask each thread in turn and sum-rank threads by their total effects."""
    _, effects = thread_effects(model, story)
    return sum_rank(
        list(story.thread_ids),
        [e.score.t1 for e in effects],
        [e.score.t2 for e in effects],
    )


def indirect_effect(
    model: RumourTransformer,
    te: TokenizedEvent,
    donor: ActivationTrace,
    layer: int,
    positions: Sequence[int],
    dims: Sequence[int],
    null_probs: np.ndarray | None = None,
) -> EffectScore:
    """Effect of overwriting (positions x dims) at ``layer`` with the donor's values."""
    if null_probs is None:
        null_probs, _ = forward(model, te)
    patched = forward_with_patch(model, te, [Patch(layer, positions, dims, donor)])
    return effect(null_probs, patched)


def word_layers(n_layers: int) -> list[int]:
    """Embeddings plus the first half of the transformer layers, rounded up."""
    return list(range(0, math.ceil(n_layers / 2) + 1))


@dataclass(frozen=True)
class WordRanking:
    thread_id: str
    ranking: Ranking
    per_layer: dict[int, Ranking]


def word_id(word: str, start: int) -> str:
    return f"{word}@{start}"


def rank_words(
    model: RumourTransformer,
    story: Story,
    target_thread_id: str,
    layers: Sequence[int] | None = None,
) -> WordRanking:
    """Rank the words of one thread by their indirect effects.

    The donor is the run with the whole thread masked. Each word's positions
    (all dimensions) are patched one layer at a time; per-layer sum ranks are
    added up across layers. The reported t1/t2 are means over layers.
    """
    _check_threads(story, [target_thread_id])
    null = null_run(model, story)
    masked = masked_run(model, null, [target_thread_id])
    words = null.event.thread_words(target_thread_id)
    ids = [word_id(w.word, w.start) for w in words]
    layers = word_layers(model.cfg.n_layers) if layers is None else list(layers)
    dims = range(model.cfg.d_model)

    per_layer: dict[int, Ranking] = {}
    t1_sum = np.zeros(len(words))
    t2_sum = np.zeros(len(words))
    r1_sum = np.zeros(len(words), dtype=int)
    r2_sum = np.zeros(len(words), dtype=int)
    for layer in layers:
        scores = [
            indirect_effect(model, null.event, masked.trace, layer, list(w.positions), dims, null.probs)
            for w in words
        ]
        t1 = [s.t1 for s in scores]
        t2 = [s.t2 for s in scores]
        per_layer[layer] = sum_rank(ids, t1, t2)
        t1_sum += t1
        t2_sum += t2
        r1_sum += competition_ranks(t1)
        r2_sum += competition_ranks(t2)
    n = max(len(layers), 1)
    ranking = aggregate_rank_sums(ids, t1_sum / n, t2_sum / n, r1_sum, r2_sum)
    return WordRanking(target_thread_id, ranking, per_layer)


# --------------------------------------------------------------------------- dataset-level analyses


def analysis_target(model: RumourTransformer, story: Story, target: str = "gold") -> str:
    """Thread to mask for dataset-level analyses: gold turnaround, else the CMA-R top thread."""
    if target == "gold" and story.turnaround_thread_id is not None:
        return story.turnaround_thread_id
    if target not in ("gold", "cma"):
        raise ValueError(f"unknown target policy {target!r}")
    return rank_tweets(model, story).top


def single_neuron_effects(model: RumourTransformer, null: Run, masked: Run, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """t1 and t2 for every (position, dimension) at ``layer`` patched on its own.

    Entries whose donor value equals the unpatched value cannot change the
    output and keep the no-effect scores (0, 1) without a forward pass.
    """
    base = null.trace.hidden[layer]
    donor = masked.trace.hidden[layer]
    T, d = base.shape
    t1 = np.zeros(T * d)
    t2 = np.ones(T * d)
    flat = torch.nonzero((base != donor).reshape(-1)).reshape(-1)
    for start in range(0, len(flat), PROFILE_CHUNK):
        chunk = flat[start : start + PROFILE_CHUNK]
        pos, dim = chunk // d, chunk % d
        states = base.expand(len(chunk), T, d).clone()
        states[torch.arange(len(chunk)), pos, dim] = donor[pos, dim]
        probs = run_from_layer(model, null.event, states, layer)
        for k, idx in enumerate(chunk.tolist()):
            t1[idx] = tvd(null.probs, probs[k])
            t2[idx] = ratio_metric(null.probs, probs[k])
    return t1, t2


@dataclass(frozen=True)
class ProfileRow:
    layer: int
    mean_top_t1: float
    mean_top_t2: float


def _top_mean(values: np.ndarray, k: int) -> float:
    return float(np.mean(np.sort(values)[::-1][:k]))


def layer_profile(
    model: RumourTransformer,
    stories: Sequence[Story],
    top_k: int = 10,
    target: str = "gold",
) -> list[ProfileRow]:
    """Per layer, the mean of each story's top-k single-neuron indirect effects, averaged over stories."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not stories:
        raise EmptyDataset("layer profile needs at least one story")
    L = model.cfg.n_layers
    acc_t1 = np.zeros(L + 1)
    acc_t2 = np.zeros(L + 1)
    for story in stories:
        null = null_run(model, story)
        masked = masked_run(model, null, [analysis_target(model, story, target)])
        for layer in range(L + 1):
            t1, t2 = single_neuron_effects(model, null, masked, layer)
            acc_t1[layer] += _top_mean(t1, top_k)
            acc_t2[layer] += _top_mean(t2, top_k)
    n = len(stories)
    return [ProfileRow(layer, acc_t1[layer] / n, acc_t2[layer] / n) for layer in range(L + 1)]


def average_total_effect(
    model: RumourTransformer, stories: Sequence[Story], target: str = "gold"
) -> tuple[float, float]:
    """Mean (t1, t2) of masking each story's target thread."""
    if not stories:
        raise EmptyDataset("average total effect needs at least one story")
    scores = [total_effect(model, s, [analysis_target(model, s, target)]).score for s in stories]
    return (
        float(np.mean([s.t1 for s in scores])),
        float(np.mean([s.t2 for s in scores])),
    )
