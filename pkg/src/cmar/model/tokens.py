"""Hash-bucket tokenizer with thread and word span bookkeeping.

One-tier layout::

    [CLS] w w w [SEP] w w [SEP] ...     (every tweet closed by [SEP])

Two-tier layout prefixes every thread block with its own [CLS]::

    [CLS] [CLS] w w [SEP] w [SEP] [CLS] w w w [SEP] ...

Position 0 is always the story-level [CLS] read by the classifier head.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from ..data import Story, Thread
from .config import Arch, ModelConfig

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
N_SPECIALS = 4
SPECIAL_IDS = frozenset({PAD_ID, CLS_ID, SEP_ID, MASK_ID})
DESCRIPTION_KEY = "<description>"

_WORD_RE = re.compile(r"\w+")


class TokenizeError(ValueError):
    pass


class EmptyInput(TokenizeError):
    pass


def words_of(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def bucket(word: str, vocab_buckets: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return N_SPECIALS + int.from_bytes(digest, "little") % vocab_buckets


@dataclass(frozen=True)
class WordSpan:
    word: str
    thread_id: str
    start: int
    stop: int

    @property
    def positions(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class TokenizedEvent:
    token_ids: tuple[int, ...]
    thread_spans: dict[str, tuple[range, ...]]
    word_spans: tuple[WordSpan, ...]
    # block index per position for two-tier attention; -1 marks the story [CLS]
    segments: tuple[int, ...] = field(repr=False)
    arch: Arch = Arch.ONE_TIER

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def cls_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.token_ids) if t == CLS_ID)

    @property
    def sep_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.token_ids) if t == SEP_ID)

    @property
    def mask_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.token_ids) if t == MASK_ID)

    @property
    def special_positions(self) -> frozenset[int]:
        words = {p for w in self.word_spans for p in w.positions}
        return frozenset(i for i in range(len(self)) if i not in words)

    def thread_positions(self, thread_id: str) -> list[int]:
        return [p for r in self.thread_spans[thread_id] for p in r]

    def thread_words(self, thread_id: str) -> list[WordSpan]:
        return [w for w in self.word_spans if w.thread_id == thread_id]


def mask_positions(te: TokenizedEvent, positions: Iterable[int]) -> TokenizedEvent:
    """Replace tokens at ``positions`` by [MASK] in place; spans are unchanged."""
    ids = list(te.token_ids)
    for p in positions:
        ids[p] = MASK_ID
    return replace(te, token_ids=tuple(ids))


def mask_threads(te: TokenizedEvent, thread_ids: Iterable[str]) -> TokenizedEvent:
    positions = []
    for tid in thread_ids:
        if tid not in te.thread_spans:
            raise KeyError(tid)
        positions.extend(te.thread_positions(tid))
    return mask_positions(te, positions)


def _kept_length(tweets: Sequence[Sequence[str]], k: int) -> int:
    """Tokens used by the first k words of a segment, [SEP]s included."""
    used, left = 0, k
    for tw in tweets:
        if left <= 0:
            break
        take = min(left, len(tw))
        used += take + 1
        left -= take
    return used


def _truncate(segments: list[list[list[str]]], budget: int) -> list[int]:
    """Number of leading words kept per segment so the total fits ``budget``.

    Each non-empty segment keeps at least one word. The remaining budget goes
    word by word to the segment furthest below its proportional share.
    """
    n_words = [sum(len(t) for t in seg) for seg in segments]
    full = [_kept_length(seg, n) for seg, n in zip(segments, n_words)]
    if sum(full) <= budget:
        return n_words
    keep = [min(1, n) for n in n_words]
    used = [_kept_length(seg, k) for seg, k in zip(segments, keep)]
    if sum(used) > budget:
        raise TokenizeError("max_len too small to keep one word per thread")
    total = sum(full)
    target = [budget * f / total for f in full]

    def step_cost(i: int) -> int:
        return _kept_length(segments[i], keep[i] + 1) - used[i]

    remaining = budget - sum(used)
    while True:
        best, best_deficit = None, None
        for i in range(len(segments)):
            if keep[i] < n_words[i] and step_cost(i) <= remaining:
                deficit = target[i] - used[i]
                if best is None or deficit > best_deficit:
                    best, best_deficit = i, deficit
        if best is None:
            break
        c = step_cost(best)
        keep[best] += 1
        used[best] += c
        remaining -= c
    if remaining == 1:
        # only tweet-opening words (cost 2) are left: give back a mid-tweet word elsewhere
        donors = [
            i for i in range(len(segments))
            if keep[i] > 1 and _kept_length(segments[i], keep[i] - 1) == used[i] - 1
        ]
        for i in sorted(donors, key=lambda i: target[i] - used[i]):
            takers = [j for j in range(len(segments)) if j != i and keep[j] < n_words[j] and step_cost(j) == 2]
            if takers:
                j = max(takers, key=lambda j: (target[j] - used[j], -j))
                keep[i] -= 1
                used[i] -= 1
                keep[j] += 1
                used[j] += 2
                break
    return keep


def tokenize(event: Story | Thread, cfg: ModelConfig) -> TokenizedEvent:
    if isinstance(event, Thread):
        keys, texts = [event.id], [[t.text for t in event.tweets]]
        description = None
    else:
        keys = list(event.thread_ids)
        texts = [[t.text for t in th.tweets] for th in event.threads]
        description = event.description if cfg.include_description else None
    if description is not None:
        keys.insert(0, DESCRIPTION_KEY)
        texts.insert(0, [description])

    segments = [[w for w in (words_of(t) for t in tweets) if w] for tweets in texts]
    if not any(segments):
        raise EmptyInput("event has no words after normalization")

    two_tier = cfg.arch is Arch.TWO_TIER
    budget = cfg.max_len - 1 - (len(segments) if two_tier else 0)
    if budget < sum(1 for s in segments if s) * 2:
        raise TokenizeError("max_len too small to keep one word per thread")
    keep = _truncate(segments, budget)

    ids = [CLS_ID]
    seg_of = [-1]
    spans: dict[str, list[range]] = {}
    word_spans: list[WordSpan] = []
    for si, (key, tweets, k) in enumerate(zip(keys, segments, keep)):
        runs: list[range] = []
        if two_tier:
            ids.append(CLS_ID)
            seg_of.append(si)
        left = k
        for tw in tweets:
            if left <= 0:
                break
            start = len(ids)
            for w in tw[:left]:
                word_spans.append(WordSpan(w, key, len(ids), len(ids) + 1))
                ids.append(bucket(w, cfg.vocab_buckets))
                seg_of.append(si)
            left -= min(left, len(tw))
            runs.append(range(start, len(ids)))
            ids.append(SEP_ID)
            seg_of.append(si)
        spans[key] = tuple(runs)
    return TokenizedEvent(tuple(ids), spans, tuple(word_spans), tuple(seg_of), cfg.arch)
