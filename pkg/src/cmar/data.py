"""Story types, JSON-lines ingestion, synthetic generation and stratified splits."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    pass


class MalformedLine(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(DataError):
    def __init__(self, id: str):
        super().__init__(f"duplicate id {id!r}")
        self.id = id


class DanglingParent(DataError):
    def __init__(self, tweet_id: str):
        super().__init__(f"comment {tweet_id!r} does not root at its thread's source")
        self.tweet_id = tweet_id


class DanglingTurnaround(DataError):
    def __init__(self, story_id: str):
        super().__init__(f"story {story_id!r}: turnaround_thread_id names no thread")
        self.story_id = story_id


class InvalidConfig(DataError):
    pass


class InvalidRatios(DataError):
    pass


class Label(enum.IntEnum):
    TRUE = 0
    FALSE = 1
    UNVERIFIED = 2

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> "Label":
        try:
            return cls[value.upper()]
        except KeyError:
            raise ValueError(f"unknown veracity label {value!r}") from None


@dataclass(frozen=True)
class Tweet:
    id: str
    text: str
    parent_id: str | None = None


@dataclass(frozen=True)
class Thread:
    source: Tweet
    comments: tuple[Tweet, ...] = ()

    @property
    def id(self) -> str:
        return self.source.id

    @property
    def tweets(self) -> tuple[Tweet, ...]:
        return (self.source, *self.comments)


@dataclass(frozen=True)
class Story:
    id: str
    description: str
    threads: tuple[Thread, ...]
    label: Label
    turnaround_thread_id: str | None = None

    def __post_init__(self) -> None:
        _validate_story(self)

    @property
    def thread_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.threads)

    def thread(self, thread_id: str) -> Thread:
        for t in self.threads:
            if t.id == thread_id:
                return t
        raise KeyError(thread_id)


@dataclass(frozen=True)
class Provenance:
    kind: str  # "loaded" | "synthetic"
    seed: int | None = None
    config_digest: str | None = None


@dataclass(frozen=True)
class Dataset:
    stories: tuple[Story, ...]
    provenance: Provenance = field(default_factory=lambda: Provenance("loaded"))

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for s in self.stories:
            if s.id in seen:
                raise DuplicateId(s.id)
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.stories)

    def __iter__(self):
        return iter(self.stories)

    def by_id(self, story_id: str) -> Story:
        for s in self.stories:
            if s.id == story_id:
                return s
        raise KeyError(story_id)


def _validate_story(story: Story) -> None:
    if not story.id:
        raise DataError("story id must be non-empty")
    if not story.threads:
        raise DataError(f"story {story.id!r} has no threads")
    seen: set[str] = set()
    for thread in story.threads:
        if thread.source.parent_id is not None:
            raise DataError(f"source tweet {thread.source.id!r} must not have a parent")
        members = {}
        for tweet in thread.tweets:
            if not tweet.id:
                raise DataError(f"story {story.id!r}: empty tweet id")
            if tweet.id in seen:
                raise DuplicateId(tweet.id)
            seen.add(tweet.id)
            members[tweet.id] = tweet
        for tweet in thread.comments:
            # walk to the root; a cycle or a foreign parent never reaches it
            cur, steps = tweet, 0
            while cur.parent_id is not None and steps <= len(members):
                if cur.parent_id not in members:
                    raise DanglingParent(tweet.id)
                cur = members[cur.parent_id]
                steps += 1
            if cur is not thread.source:
                raise DanglingParent(tweet.id)
    if story.turnaround_thread_id is not None and story.turnaround_thread_id not in story.thread_ids:
        raise DanglingTurnaround(story.id)


# --------------------------------------------------------------------------- JSON

_STORY_KEYS = {"id", "description", "label", "turnaround_thread_id", "threads"}
_THREAD_KEYS = {"source", "comments"}
_SOURCE_KEYS = {"id", "text"}
_COMMENT_KEYS = {"id", "text", "parent_id"}


def _check_keys(obj: object, allowed: set[str], what: str) -> dict:
    if not isinstance(obj, dict):
        raise ValueError(f"{what} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown field(s) in {what}: {sorted(unknown)}")
    missing = allowed - set(obj)
    if missing:
        raise ValueError(f"missing field(s) in {what}: {sorted(missing)}")
    return obj


def _str(value: object, what: str) -> str:
    if not isinstance(value, str):
        raise ValueError(f"{what} must be a string")
    return value


def story_from_dict(obj: object) -> Story:
    """Parse one story object; raises ValueError on schema violations."""
    obj = _check_keys(obj, _STORY_KEYS, "story")
    threads = []
    if not isinstance(obj["threads"], list):
        raise ValueError("threads must be a list")
    for t in obj["threads"]:
        t = _check_keys(t, _THREAD_KEYS, "thread")
        src = _check_keys(t["source"], _SOURCE_KEYS, "source tweet")
        if not isinstance(t["comments"], list):
            raise ValueError("comments must be a list")
        comments = []
        for c in t["comments"]:
            c = _check_keys(c, _COMMENT_KEYS, "comment")
            comments.append(Tweet(_str(c["id"], "id"), _str(c["text"], "text"), _str(c["parent_id"], "parent_id")))
        threads.append(Thread(Tweet(_str(src["id"], "id"), _str(src["text"], "text")), tuple(comments)))
    turnaround = obj["turnaround_thread_id"]
    if turnaround is not None:
        turnaround = _str(turnaround, "turnaround_thread_id")
    return Story(
        id=_str(obj["id"], "id"),
        description=_str(obj["description"], "description"),
        threads=tuple(threads),
        label=Label.parse(_str(obj["label"], "label")),
        turnaround_thread_id=turnaround,
    )


def story_to_dict(story: Story) -> dict:
    return {
        "id": story.id,
        "description": story.description,
        "label": story.label.text,
        "turnaround_thread_id": story.turnaround_thread_id,
        "threads": [
            {
                "source": {"id": t.source.id, "text": t.source.text},
                "comments": [{"id": c.id, "text": c.text, "parent_id": c.parent_id} for c in t.comments],
            }
            for t in story.threads
        ],
    }


def load_stories(path: str | Path) -> Dataset:
    """Read a JSON-lines story file. Blank lines are skipped."""
    stories: list[Story] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, f"invalid JSON ({exc.msg})") from None
            try:
                story = story_from_dict(obj)
            except DataError:
                raise
            except (ValueError, TypeError) as exc:
                raise MalformedLine(lineno, str(exc)) from None
            if story.id in seen:
                raise DuplicateId(story.id)
            seen.add(story.id)
            stories.append(story)
    return Dataset(tuple(stories), Provenance("loaded"))


def dumps_stories(stories: Iterable[Story]) -> str:
    return "".join(json.dumps(story_to_dict(s), ensure_ascii=False) + "\n" for s in stories)


def save_stories(dataset: Dataset | Iterable[Story], path: str | Path) -> None:
    Path(path).write_text(dumps_stories(dataset), encoding="utf-8")


# --------------------------------------------------------------------------- synthetic

# Label-determining vocabulary. Filler words never overlap with these.
MARKERS: dict[Label, tuple[str, ...]] = {
    Label.TRUE: ("confirmed", "verified", "official", "authorities"),
    Label.FALSE: ("hoax", "misleading", "fake", "fabricated"),
    Label.UNVERIFIED: ("unconfirmed", "allegedly", "rumoured", "unclear"),
}


@dataclass(frozen=True)
class SynthConfig:
    n_stories: int = 300
    threads_per_story: int = 10
    comments_per_thread: int = 1
    vocab_size: int = 500
    signal_strength: float = 0.9
    words_per_tweet: int = 6

    def validate(self) -> None:
        if self.n_stories < 1:
            raise InvalidConfig("n_stories must be >= 1")
        if self.threads_per_story < 2:
            raise InvalidConfig("threads_per_story must be >= 2")
        if self.comments_per_thread < 0:
            raise InvalidConfig("comments_per_thread must be >= 0")
        if self.vocab_size < 1:
            raise InvalidConfig("vocab_size must be >= 1")
        if self.words_per_tweet < 1:
            raise InvalidConfig("words_per_tweet must be >= 1")
        if not 0.0 < self.signal_strength <= 1.0:
            raise InvalidConfig("signal_strength must be in (0, 1]")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def filler_word(i: int) -> str:
    return f"w{i:04d}"


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Generate stories whose label is carried by marker words in one planted thread.

    With probability ``signal_strength`` the planted thread's source tweet gets
    one or two markers of the story's label; otherwise the story carries no
    markers at all and its label cannot be read from the text. Every other
    word is Zipfian filler shared across labels.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, cfg.vocab_size + 1, dtype=np.float64)
    unigram = (1.0 / ranks) / np.sum(1.0 / ranks)

    labels = [Label(i % 3) for i in range(cfg.n_stories)]
    order = rng.permutation(cfg.n_stories)
    labels = [labels[i] for i in order]

    def filler(n: int) -> list[str]:
        return [filler_word(int(i)) for i in rng.choice(cfg.vocab_size, size=n, p=unigram)]

    stories = []
    for si, label in enumerate(labels):
        story_id = f"story-{si:04d}"
        planted = int(rng.integers(cfg.threads_per_story))
        signal = rng.random() < cfg.signal_strength
        threads = []
        for ti in range(cfg.threads_per_story):
            thread_id = f"{story_id}-t{ti:02d}"
            texts = [filler(cfg.words_per_tweet) for _ in range(1 + cfg.comments_per_thread)]
            if ti == planted and signal:
                words = texts[0]
                n_markers = 1 + int(rng.integers(2))
                for m in rng.choice(len(MARKERS[label]), size=n_markers, replace=False):
                    words.insert(int(rng.integers(len(words) + 1)), MARKERS[label][int(m)])
            source = Tweet(thread_id, " ".join(texts[0]))
            comments = []
            for ci, words in enumerate(texts[1:]):
                parent = thread_id
                if ci > 0 and rng.random() < 0.5:
                    parent = comments[int(rng.integers(ci))].id
                comments.append(Tweet(f"{thread_id}-c{ci:02d}", " ".join(words), parent))
            threads.append(Thread(source, tuple(comments)))
        stories.append(
            Story(
                id=story_id,
                description=f"synthetic story {si}",
                threads=tuple(threads),
                label=label,
                turnaround_thread_id=threads[planted].id,
            )
        )
    return Dataset(tuple(stories), Provenance("synthetic", seed, cfg.digest()))


# --------------------------------------------------------------------------- split


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of n * ratios; remainder ties go to the earlier slot."""
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, ratios: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/dev/test split.

    Stories are shuffled within each class and then interleaved by their
    fractional position inside the class, so any prefix of the interleaved
    order carries every class in proportion. Consecutive chunks of that order
    become the three splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    keyed = []
    for label in Label:
        members = [s for s in dataset.stories if s.label == label]
        perm = rng.permutation(len(members))
        for r, idx in enumerate(perm):
            keyed.append(((r + 0.5) / len(members), int(label), members[int(idx)]))
    keyed.sort(key=lambda k: (k[0], k[1]))
    ordered = [k[2] for k in keyed]
    sizes = _apportion(len(ordered), ratios)
    out = []
    start = 0
    for size in sizes:
        out.append(Dataset(tuple(ordered[start : start + size]), dataset.provenance))
        start += size
    return out[0], out[1], out[2]
