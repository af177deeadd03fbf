from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmar.data import (
    MARKERS,
    DanglingParent,
    DanglingTurnaround,
    DataError,
    Dataset,
    DuplicateId,
    InvalidConfig,
    InvalidRatios,
    Label,
    MalformedLine,
    Story,
    SynthConfig,
    Thread,
    Tweet,
    dumps_stories,
    filler_word,
    generate_synthetic,
    load_stories,
    save_stories,
    split,
    story_to_dict,
)
from cmar.model import ModelConfig
from cmar.model.tokens import bucket, words_of

from .conftest import make_story


def _write(tmp_path, lines):
    path = tmp_path / "stories.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _story_json(**overrides):
    obj = story_to_dict(make_story("s1", [["a b", "c"], ["d"]]))
    obj.update(overrides)
    return json.dumps(obj)


def test_label_order_and_parse():
    assert [int(l) for l in Label] == [0, 1, 2]
    assert Label.parse("Unverified") is Label.UNVERIFIED
    assert Label.FALSE.text == "false"
    with pytest.raises(ValueError):
        Label.parse("maybe")


def test_load_one_story_two_threads(tmp_path):
    ds = load_stories(_write(tmp_path, [_story_json()]))
    assert len(ds) == 1
    assert len(ds.stories[0].threads) == 2


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_stories(path)) == 0


def test_blank_lines_skipped(tmp_path):
    path = _write(tmp_path, ["", _story_json(), "   "])
    assert len(load_stories(path)) == 1


def test_dangling_turnaround(tmp_path):
    with pytest.raises(DanglingTurnaround):
        load_stories(_write(tmp_path, [_story_json(turnaround_thread_id="nope")]))


def test_malformed_line_number(tmp_path):
    with pytest.raises(MalformedLine) as exc:
        load_stories(_write(tmp_path, [_story_json(), "{not json"]))
    assert exc.value.line == 2


def test_unknown_and_missing_fields_rejected(tmp_path):
    obj = json.loads(_story_json())
    obj["extra"] = 1
    with pytest.raises(MalformedLine, match="unknown"):
        load_stories(_write(tmp_path, [json.dumps(obj)]))
    del obj["extra"]
    del obj["description"]
    with pytest.raises(MalformedLine, match="missing"):
        load_stories(_write(tmp_path, [json.dumps(obj)]))


def test_duplicate_story_id(tmp_path):
    with pytest.raises(DuplicateId):
        load_stories(_write(tmp_path, [_story_json(), _story_json()]))


def test_duplicate_tweet_id():
    src = Tweet("t", "x")
    with pytest.raises(DuplicateId):
        Story("s", "", (Thread(src), Thread(Tweet("t", "y"))), Label.TRUE)


def test_dangling_parent_foreign_and_cycle():
    a = Thread(Tweet("a", "x"))
    with pytest.raises(DanglingParent):
        Story("s", "", (a, Thread(Tweet("b", "y"), (Tweet("c", "z", "a"),))), Label.TRUE)
    cyc = (Tweet("c1", "z", "c2"), Tweet("c2", "z", "c1"))
    with pytest.raises(DanglingParent):
        Story("s", "", (Thread(Tweet("b", "y"), cyc),), Label.TRUE)


def test_nested_comment_chain_ok():
    chain = (Tweet("c1", "x", "src"), Tweet("c2", "y", "c1"))
    story = Story("s", "", (Thread(Tweet("src", "w"), chain),), Label.FALSE, "src")
    assert story.thread("src").tweets[-1].id == "c2"


def test_story_needs_threads():
    with pytest.raises(DataError):
        Story("s", "", (), Label.TRUE)


def test_generate_deterministic():
    cfg = SynthConfig(n_stories=3, threads_per_story=5)
    assert dumps_stories(generate_synthetic(cfg, 7)) == dumps_stories(generate_synthetic(cfg, 7))
    assert dumps_stories(generate_synthetic(cfg, 7)) != dumps_stories(generate_synthetic(cfg, 8))


def test_generate_label_balance():
    ds = generate_synthetic(SynthConfig(n_stories=300, threads_per_story=20), 0)
    counts = Counter(s.label for s in ds)
    assert all(abs(counts[l] - 100) <= 1 for l in Label)


def _markers_in(text: str) -> set[str]:
    every = {m for ms in MARKERS.values() for m in ms}
    return set(words_of(text)) & every


@pytest.mark.parametrize("seed", [0, 1])
def test_full_signal_plants_label_markers(seed):
    ds = generate_synthetic(SynthConfig(n_stories=40, signal_strength=1.0), seed)
    for story in ds:
        planted = story.thread(story.turnaround_thread_id)
        found = _markers_in(planted.source.text)
        assert found and found <= set(MARKERS[story.label])
        for thread in story.threads:
            for tweet in thread.tweets:
                if tweet is not planted.source:
                    assert not _markers_in(tweet.text)


def test_weak_signal_stories_carry_no_markers():
    ds = generate_synthetic(SynthConfig(n_stories=200, signal_strength=0.5), 4)
    marked = 0
    for story in ds:
        texts = [t.text for th in story.threads for t in th.tweets]
        found = set().union(*(_markers_in(x) for x in texts))
        assert found <= set(MARKERS[story.label])
        marked += bool(found)
    assert 70 <= marked <= 130


def test_markers_and_filler_do_not_share_buckets():
    cfg, synth = ModelConfig(), SynthConfig()
    filler = {bucket(filler_word(i), cfg.vocab_buckets) for i in range(synth.vocab_size)}
    markers = [bucket(m, cfg.vocab_buckets) for ms in MARKERS.values() for m in ms]
    assert len(set(markers)) == len(markers)
    assert not filler & set(markers)


@pytest.mark.parametrize(
    "cfg",
    [
        SynthConfig(n_stories=0),
        SynthConfig(threads_per_story=1),
        SynthConfig(signal_strength=0.0),
        SynthConfig(signal_strength=1.5),
        SynthConfig(comments_per_thread=-1),
    ],
)
def test_invalid_synth_config(cfg):
    with pytest.raises(InvalidConfig):
        generate_synthetic(cfg, 0)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 12),
    threads=st.integers(2, 5),
    comments=st.integers(0, 3),
    seed=st.integers(0, 2**32),
)
def test_round_trip_and_planted_thread(tmp_path_factory, n, threads, comments, seed):
    cfg = SynthConfig(n_stories=n, threads_per_story=threads, comments_per_thread=comments, words_per_tweet=3)
    ds = generate_synthetic(cfg, seed)
    for story in ds:
        assert sum(t.id == story.turnaround_thread_id for t in story.threads) == 1
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_stories(ds, path)
    assert load_stories(path).stories == ds.stories


def test_split_sizes_and_partition():
    ds = generate_synthetic(SynthConfig(n_stories=10), 0)
    parts = split(ds, (0.8, 0.1, 0.1), seed=5)
    assert [len(p) for p in parts] == [8, 1, 1]
    ids = [s.id for p in parts for s in p]
    assert sorted(ids) == sorted(s.id for s in ds)
    assert parts == split(ds, (0.8, 0.1, 0.1), seed=5)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(3, 120),
    raw=st.tuples(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10)),
    seed=st.integers(0, 1000),
)
def test_split_stratified(n, raw, seed):
    ds = generate_synthetic(SynthConfig(n_stories=n, threads_per_story=2, words_per_tweet=1, comments_per_thread=0), 1)
    ratios = tuple(r / sum(raw) for r in raw)
    parts = split(ds, ratios, seed)
    assert sum(len(p) for p in parts) == n
    total = Counter(s.label for s in ds)
    for part in parts:
        if not len(part):
            continue
        counts = Counter(s.label for s in part)
        for label in Label:
            assert abs(counts[label] / len(part) - total[label] / n) <= 1 / len(part) + 1e-12


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.5, 0.6, 0.1), (0.0, 0.5, 0.5), (-0.1, 0.6, 0.5)])
def test_split_invalid_ratios(ratios):
    ds = generate_synthetic(SynthConfig(n_stories=5), 0)
    with pytest.raises(InvalidRatios):
        split(ds, ratios, 0)


def test_dataset_rejects_duplicate_story_ids():
    s = make_story("x")
    with pytest.raises(DuplicateId):
        Dataset((s, s))
