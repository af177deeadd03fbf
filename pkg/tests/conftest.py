from __future__ import annotations

import pytest

from cmar.data import Label, Story, SynthConfig, Thread, Tweet, generate_synthetic, split
from cmar.model import Arch, ModelConfig, OptConfig, train
from cmar.model.network import RumourTransformer

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_story(story_id: str = "s", threads: list[list[str]] | None = None, label: Label = Label.TRUE) -> Story:
    """Story from a list of threads, each a list of tweet texts (source first)."""
    threads = threads or [["a b", "c"]]
    built = []
    for ti, texts in enumerate(threads):
        tid = f"{story_id}-t{ti}"
        comments = tuple(Tweet(f"{tid}-c{ci}", text, tid) for ci, text in enumerate(texts[1:]))
        built.append(Thread(Tweet(tid, texts[0]), comments))
    return Story(story_id, "desc", tuple(built), label, built[0].id)


@pytest.fixture(scope="session")
def small_data():
    ds = generate_synthetic(SynthConfig(n_stories=24, threads_per_story=4, words_per_tweet=4), seed=3)
    return ds


@pytest.fixture(scope="session", params=[Arch.ONE_TIER, Arch.TWO_TIER], ids=["one_tier", "two_tier"])
def any_model(request):
    cfg = ModelConfig(arch=request.param, d_model=16, n_layers=2, n_heads=2, ff_dim=32, max_len=96, seed=7)
    return RumourTransformer(cfg).eval()


@pytest.fixture(scope="session")
def tiny_trained(small_data):
    """A briefly trained small model: outputs depend on the input."""
    tr, dev, _ = split(small_data, (0.5, 0.25, 0.25), seed=0)
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, ff_dim=32, max_len=96, seed=1)
    return train(tr, dev, cfg, OptConfig(epochs=3, lr=3e-3, seed=1)).model
