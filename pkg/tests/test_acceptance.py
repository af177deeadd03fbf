"""End-to-end acceptance criteria; each test records one PASS/FAIL line in the session summary."""

from __future__ import annotations

import itertools
import time

import numpy as np
import pytest
import torch

from cmar import cli
from cmar.baselines import integrated_gradients
from cmar.cli import RunConfig, evaluate, main
from cmar.cma import PROB_FLOOR as EPS, indirect_effect, rank_words, ratio_metric, total_effect, tvd
from cmar.data import MARKERS, SynthConfig, generate_synthetic, split
from cmar.evaluation import mann_whitney_u, u_statistic
from cmar.model import ModelConfig, predict, tokenize, train
from cmar.model.tokens import words_of
from cmar.model.network import RumourTransformer, argmax_label, embeddings, forward, input_gradients, logits_from_embeddings

from .conftest import ACCEPTANCE
from .test_evaluation import brute_force_p


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1. metric suite


def test_criterion_1_metric_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    for _ in range(1000):
        p, q, r = rng.dirichlet(np.ones(3), size=3)
        for name, ok in (
            ("tvd identity", tvd(p, p) == 0.0),
            ("tvd symmetry", tvd(p, q) == tvd(q, p)),
            ("tvd bounds", 0.0 <= tvd(p, q) <= 1.0),
            ("tvd triangle", tvd(p, r) <= tvd(p, q) + tvd(q, r) + 1e-15),
            ("ratio identity", ratio_metric(p, p) == 1.0),
            ("ratio symmetry", ratio_metric(p, q) == ratio_metric(q, p)),
            ("ratio bound", ratio_metric(p, q) >= 1.0),
            ("ratio equality", (ratio_metric(p, q) == 1.0) == np.array_equal(np.maximum(p, EPS), np.maximum(q, EPS))),
        ):
            if not ok:
                failures.append(name)
    examples = [
        abs(tvd([0.5, 0.3, 0.2], [0.2, 0.3, 0.5]) - 0.3) < 1e-12,
        tvd([1, 0, 0], [0, 1, 0]) == 1.0,
        abs(ratio_metric([0.5, 0.25, 0.25], [0.25, 0.5, 0.25]) - 2.0) < 1e-12,
        abs(ratio_metric([1, 0, 0], [0, 1, 0]) - 1 / EPS) <= 1e-12 / EPS,
    ]
    elapsed = time.perf_counter() - start
    ok = not failures and all(examples) and elapsed < 1.0
    record(1, ok, f"1000 triples, {len(failures)} axiom failures, examples ok={all(examples)}, {elapsed:.2f}s")


# ---------------------------------------------------------------- 2. patch oracle


def test_criterion_2_patch_oracle():
    start = time.perf_counter()
    ds = generate_synthetic(SynthConfig(n_stories=24, threads_per_story=5, words_per_tweet=4), seed=11)
    worst_t1 = worst_t2 = 0.0
    checked = 0
    for arch in ("one_tier", "two_tier"):
        model = RumourTransformer(ModelConfig(arch=arch, d_model=16, n_layers=3, n_heads=2, ff_dim=32, max_len=160, seed=4))
        for story in ds.stories[:20]:
            te_total = total_effect(model, story, [story.turnaround_thread_id])
            te = te_total.null.event
            for layer in range(model.cfg.n_layers + 1):
                ie = indirect_effect(model, te, te_total.masked.trace, layer, range(len(te)), range(model.cfg.d_model))
                worst_t1 = max(worst_t1, abs(ie.t1 - te_total.score.t1))
                worst_t2 = max(worst_t2, abs(ie.t2 - te_total.score.t2) / max(1.0, te_total.score.t2))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst_t1 <= 1e-12 and worst_t2 <= 1e-12 and elapsed < 60
    record(2, ok, f"{checked} story-layer pairs, max |dT1|={worst_t1:.1e}, max rel |dT2|={worst_t2:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. gradients


def test_criterion_3_gradients():
    start = time.perf_counter()
    ds = generate_synthetic(SynthConfig(n_stories=24, threads_per_story=4, words_per_tweet=4), seed=3)
    tr, dev, _ = split(ds, (0.5, 0.25, 0.25), seed=0)
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, ff_dim=32, max_len=96, seed=1)
    model = train(tr, dev, cfg, cli.RunConfig(epochs=3, lr=3e-3, seed=1).opt()).model

    rng = np.random.default_rng(0)
    h = 1e-5
    worst_fd = 0.0
    for story in ds.stories[:5]:
        te = tokenize(story, cfg)
        target = int(rng.integers(3))
        grad = input_gradients(model, te, target)
        x = embeddings(model, te)
        for _ in range(20):
            i, j = int(rng.integers(len(te))), int(rng.integers(x.shape[1]))
            plus, minus = x.clone(), x.clone()
            plus[i, j] += h
            minus[i, j] -= h
            logits, _ = logits_from_embeddings(model, te, torch.stack([plus, minus]), target)
            fd = (logits[0] - logits[1]) / (2 * h)
            worst_fd = max(worst_fd, abs(fd - grad[i, j]) / max(abs(grad[i, j]), abs(fd), 1e-6))

    worst_gap = 0.0
    for story in ds.stories[:8]:
        te = tokenize(story, cfg)
        target = int(argmax_label(forward(model, te)[0]))
        worst_gap = max(worst_gap, integrated_gradients(model, te, target, steps=64).completeness_gap)
    elapsed = time.perf_counter() - start
    ok = worst_fd < 1e-4 and worst_gap < 0.01 and elapsed < 60
    record(3, ok, f"max FD rel err={worst_fd:.1e} (100 coords), max IG gap={worst_gap:.2%} at 64 steps, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4 and 6. synthetic recovery


@pytest.fixture(scope="module")
def recovery():
    start = time.perf_counter()
    cfg = RunConfig()
    ds = generate_synthetic(cfg.synth(), seed=cfg.seed)
    tr, dev, test = split(ds, cfg.ratios, seed=cfg.seed)
    result = train(tr, dev, cfg.model(), cfg.opt())
    report, _ = evaluate(cfg, result.model, list(test))
    return cfg, (len(tr), len(dev), len(test)), result, report, time.perf_counter() - start


def test_criterion_4_synthetic_recovery(recovery):
    cfg, sizes, result, report, elapsed = recovery
    acc = report["turnaround_accuracy"]
    p_random = next(r["p_value"] for r in report["significance"] if r["method_b"] == "random")
    baselines_reported = all(m in acc for m in ("attention", "gradient", "local"))
    checks = {
        "dev F1 >= 0.9": result.best_dev_f1 >= 0.9,
        "CMA-R >= 0.8": acc["cma_r"] >= 0.8,
        "random 0.1 +- 0.05": abs(acc["random"] - 0.1) <= 0.05,
        "MW p < 0.05": p_random < 0.05,
        "baselines reported": baselines_reported,
        "< 5 min": elapsed < 300,
    }
    failed = [k for k, v in checks.items() if not v]
    others = ", ".join(f"{m}={acc[m]:.2f}" for m in acc if m not in ("cma_r", "random"))
    detail = (
        f"split={sizes}, dev F1={result.best_dev_f1:.3f} (epoch {result.best_epoch}), test F1={report['macro_f1']:.3f}, "
        f"CMA-R={acc['cma_r']:.2f}, random={acc['random']:.2f}, p={p_random:.1e}, {others}, {elapsed:.0f}s"
    )
    if failed:
        detail += f"; failed: {failed}"
    record(4, not failed, detail)


def test_criterion_6_layer_profile(recovery):
    _, _, _, report, _ = recovery
    profile = [row["mean_top_t1"] for row in report["layer_profile"]]
    early, deep = profile[0], profile[-1]  # embedding layer vs last block
    shape = " ".join(f"{v:.3f}" for v in profile)
    record(6, early > deep, f"top-k mean T1 by layer: {shape}; early={early:.3f} deep={deep:.3f}")


def test_marker_words_lead_word_ranking(recovery):
    cfg, _, result, _, _ = recovery
    ds = generate_synthetic(cfg.synth(), seed=cfg.seed)
    _, _, test = split(ds, cfg.ratios, seed=cfg.seed)
    hits = total = 0
    for story in test:
        label, _ = predict(result.model, story)
        markers = set(MARKERS[story.label])
        planted = story.thread(story.turnaround_thread_id)
        if label != story.label or not markers & set(words_of(planted.source.text)):
            continue
        top3 = [c.candidate_id.split("@")[0] for c in rank_words(result.model, story, planted.id).ranking.candidates[:3]]
        hits += bool(markers & set(top3))
        total += 1
    print(f"marker word in top 3 on {hits}/{total} correctly classified stories with markers")
    assert total >= 20
    assert hits / total >= 0.7


# ---------------------------------------------------------------- 5. Mann-Whitney


def test_criterion_5_mann_whitney():
    start = time.perf_counter()
    worst = 0.0
    complement = True
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a = rng.integers(0, 5, size=n).tolist()
        b = rng.integers(0, 5, size=m).tolist()
        _, p = mann_whitney_u(a, b, "exact")
        worst = max(worst, abs(p - brute_force_p(a, b)))
        complement &= u_statistic(a, b) + u_statistic(b, a) == n * m
    for n, m in itertools.product(range(1, 9), repeat=2):
        rng = np.random.default_rng(n * 10 + m)
        a, b = rng.normal(size=n), rng.normal(size=m)
        complement &= u_statistic(a, b) + u_statistic(b, a) == n * m
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and complement and elapsed < 10
    record(5, ok, f"50 cases, max |p - brute force|={worst:.1e}, U complement ok={complement}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 7. reproducibility


SMALL = [
    "--set", "n_stories=40",
    "--set", "threads_per_story=4",
    "--set", "words_per_tweet=4",
    "--set", "d_model=16",
    "--set", "n_layers=2",
    "--set", "ff_dim=32",
    "--set", "max_len=128",
    "--set", "epochs=3",
    "--set", "ig_steps=8",
    "--set", "surrogate_samples=60",
    "--set", "profile_stories=3",
]


def _snapshot(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "run_config.txt"
    }


def test_criterion_7_reproducibility(tmp_path, monkeypatch):
    for key in list(__import__("os").environ):
        if key.startswith("CMAR_"):
            monkeypatch.delenv(key)
    first, second = tmp_path / "first", tmp_path / "second"
    codes = []
    for command in ("generate", "train", "evaluate"):
        codes.append(main([command, "--out", str(first), *SMALL]))
    story_id = (first / "data" / "test.jsonl").read_text().split('"id": "', 1)[1].split('"', 1)[0]
    codes.append(main(["analyze", "--out", str(first), *SMALL, "--story", story_id]))

    # every stage of the second run reads only the configuration its counterpart saved
    saved = {"generate": "data", "train": "model", "evaluate": "eval"}
    for command, folder in saved.items():
        codes.append(main([command, "--config", str(first / folder / "run_config.txt"), "--out", str(second)]))
    codes.append(main(["analyze", "--config", str(first / "eval" / "run_config.txt"), "--out", str(second), "--story", story_id, "--workers", "2"]))

    a, b = _snapshot(first), _snapshot(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = all(c == 0 for c in codes) and not differing and len(a) >= 12
    record(7, ok, f"{len(a)} output files compared across two runs, {len(differing)} differ {differing[:3]}, exit codes {set(codes)}")
