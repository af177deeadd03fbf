"""``cmar`` command line: generate, train, analyze, evaluate, describe.

Configuration is one flat RunConfig resolved as defaults < config file <
CMAR_* environment variables < flags, then written verbatim as
``run_config.txt`` next to every output so a run can be repeated with
``--config``.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import baselines, cma, reports
from .data import DataError, Dataset, Story, SynthConfig, generate_synthetic, load_stories, save_stories, split
from .evaluation import (
    REFERENCE_METHOD,
    conditional_turnaround,
    macro_f1,
    significance_suite,
    turnaround_accuracy,
    turnaround_hits,
)
from .model import ModelConfig, OptConfig, load_checkpoint, read_header, save_checkpoint, train
from .model.checkpoint import CheckpointError
from .model.network import predict
from .model.tokens import tokenize
from .ranking import Ranking

log = logging.getLogger("cmar")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
METHODS = ("cma_r", "attention", "gradient", "grad_x_input", "local", "random")
SPLITS = ("train", "dev", "test")
ENV_PREFIX = "CMAR_"

_SYNTH = SynthConfig()
_MODEL = ModelConfig()
_OPT = OptConfig()


class ConfigError(ValueError):
    """Bad configuration or arguments; exit code 1."""


class InvariantFailure(RuntimeError):
    """A report failed a self-check; exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    out: str = "runs/default"
    seed: int = 0
    data_dir: str = ""  # empty: <out>/data
    model_path: str = ""  # empty: <out>/model/model.ckpt
    # synthetic data
    n_stories: int = 400
    threads_per_story: int = _SYNTH.threads_per_story
    comments_per_thread: int = _SYNTH.comments_per_thread
    vocab_size: int = _SYNTH.vocab_size
    signal_strength: float = _SYNTH.signal_strength
    words_per_tweet: int = _SYNTH.words_per_tweet
    split: str = "0.75,0.125,0.125"
    # model
    arch: str = _MODEL.arch.value
    d_model: int = _MODEL.d_model
    n_layers: int = _MODEL.n_layers
    n_heads: int = _MODEL.n_heads
    ff_dim: int = _MODEL.ff_dim
    max_len: int = _MODEL.max_len
    vocab_buckets: int = _MODEL.vocab_buckets
    dropout: float = _MODEL.dropout
    include_description: bool = False
    # optimisation
    lr: float = _OPT.lr
    epochs: int = _OPT.epochs
    batch_size: int = _OPT.batch_size
    weight_decay: float = _OPT.weight_decay
    word_dropout: float = _OPT.word_dropout
    clip_norm: float = _OPT.clip_norm
    warmup: float = _OPT.warmup
    # interpretation
    methods: str = ",".join(METHODS)
    workers: int = 1
    ig_steps: int = 64
    ig_baseline: str = "mask"
    surrogate_samples: int = 500
    kernel_width: float = 0.5
    ridge_alpha: float = 1.0
    profile_top_k: int = 10
    profile_stories: int = 10  # 0: every evaluated story
    target: str = "gold"
    mw_mode: str = "auto"
    highlight_k: int = 3
    eval_split: str = "test"

    # ------------------------------------------------------------------ derived

    @property
    def ratios(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(x) for x in self.split.split(","))
        except ValueError:
            raise ConfigError(f"--split: not a comma-separated list of numbers: {self.split!r}") from None
        if len(parts) != 3 or any(not (p > 0) for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"--split: need three positive fractions summing to 1, got {self.split!r}")
        return parts  # type: ignore[return-value]

    @property
    def method_list(self) -> list[str]:
        methods = [m.strip() for m in self.methods.split(",") if m.strip()]
        unknown = [m for m in methods if m not in METHODS]
        if unknown or not methods:
            raise ConfigError(f"--methods: unknown or empty method list {unknown or self.methods!r}; choose from {','.join(METHODS)}")
        return methods

    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_stories=self.n_stories,
            threads_per_story=self.threads_per_story,
            comments_per_thread=self.comments_per_thread,
            vocab_size=self.vocab_size,
            signal_strength=self.signal_strength,
            words_per_tweet=self.words_per_tweet,
        )

    def model(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            ff_dim=self.ff_dim,
            max_len=self.max_len,
            vocab_buckets=self.vocab_buckets,
            dropout=self.dropout,
            seed=self.seed,
            include_description=self.include_description,
        )

    def opt(self) -> OptConfig:
        return OptConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            word_dropout=self.word_dropout,
            clip_norm=self.clip_norm,
            warmup=self.warmup,
            seed=self.seed,
        )

    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out) / "data"

    def checkpoint_path(self) -> Path:
        return Path(self.model_path) if self.model_path else Path(self.out) / "model" / "model.ckpt"

    def validate(self) -> None:
        self.ratios
        self.method_list
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if self.ig_baseline not in ("mask", "zero"):
            raise ConfigError("ig_baseline must be 'mask' or 'zero'")
        if self.target not in ("gold", "cma"):
            raise ConfigError("target must be 'gold' or 'cma'")
        if self.mw_mode not in ("auto", "exact", "normal"):
            raise ConfigError("mw_mode must be 'auto', 'exact' or 'normal'")
        if self.eval_split not in SPLITS:
            raise ConfigError(f"eval_split must be one of {SPLITS}")
        for name in ("ig_steps", "profile_top_k", "highlight_k", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.profile_stories < 0:
            raise ConfigError("profile_stories must be >= 0")
        try:
            self.synth().validate()
            self.model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------------ text form

    def dumps(self) -> str:
        lines = ["# cmar run configuration (key = value; '#' starts a comment)"]
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw: str, source: str) -> object:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{source}: unknown key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
    except ValueError:
        raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "config") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw, f"{source}:{lineno}")
    return values


def resolve_config(
    config_file: str | None,
    env: dict[str, str],
    overrides: dict[str, object],
) -> RunConfig:
    """defaults < config file < CMAR_* environment < command-line flags."""
    values: dict[str, object] = {}
    if config_file:
        try:
            text = Path(config_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {config_file}: {exc.strerror}") from None
        values.update(parse_config_text(text, config_file))
    for name, raw in sorted(env.items()):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower()
            values[key] = _coerce(key, raw, f"environment {name}")
    values.update(overrides)
    cfg = replace(RunConfig(), **values)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- helpers


def _write_run_config(directory: Path, cfg: RunConfig) -> None:
    reports.write_text(directory / "run_config.txt", cfg.dumps())


def _load_split(cfg: RunConfig, name: str) -> Dataset:
    path = cfg.data_path() / f"{name}.jsonl"
    if not path.exists():
        raise ConfigError(f"missing {name} split: {path} (run 'cmar generate' first or set data_dir)")
    return load_stories(path)


def _load_model(cfg: RunConfig):
    path = cfg.checkpoint_path()
    if not path.exists():
        raise ConfigError(f"missing checkpoint: {path} (run 'cmar train' first or set model_path)")
    model, _ = load_checkpoint(path)
    return model


def _parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Map in input order; the result does not depend on the worker count."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _method_ranking(cfg: RunConfig, model, method: str, story: Story) -> Ranking:
    if method == "cma_r":
        return cma.rank_tweets(model, story)
    if method == "attention":
        return baselines.attention_rank(model, story)
    if method == "gradient":
        return baselines.gradient_rank(model, story, cfg.ig_steps, cfg.ig_baseline, "ig")
    if method == "grad_x_input":
        return baselines.gradient_rank(model, story, method="grad_x_input")
    if method == "local":
        seed = baselines.story_seed(cfg.seed, story.id)
        return baselines.local_surrogate_rank(model, story, cfg.surrogate_samples, seed, cfg.kernel_width, cfg.ridge_alpha)
    if method == "random":
        return baselines.random_rank(story, baselines.story_seed(cfg.seed, story.id))
    raise ConfigError(f"unknown method {method!r}")


# --------------------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig) -> int:
    dataset = generate_synthetic(cfg.synth(), cfg.seed)
    parts = split(dataset, cfg.ratios, cfg.seed)
    out = cfg.data_path()
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLITS, parts):
        save_stories(part, out / f"{name}.jsonl")
    manifest = {
        "seed": cfg.seed,
        "config_digest": cfg.synth().digest(),
        "synth_config": {f.name: getattr(cfg.synth(), f.name) for f in fields(SynthConfig)},
        "ratios": list(cfg.ratios),
        "counts": {name: len(part) for name, part in zip(SPLITS, parts)},
    }
    reports.write_text(out / "manifest.json", reports.dumps_json(manifest))
    _write_run_config(out, cfg)
    print(f"wrote {sum(len(p) for p in parts)} stories to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    train_set = _load_split(cfg, "train")
    dev_set = _load_split(cfg, "dev")
    result = train(train_set, dev_set, cfg.model(), cfg.opt())
    path = cfg.checkpoint_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "best_epoch": result.best_epoch,
        "best_dev_f1": result.best_dev_f1,
        "initial_dev_f1": result.initial_dev_f1,
        "opt": {f.name: getattr(cfg.opt(), f.name) for f in fields(OptConfig)},
    }
    save_checkpoint(result.model, path, meta)
    rows = [{"epoch": e.epoch, "loss": e.loss, "dev_f1": e.dev_f1} for e in result.log]
    reports.write_text(path.parent / "train_log.csv", reports.dumps_csv(["epoch", "loss", "dev_f1"], rows))
    _write_run_config(path.parent, cfg)
    print(f"best dev macro-F1 {result.best_dev_f1:.4f} at epoch {result.best_epoch}; checkpoint {path}")
    return EXIT_OK


def _find_story(cfg: RunConfig, story_id: str | None, story_file: str | None) -> Story:
    if story_file:
        dataset = load_stories(story_file)
        if story_id is None:
            if len(dataset) != 1:
                raise ConfigError("--story-file holds several stories; pick one with --story")
            return dataset.stories[0]
        candidates = [dataset]
    else:
        if story_id is None:
            raise ConfigError("analyze needs --story or --story-file")
        candidates = [_load_split(cfg, name) for name in SPLITS]
    for dataset in candidates:
        for story in dataset:
            if story.id == story_id:
                return story
    raise ConfigError(f"unknown story id {story_id!r}")


def analyze_story(cfg: RunConfig, model, story: Story) -> tuple[dict, str]:
    label, probs = predict(model, story)
    rankings = {m: _method_ranking(cfg, model, m, story) for m in cfg.method_list}
    cma_ranking = rankings.get("cma_r") or cma.rank_tweets(model, story)
    top_thread = cma_ranking.top
    words = cma.rank_words(model, story, top_thread)
    te = tokenize(story, model.cfg)
    spans = {cma.word_id(w.word, w.start): w for w in te.thread_words(top_thread)}
    highlighted = [c.candidate_id for c in words.ranking.candidates[: cfg.highlight_k]]
    report = {
        "story_id": story.id,
        "label": story.label.text,
        "predicted": label.text,
        "probs": [float(p) for p in probs],
        "methods": {m: reports.ranking_rows(r) for m, r in rankings.items()},
        "top_thread": top_thread,
        "words": reports.word_ranking_dict(words),
        "highlighted_words": highlighted,
    }
    text = reports.render_story(story, te, top_thread, {spans[w].start for w in highlighted})
    return report, text


def cmd_analyze(cfg: RunConfig, story_id: str | None, story_file: str | None) -> int:
    model = _load_model(cfg)
    story = _find_story(cfg, story_id, story_file)
    report, text = analyze_story(cfg, model, story)
    out = Path(cfg.out) / "analysis"
    reports.write_text(out / f"{story.id}.json", reports.dumps_json(report))
    reports.write_text(out / f"{story.id}.txt", text)
    _write_run_config(out, cfg)
    sys.stdout.write(text)
    return EXIT_OK


def evaluate(cfg: RunConfig, model, stories: Sequence[Story]) -> tuple[dict, dict[str, str]]:
    """Run every configured method over ``stories``; returns the JSON report and CSV tables."""
    if not stories:
        raise ConfigError(f"{cfg.eval_split} split is empty")
    methods = cfg.method_list
    if REFERENCE_METHOD not in methods:
        methods = [REFERENCE_METHOD] + methods
    ids = [s.id for s in stories]
    gold_threads = {s.id: s.turnaround_thread_id for s in stories}
    missing = [s for s, t in gold_threads.items() if t is None]
    if missing:
        raise ConfigError(f"stories without a turnaround thread: {missing[:5]}")
    gold_labels = {s.id: int(s.label) for s in stories}

    def per_story(story: Story) -> tuple[int, dict[str, Ranking], list[cma.TotalEffect]]:
        label, _ = predict(model, story)
        _, effects = cma.thread_effects(model, story)
        rankings = {m: _method_ranking(cfg, model, m, story) for m in methods}
        return int(label), rankings, effects

    results = _parallel_map(per_story, list(stories), cfg.workers)
    preds = {sid: r[0] for sid, r in zip(ids, results)}
    rankings = {m: {sid: r[1][m] for sid, r in zip(ids, results)} for m in methods}
    hits = {m: turnaround_hits(rankings[m], gold_threads) for m in methods}
    accuracy = {m: turnaround_accuracy(rankings[m], gold_threads) for m in methods}
    hit_vectors = {m: [hits[m][sid] for sid in ids] for m in methods}
    significance = significance_suite(hit_vectors, REFERENCE_METHOD, cfg.mw_mode)
    conditional = conditional_turnaround(preds, rankings, gold_labels, gold_threads)

    profile_set = list(stories)[: cfg.profile_stories or len(stories)]
    profile = cma.layer_profile(model, profile_set, cfg.profile_top_k, cfg.target)
    ate_t1, ate_t2 = cma.average_total_effect(model, list(stories), cfg.target)

    checks = _invariant_checks(accuracy, hit_vectors, significance)
    report = {
        "n_stories": len(stories),
        "split": cfg.eval_split,
        "macro_f1": macro_f1([preds[s] for s in ids], [gold_labels[s] for s in ids]),
        "turnaround_accuracy": accuracy,
        "conditional": reports.conditional_dicts(conditional),
        "significance": reports.significance_dicts(significance),
        "layer_profile": reports.profile_dicts(profile),
        "average_total_effect": {"t1": ate_t1, "t2": ate_t2, "target": cfg.target},
        "invariants": checks,
    }
    te_rows = []
    for story, (_, _, effects) in zip(stories, results):
        for tid, e in zip(story.thread_ids, effects):
            te_rows.append({"story_id": story.id, "thread_id": tid, "t1": e.score.t1, "t2": e.score.t2})
    tables = {
        "accuracy.csv": reports.dumps_csv(["method", "accuracy"], [{"method": m, "accuracy": a} for m, a in accuracy.items()]),
        "conditional.csv": reports.conditional_csv(conditional),
        "significance.csv": reports.dumps_csv(["method_a", "method_b", "u", "p_value"], report["significance"]),
        "layer_profile.csv": reports.dumps_csv(["layer", "mean_top_t1", "mean_top_t2"], report["layer_profile"]),
        "rankings.csv": reports.rankings_csv(rankings),
        "total_effects.csv": reports.dumps_csv(["story_id", "thread_id", "t1", "t2"], te_rows),
    }
    return report, tables


def _invariant_checks(accuracy, hit_vectors, significance) -> dict[str, bool]:
    checks = {
        "accuracy_in_unit_interval": all(0.0 <= a <= 1.0 for a in accuracy.values()),
        "accuracy_matches_hits": all(
            abs(accuracy[m] - float(np.mean(v))) < 1e-12 for m, v in hit_vectors.items()
        ),
        "p_values_in_unit_interval": all(0.0 <= r.p_value <= 1.0 for r in significance),
    }
    n = len(next(iter(hit_vectors.values())))
    checks["u_within_bounds"] = all(0.0 <= r.u <= n * n for r in significance)
    return checks


def cmd_evaluate(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    stories = list(_load_split(cfg, cfg.eval_split))
    report, tables = evaluate(cfg, model, stories)
    out = Path(cfg.out) / "eval"
    reports.write_text(out / "report.json", reports.dumps_json(report))
    for name, text in tables.items():
        reports.write_text(out / name, text)
    _write_run_config(out, cfg)
    for method, acc in report["turnaround_accuracy"].items():
        print(f"{method:>14s}  turnaround accuracy {acc:.3f}")
    failed = [k for k, ok in report["invariants"].items() if not ok]
    if failed:
        raise InvariantFailure(f"invariant checks failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_describe(path: str) -> int:
    header = read_header(path)
    sys.stdout.write(reports.dumps_json(header))
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2; usage errors are validation errors here
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file (e.g. a saved run_config.txt)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root directory")
    common.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    common.add_argument("--workers", type=int)
    common.add_argument("--include-description", action="store_true", default=None)
    common.add_argument("--split", help="train,dev,test fractions, e.g. 0.75,0.125,0.125")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cmar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic train/dev/test dataset")
    sub.add_parser("train", parents=[common], help="train a classifier and save a checkpoint")
    p = sub.add_parser("analyze", parents=[common], help="rank threads and words of one story")
    p.add_argument("--story", help="story id (searched in train, dev and test)")
    p.add_argument("--story-file", help="JSON-lines file with the story")
    sub.add_parser("evaluate", parents=[common], help="turnaround evaluation of every method")
    p = sub.add_parser("describe", help="print a checkpoint header")
    p.add_argument("checkpoint")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    values: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw, "--set")
    for key in ("seed", "out", "methods", "workers", "split", "include_description"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = _coerce(key, str(value), f"--{key.replace('_', '-')}")
    return values


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        if args.command == "describe":
            return cmd_describe(args.checkpoint)
        cfg = resolve_config(args.config, dict(os.environ), _overrides(args))
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.story, args.story_file)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"cmar: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"cmar: error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"cmar: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
