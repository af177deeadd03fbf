"""CSV / JSON / plain-text renderings of rankings and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

from .cma import ProfileRow, WordRanking
from .data import Label, Story
from .evaluation import ConditionalRow, SignificanceRow
from .model.tokens import TokenizedEvent
from .ranking import RankedCandidate, Ranking

RANKING_COLUMNS = ["method", "story_id", "candidate_id", "t1", "t2", "rank_t1", "rank_t2", "sum_rank", "final_rank"]

_ROW_SCHEMA = {
    "type": "object",
    "required": ["candidate_id", "t1", "t2", "rank_t1", "rank_t2", "sum_rank", "final_rank"],
    "properties": {
        "candidate_id": {"type": "string"},
        "t1": {"type": ["number", "null"]},
        "t2": {"type": ["number", "null"]},
        "rank_t1": {"type": "integer", "minimum": 1},
        "rank_t2": {"type": ["integer", "null"], "minimum": 1},
        "sum_rank": {"type": "integer", "minimum": 1},
        "final_rank": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

ANALYSIS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["story_id", "label", "predicted", "probs", "methods", "top_thread", "words", "highlighted_words"],
    "properties": {
        "story_id": {"type": "string"},
        "label": {"enum": [l.text for l in Label]},
        "predicted": {"enum": [l.text for l in Label]},
        "probs": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "methods": {"type": "object", "additionalProperties": {"type": "array", "items": _ROW_SCHEMA}},
        "top_thread": {"type": ["string", "null"]},
        "words": {
            "type": ["object", "null"],
            "required": ["thread_id", "ranking"],
            "properties": {
                "thread_id": {"type": "string"},
                "ranking": {"type": "array", "items": _ROW_SCHEMA},
            },
        },
        "highlighted_words": {"type": "array", "items": {"type": "string"}},
    },
    "additionalProperties": False,
}


def _num(x: float | None) -> float | None:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return x


def candidate_dict(c: RankedCandidate) -> dict:
    return {
        "candidate_id": c.candidate_id,
        "t1": _num(c.t1),
        "t2": _num(c.t2),
        "rank_t1": c.rank_t1,
        "rank_t2": c.rank_t2,
        "sum_rank": c.sum_rank,
        "final_rank": c.final_rank,
    }


def ranking_rows(ranking: Ranking) -> list[dict]:
    return [candidate_dict(c) for c in ranking.candidates]


def dumps_json(payload: object) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def dumps_csv(columns: list[str], rows: Iterable[Mapping[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def rankings_csv(per_method: Mapping[str, Mapping[str, Ranking]]) -> str:
    rows = []
    for method, per_story in per_method.items():
        for story_id, ranking in per_story.items():
            for c in ranking_rows(ranking):
                rows.append({"method": method, "story_id": story_id, **c})
    return dumps_csv(RANKING_COLUMNS, rows)


def conditional_dicts(rows: list[ConditionalRow]) -> list[dict]:
    return [
        {
            "label": Label(r.label).text,
            "n_class": r.n_class,
            "n_tp": r.n_tp,
            "accuracy": {m: _num(a) for m, a in r.accuracy.items()},
        }
        for r in rows
    ]


def conditional_csv(rows: list[ConditionalRow]) -> str:
    flat = []
    for r in rows:
        for method, acc in r.accuracy.items():
            flat.append({"label": Label(r.label).text, "n_class": r.n_class, "n_tp": r.n_tp, "method": method, "accuracy": acc})
    return dumps_csv(["label", "n_class", "n_tp", "method", "accuracy"], flat)


def significance_dicts(rows: list[SignificanceRow]) -> list[dict]:
    return [{"method_a": r.method_a, "method_b": r.method_b, "u": r.u, "p_value": r.p_value} for r in rows]


def profile_dicts(rows: list[ProfileRow]) -> list[dict]:
    return [{"layer": r.layer, "mean_top_t1": r.mean_top_t1, "mean_top_t2": r.mean_top_t2} for r in rows]


def render_story(
    story: Story,
    te: TokenizedEvent,
    top_thread: str | None,
    highlighted: set[int],
) -> str:
    """Plain-text view: ``>>`` marks the top thread, ``[[word]]`` marks salient word positions."""
    lines = [f"story {story.id} ({story.label.text})"]
    for thread_id in story.thread_ids:
        words = te.thread_words(thread_id)
        parts = []
        prev_stop = None
        for w in words:
            if prev_stop is not None and w.start != prev_stop:
                parts.append("|")
            parts.append(f"[[{w.word}]]" if w.start in highlighted else w.word)
            prev_stop = w.stop
        marker = ">>" if thread_id == top_thread else "  "
        lines.append(f"{marker} {thread_id}: {' '.join(parts)}")
    return "\n".join(lines) + "\n"


def word_ranking_dict(words: WordRanking | None) -> dict | None:
    if words is None:
        return None
    return {"thread_id": words.thread_id, "ranking": ranking_rows(words.ranking)}


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
