"""Span decoding and span-exact scoring with macro averaging over argument types.

Token labels use IO notation: every token of an argument carries its role,
everything else carries O. A prediction counts only when start, end, and
role all match a gold span.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

O_LABEL = "O"

Span = tuple[int, int, str]


def labels_to_strings(labels: Sequence[int] | np.ndarray, active_types: Sequence[str]) -> list[str]:
    """Map integer labels (N = O) back to role names."""
    n = len(active_types)
    return [active_types[i] if 0 <= i < n else O_LABEL for i in labels]


def decode_spans(labels: Sequence[str], o_label: str = O_LABEL) -> set[Span]:
    """Maximal runs of one role become one span; O breaks runs; a role change splits."""
    spans: set[Span] = set()
    start = None
    current = o_label
    for i, label in enumerate(labels):
        if label != current:
            if current != o_label:
                spans.add((start, i, current))
            start, current = i, label
    if current != o_label:
        spans.add((start, len(labels), current))
    return spans


def encode_spans(spans: Iterable[Span], num_tokens: int, o_label: str = O_LABEL) -> list[str]:
    """Inverse of ``decode_spans`` for non-overlapping span sets."""
    labels = [o_label] * num_tokens
    for start, end, role in spans:
        for i in range(start, end):
            labels[i] = role
    return labels


class MatchCounts:
    """Per-role TP/FP/FN counters; merges associatively across episodes."""

    def __init__(self):
        self.tp: Counter = Counter()
        self.fp: Counter = Counter()
        self.fn: Counter = Counter()

    def merge(self, other: "MatchCounts") -> "MatchCounts":
        self.tp.update(other.tp)
        self.fp.update(other.fp)
        self.fn.update(other.fn)
        return self

    def roles(self) -> set[str]:
        return set(self.tp) | set(self.fp) | set(self.fn)


def score_episode(
    pred: Sequence[set[Span]],
    gold: Sequence[set[Span]],
    active_types: Sequence[str],
) -> MatchCounts:
    """Span-exact counts over aligned per-document span sets."""
    if len(pred) != len(gold):
        raise ValueError("pred and gold must cover the same documents")
    active = set(active_types)
    counts = MatchCounts()
    for pred_spans, gold_spans in zip(pred, gold):
        for span in pred_spans:
            if span[2] not in active:
                continue
            if span in gold_spans:
                counts.tp[span[2]] += 1
            else:
                counts.fp[span[2]] += 1
        for span in gold_spans:
            if span[2] in active and span not in pred_spans:
                counts.fn[span[2]] += 1
    return counts


class FpFnCounts:
    """Token-level confusion counts against the O class."""

    def __init__(self, fp: int = 0, gold_o: int = 0, fn: int = 0, gold_arg: int = 0):
        self.fp = fp
        self.gold_o = gold_o
        self.fn = fn
        self.gold_arg = gold_arg

    def merge(self, other: "FpFnCounts") -> "FpFnCounts":
        self.fp += other.fp
        self.gold_o += other.gold_o
        self.fn += other.fn
        self.gold_arg += other.gold_arg
        return self

    def rates(self) -> tuple[float, float]:
        fp_rate = 100.0 * self.fp / self.gold_o if self.gold_o else 0.0
        fn_rate = 100.0 * self.fn / self.gold_arg if self.gold_arg else 0.0
        return fp_rate, fn_rate


def fp_fn_counts(pred: Sequence[str], gold: Sequence[str], o_label: str = O_LABEL) -> FpFnCounts:
    if len(pred) != len(gold):
        raise ValueError("pred and gold label sequences must align")
    counts = FpFnCounts()
    for p, g in zip(pred, gold):
        if g == o_label:
            counts.gold_o += 1
            if p != o_label:
                counts.fp += 1
        else:
            counts.gold_arg += 1
            if p == o_label:
                counts.fn += 1
    return counts


def fp_fn_analysis(pred: Sequence[str], gold: Sequence[str], o_label: str = O_LABEL) -> tuple[float, float]:
    """FP rate: gold-O tokens predicted as an argument; FN rate: argument tokens predicted O.

    Both are percentages of their own gold class size.
    """
    return fp_fn_counts(pred, gold, o_label).rates()


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class TypeScore:
    precision: float
    recall: float
    f1: float
    gold_count: int


@dataclass(frozen=True)
class EvalReport:
    """Macro P/R/F1 (percent) over argument types plus token FP/FN rates."""

    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_type: dict[str, TypeScore] = field(default_factory=dict)
    token_fp_rate: float = 0.0
    token_fn_rate: float = 0.0
    episode_count: int = 0

    def to_dict(self) -> dict:
        return {
            "macro": {
                "p": self.macro_precision,
                "r": self.macro_recall,
                "f1": self.macro_f1,
            },
            "per_type": [
                {
                    "role": role,
                    "p": 100.0 * score.precision,
                    "r": 100.0 * score.recall,
                    "f1": 100.0 * score.f1,
                    "gold": score.gold_count,
                }
                for role, score in sorted(self.per_type.items())
            ],
            "fp_rate": self.token_fp_rate,
            "fn_rate": self.token_fn_rate,
            "episode_count": self.episode_count,
        }


def aggregate(
    counts: MatchCounts | Iterable[MatchCounts],
    type_universe: Iterable[str] | None = None,
    *,
    token_counts: FpFnCounts | None = None,
    episode_count: int = 0,
    per_episode_macro: bool = False,
) -> EvalReport:
    """Reduce match counts to an EvalReport.

    Default: pool counts globally per type, then macro-average over the
    types with gold support in the evaluated set. With ``per_episode_macro``
    each episode's macro is computed first and episodes are averaged
    (requires an iterable of per-episode counts).
    """
    if isinstance(counts, MatchCounts):
        counts_list = [counts]
    else:
        counts_list = list(counts)
    if not counts_list:
        raise ValueError("no episodes to aggregate")

    universe = set(type_universe) if type_universe is not None else None

    def macro_over(count: MatchCounts) -> tuple[float, float, float]:
        roles = {r for r in count.roles() if count.tp[r] + count.fn[r] > 0}
        if universe is not None:
            roles &= universe
        if not roles:
            return 0.0, 0.0, 0.0
        scores = [_prf(count.tp[r], count.fp[r], count.fn[r]) for r in sorted(roles)]
        return tuple(float(np.mean([s[i] for s in scores])) for i in range(3))  # type: ignore[return-value]

    total = MatchCounts()
    for c in counts_list:
        total.merge(c)

    if per_episode_macro:
        per_ep = [macro_over(c) for c in counts_list]
        macro_p, macro_r, macro_f1 = (float(np.mean([m[i] for m in per_ep])) for i in range(3))
    else:
        macro_p, macro_r, macro_f1 = macro_over(total)

    gold_roles = {r for r in total.roles() if total.tp[r] + total.fn[r] > 0}
    if universe is not None:
        gold_roles &= universe
    per_type = {}
    for role in sorted(gold_roles):
        p, r, f1 = _prf(total.tp[role], total.fp[role], total.fn[role])
        per_type[role] = TypeScore(p, r, f1, total.tp[role] + total.fn[role])

    fp_rate, fn_rate = token_counts.rates() if token_counts is not None else (0.0, 0.0)
    return EvalReport(
        macro_precision=100.0 * macro_p,
        macro_recall=100.0 * macro_r,
        macro_f1=100.0 * macro_f1,
        per_type=per_type,
        token_fp_rate=fp_rate,
        token_fn_rate=fn_rate,
        episode_count=episode_count or len(counts_list),
    )


def report_json(
    report: EvalReport,
    *,
    setting: str,
    split: str,
    model: str,
    seed: int,
    config: dict | None = None,
) -> dict:
    payload = {"setting": setting, "split": split, "model": model}
    payload.update(report.to_dict())
    payload["seed"] = seed
    if config is not None:
        payload["config"] = config
    return payload


def write_report(report_payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def render_results_table(results: dict[str, dict[str, tuple[float, float, float]]]) -> str:
    """Aligned plain-text table: one row per setting, P/R/F1 columns per model."""
    settings = list(results)
    models: list[str] = []
    for row in results.values():
        for model in row:
            if model not in models:
                models.append(model)
    col_width = 7
    name_width = max([len(s) for s in settings] + [len("Setting")]) + 2
    group_width = 3 * col_width + 2

    def center(text: str, width: int) -> str:
        return text.center(width)

    lines = []
    header1 = "Setting".ljust(name_width) + "|" + "|".join(center(m, group_width) for m in models)
    header2 = " " * name_width + "|" + "|".join(
        center("P", col_width) + center("R", col_width) + center("F1", col_width) + "  " for _ in models
    )
    rule = "-" * len(header1)
    lines.extend([header1, header2, rule])
    for setting in settings:
        cells = []
        for model in models:
            triple = results[setting].get(model)
            if triple is None:
                cells.append(center("-", group_width))
            else:
                cells.append(
                    "".join(f"{v:{col_width}.2f}" for v in triple) + "  "
                )
        lines.append(setting.ljust(name_width) + "|" + "|".join(cells))
    return "\n".join(lines) + "\n"


def render_fp_fn_table(rates: dict[str, dict[str, tuple[float, float]]]) -> str:
    """Token FP/FN rate table: one column per setting, rows FP and FN, grouped by split."""
    groups = list(rates)
    settings: list[str] = []
    for row in rates.values():
        for setting in row:
            if setting not in settings:
                settings.append(setting)
    col = 8
    name_width = max(len(g) for g in groups) + 2
    lines = [" " * 4 + "".join(g.center(len(settings) * col + 2) for g in groups)]
    lines.append(" " * 4 + "".join("".join(s.center(col) for s in settings) + "  " for _ in groups))
    for kind, idx in (("FP", 0), ("FN", 1)):
        row = kind.ljust(4)
        for g in groups:
            row += "".join(
                f"{rates[g][s][idx]:{col}.2f}" if s in rates[g] else "-".center(col) for s in settings
            ) + "  "
        lines.append(row)
    return "\n".join(lines) + "\n"
