from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from epiarg.evaluation import (
    MatchCounts,
    aggregate,
    decode_spans,
    encode_spans,
    fp_fn_analysis,
    labels_to_strings,
    render_fp_fn_table,
    render_results_table,
    report_json,
    score_episode,
)


def oracle_spans(labels):
    """Independent IO decoder: explicit index walk, no state machine reuse."""
    spans = set()
    i = 0
    while i < len(labels):
        if labels[i] == "O":
            i += 1
            continue
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        spans.add((i, j, labels[i]))
        i = j
    return spans


def oracle_counts(pred_labels, gold_labels):
    pred, gold = oracle_spans(pred_labels), oracle_spans(gold_labels)
    tp, fp, fn = Counter(), Counter(), Counter()
    for s in pred & gold:
        tp[s[2]] += 1
    for s in pred - gold:
        fp[s[2]] += 1
    for s in gold - pred:
        fn[s[2]] += 1
    return tp, fp, fn


class TestDecodeSpans:
    def test_all_o(self):
        assert decode_spans(["O", "O", "O"]) == set()

    def test_basic_runs(self):
        assert decode_spans(["O", "A", "A", "O", "B"]) == {(1, 3, "A"), (4, 5, "B")}

    def test_type_change_splits(self):
        assert decode_spans(["A", "B", "B"]) == {(0, 1, "A"), (1, 3, "B")}

    def test_decode_encode_identity(self):
        rng = np.random.default_rng(0)
        roles = ["A", "B", "C", "O"]
        for _ in range(300):
            n = int(rng.integers(1, 40))
            labels = [roles[int(rng.integers(4))] for _ in range(n)]
            spans = decode_spans(labels)
            assert decode_spans(encode_spans(spans, n)) == spans

    def test_labels_to_strings(self):
        assert labels_to_strings([0, 2, 1, 5], ["A", "B"]) == ["A", "O", "B", "O"]


class TestScoreEpisode:
    def test_exact_match(self):
        counts = score_episode([{(1, 3, "A")}], [{(1, 3, "A")}], ["A"])
        assert (counts.tp["A"], counts.fp["A"], counts.fn["A"]) == (1, 0, 0)

    def test_partial_overlap_is_wrong(self):
        counts = score_episode([{(1, 2, "A")}], [{(1, 3, "A")}], ["A"])
        assert (counts.tp["A"], counts.fp["A"], counts.fn["A"]) == (0, 1, 1)

    def test_bruteforce_oracle_on_random_pairs(self):
        """Oracle: independent span decoding and set comparison, 1000 pairs."""
        rng = np.random.default_rng(1)
        roles = ["A", "B", "C", "D", "E", "F"]
        for _ in range(1000):
            n_types = int(rng.integers(1, 7))
            active = roles[:n_types]
            length = int(rng.integers(1, 201))
            vocab = active + ["O"]
            pred = [vocab[int(rng.integers(len(vocab)))] for _ in range(length)]
            gold = [vocab[int(rng.integers(len(vocab)))] for _ in range(length)]
            counts = score_episode([decode_spans(pred)], [decode_spans(gold)], active)
            tp, fp, fn = oracle_counts(pred, gold)
            assert counts.tp == tp
            assert counts.fp == fp
            assert counts.fn == fn

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        length = 60
        vocab = ["A", "B", "O"]
        pred = [vocab[int(rng.integers(3))] for _ in range(length)]
        gold = [vocab[int(rng.integers(3))] for _ in range(length)]
        counts = score_episode([decode_spans(pred)], [decode_spans(gold)], ["A", "B"])
        swap = {"A": "B", "B": "A", "O": "O"}
        pred2 = [swap[l] for l in pred]
        gold2 = [swap[l] for l in gold]
        counts2 = score_episode([decode_spans(pred2)], [decode_spans(gold2)], ["A", "B"])
        for role, other in (("A", "B"), ("B", "A")):
            assert counts.tp[role] == counts2.tp[other]
            assert counts.fp[role] == counts2.fp[other]
            assert counts.fn[role] == counts2.fn[other]


class TestAggregate:
    def test_perfect_predictions(self):
        counts = score_episode([{(0, 2, "A"), (3, 4, "B")}], [{(0, 2, "A"), (3, 4, "B")}], ["A", "B"])
        report = aggregate(counts)
        assert report.macro_precision == report.macro_recall == report.macro_f1 == 100.0

    def test_no_predictions(self):
        counts = score_episode([set()], [{(0, 2, "A")}], ["A"])
        report = aggregate(counts)
        assert report.macro_precision == 0.0
        assert report.macro_recall == 0.0
        assert report.macro_f1 == 0.0

    def test_hand_scored_three_episode_fixture(self):
        """Oracle: hand computation.

        A: TP=2 -> P=R=F1=1; B: one spurious, one missed -> 0; C: missed -> 0.
        Macro over {A, B, C} = 1/3.
        """
        ep1 = score_episode([{(1, 3, "A")}], [{(1, 3, "A")}], ["A"])
        ep2 = score_episode(
            [{(0, 1, "A"), (2, 3, "B")}], [{(0, 1, "A"), (4, 5, "B")}], ["A", "B"]
        )
        ep3 = score_episode([set()], [{(0, 2, "C")}], ["C"])
        report = aggregate([ep1, ep2, ep3])
        assert report.macro_f1 == pytest.approx(100.0 / 3)
        assert report.macro_precision == pytest.approx(100.0 / 3)
        assert report.macro_recall == pytest.approx(100.0 / 3)
        assert report.per_type["A"].f1 == 1.0
        assert report.per_type["B"].f1 == 0.0
        assert report.per_type["C"].gold_count == 1

        per_episode = aggregate([ep1, ep2, ep3], per_episode_macro=True)
        assert per_episode.macro_f1 == pytest.approx(50.0)

    def test_single_episode_equals_direct_scores(self):
        counts = score_episode(
            [{(0, 1, "A"), (2, 3, "B")}], [{(0, 1, "A"), (5, 6, "B")}], ["A", "B"]
        )
        report = aggregate(counts)
        direct = np.mean([1.0, 0.0])
        assert report.macro_f1 == pytest.approx(100.0 * direct)

    def test_types_without_gold_excluded_from_macro(self):
        counts = MatchCounts()
        counts.tp["A"] = 1
        counts.fp["B"] = 5  # B never appears in gold
        report = aggregate(counts)
        assert set(report.per_type) == {"A"}
        assert report.macro_f1 == 100.0

    def test_empty_aggregate_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestFpFn:
    def test_identical_labels(self):
        assert fp_fn_analysis(["O", "A", "A"], ["O", "A", "A"]) == (0.0, 0.0)

    def test_all_o_predictions(self):
        fp, fn = fp_fn_analysis(["O", "O", "O", "O"], ["O", "A", "A", "B"])
        assert fp == 0.0
        assert fn == 100.0

    def test_rates_are_per_class_percentages(self):
        # 4 gold-O tokens, 1 predicted non-O -> 25%; 2 gold args, 1 predicted O -> 50%
        pred = ["A", "O", "O", "O", "A", "O"]
        gold = ["O", "O", "O", "O", "A", "A"]
        assert fp_fn_analysis(pred, gold) == (25.0, 50.0)


class TestReportRendering:
    def test_report_json_schema(self):
        counts = score_episode([{(0, 1, "A")}], [{(0, 1, "A")}], ["A"])
        report = aggregate(counts)
        payload = report_json(report, setting="3w1d", split="in_domain_small", model="protonet", seed=7)
        for key in ("setting", "split", "model", "macro", "per_type", "fp_rate", "fn_rate", "episode_count", "seed"):
            assert key in payload
        assert payload["macro"]["f1"] == 100.0

    def test_results_table_layout(self):
        table = render_results_table(
            {
                "3-Way-1-Doc": {"Baseline": (0.88, 2.50, 1.30), "ProtoNet": (4.83, 15.67, 7.39)},
                "3-Way-2-Doc": {"Baseline": (1.22, 12.99, 2.23), "ProtoNet": (5.88, 14.65, 8.34)},
            }
        )
        assert "Baseline" in table and "ProtoNet" in table
        assert "1.30" in table and "8.34" in table
        lines = table.strip().splitlines()
        assert len(lines) == 5  # two header rows, one rule, two data rows

    def test_fp_fn_table_fixture(self):
        table = render_fp_fn_table(
            {
                "in-domain-base": {"3w1d": (3.68, 1.99), "3w2d": (2.45, 1.26), "6w2d": (4.86, 1.66)},
                "cross-domain": {"3w1d": (6.42, 2.60), "3w2d": (3.23, 0.87), "6w2d": (4.40, 1.43)},
            }
        )
        assert "3.68" in table and "1.99" in table and "6.42" in table
        assert table.splitlines()[2].startswith("FP")
        assert table.splitlines()[3].startswith("FN")
