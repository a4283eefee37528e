import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wlpred.metrics import (
    MetricsReport,
    NoValidWords,
    TruthRecord,
    confusion_metrics,
    read_labels_file,
    render_main_table,
    render_report_text,
    render_severity_table,
    sentence_metrics,
    stratified_report,
    word_metrics,
    write_labels_file,
)
from wlpred.training import PredictionRecord


def brute_confusion(preds, labels, masks):
    """Independent pure-python confusion over valid words, incorrect=positive."""
    tp = fp = tn = fn = 0
    for p, c, m in zip(preds, labels, masks):
        for pi, ci, mi in zip(p, c, m):
            if not mi:
                continue
            pred_incorrect = pi < 0.5
            label_incorrect = ci == 0
            if pred_incorrect and label_incorrect:
                tp += 1
            elif pred_incorrect and not label_incorrect:
                fp += 1
            elif not pred_incorrect and label_incorrect:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


class TestWordMetrics:
    def test_perfect_predictions(self):
        p = [np.array([0.9, 0.1, 0.8])]
        c = [np.array([1, 0, 1])]
        m = [np.ones(3)]
        wm = word_metrics(p, c, m)
        assert wm.f1 == 1.0 and wm.mcc == 1.0
        assert wm.accuracy == 1.0 and wm.exact_match == 1.0
        assert not wm.f1_degenerate and not wm.mcc_degenerate

    def test_all_one_class_mcc_degenerate(self):
        p = [np.array([0.9, 0.9])]
        c = [np.array([1, 1])]
        m = [np.ones(2)]
        wm = word_metrics(p, c, m)
        assert wm.mcc == 0.0 and wm.mcc_degenerate
        assert wm.f1 == 1.0 and wm.f1_degenerate  # no positives anywhere

    def test_inversion_makes_incorrect_positive(self):
        # one incorrect word, correctly flagged; one correct word, correctly kept
        p = [np.array([0.2, 0.7])]
        c = [np.array([0, 1])]
        m = [np.ones(2)]
        wm = word_metrics(p, c, m)
        assert (wm.true_pos, wm.false_pos, wm.true_neg, wm.false_neg) == (1, 0, 1, 0)

    def test_threshold_is_half_inclusive(self):
        wm = word_metrics([np.array([0.5])], [np.array([1])], [np.ones(1)])
        assert wm.accuracy == 1.0  # p == 0.5 predicts correct

    def test_masked_words_excluded(self):
        p = [np.array([0.9, 0.0])]
        c = [np.array([1, 0])]
        m = [np.array([1, 0])]
        wm = word_metrics(p, c, m)
        assert wm.n_valid_words == 1 and wm.exact_match == 1.0

    def test_all_masked_raises(self):
        with pytest.raises(NoValidWords):
            word_metrics([np.array([0.5])], [np.array([1])], [np.zeros(1)])

    def test_exact_match_counts_utterances(self):
        p = [np.array([0.9]), np.array([0.1])]
        c = [np.array([1]), np.array([1])]
        m = [np.ones(1), np.ones(1)]
        wm = word_metrics(p, c, m)
        assert wm.exact_match == 0.5
        assert wm.n_utterances == 2

    def test_zero_valid_utterances_skipped_and_counted(self):
        p = [np.array([0.9]), np.array([0.4])]
        c = [np.array([1]), np.array([0])]
        m = [np.zeros(1), np.ones(1)]
        wm = word_metrics(p, c, m)
        assert wm.n_skipped_utterances == 1
        assert wm.n_utterances == 1

    @given(st.integers(0, 2**31))
    @settings(max_examples=200)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_utts = int(rng.integers(1, 5))
        preds, labels, masks = [], [], []
        for _ in range(n_utts):
            n = int(rng.integers(1, 20))
            preds.append(rng.random(n))
            labels.append(rng.integers(0, 2, n))
            masks.append(rng.integers(0, 2, n))
        if not any(m.sum() for m in masks):
            masks[0][0] = 1
        tp, fp, tn, fn = brute_confusion(preds, labels, masks)
        wm = word_metrics(preds, labels, masks)
        assert (wm.true_pos, wm.false_pos, wm.true_neg, wm.false_neg) == (tp, fp, tn, fn)
        f1, _, mcc, _ = confusion_metrics(tp, fp, tn, fn)
        assert wm.f1 == f1 and wm.mcc == mcc

    @given(st.integers(0, 2**31))
    @settings(max_examples=100)
    def test_exact_match_at_most_accuracy_for_equal_lengths(self, seed):
        # guaranteed only when every utterance has the same number of valid
        # words; mixed lengths admit counterexamples (see decisions ledger)
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        preds, labels, masks = [], [], []
        for _ in range(int(rng.integers(1, 6))):
            preds.append(rng.random(n))
            labels.append(rng.integers(0, 2, n))
            masks.append(np.ones(n, dtype=int))
        wm = word_metrics(preds, labels, masks)
        assert wm.exact_match <= wm.accuracy + 1e-12

    def test_mcc_invariant_under_joint_inversion(self):
        rng = np.random.default_rng(5)
        p = rng.random(50)
        c = rng.integers(0, 2, 50)
        m = np.ones(50, dtype=int)
        wm = word_metrics([p], [c], [m])
        flipped = word_metrics([1.0 - p], [1 - c], [m])
        # p<0.5 inverts strictly; 1-p flips ties at exactly 0.5, so avoid them
        assert not np.any(p == 0.5)
        assert wm.mcc == pytest.approx(flipped.mcc, abs=1e-12)


class TestSentenceMetrics:
    def test_constant_offset(self):
        y = np.array([10.0, 40.0, 70.0])
        sm = sentence_metrics(y + 10.0, y)
        assert sm.rmse == pytest.approx(10.0, abs=1e-12)
        assert sm.pearson == pytest.approx(1.0, abs=1e-12)

    def test_identity(self):
        y = np.array([5.0, 50.0])
        assert sentence_metrics(y, y).rmse == 0.0

    def test_hand_case(self):
        # cov 4500, variances 5000 and 4200: r = 4500 / sqrt(2.1e7)
        sm = sentence_metrics([0.0, 50.0, 100.0], [10.0, 40.0, 100.0])
        assert sm.rmse == pytest.approx(math.sqrt(200.0 / 3.0), abs=1e-9)
        assert sm.rmse == pytest.approx(8.1650, abs=1e-4)
        assert sm.pearson == pytest.approx(4500.0 / math.sqrt(2.1e7), abs=1e-12)
        assert sm.pearson == pytest.approx(0.98198, abs=1e-5)

    def test_zero_variance_marker(self):
        sm = sentence_metrics([50.0, 50.0], [10.0, 90.0])
        assert sm.pearson is None
        assert sm.rmse == pytest.approx(math.sqrt((1600 + 1600) / 2))

    def test_single_point(self):
        sm = sentence_metrics([30.0], [40.0])
        assert sm.pearson is None and sm.rmse == pytest.approx(10.0)

    @given(st.integers(0, 2**31))
    @settings(max_examples=100)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 30))
        a = rng.uniform(0, 100, n)
        b = rng.uniform(0, 100, n)
        perm = rng.permutation(n)
        sm1 = sentence_metrics(a, b)
        sm2 = sentence_metrics(a[perm], b[perm])
        assert sm1.rmse == pytest.approx(sm2.rmse, rel=1e-12)
        if sm1.pearson is None:
            assert sm2.pearson is None
        else:
            assert sm1.pearson == pytest.approx(sm2.pearson, rel=1e-9)


def _records_and_truths():
    records = []
    truths = {}
    rng = np.random.default_rng(3)
    severities = ["mild", "moderate", "mild", "moderately_severe"]
    for i, sev in enumerate(severities):
        utt = f"u{i}"
        n = 4
        c = rng.integers(0, 2, n)
        truths[utt] = TruthRecord(
            utterance_id=utt,
            correct=c.astype(np.int8),
            valid=np.ones(n, dtype=np.int8),
            severity=sev,
            target_score=float(100 * c.mean()),
        )
        for seed in (0, 1):
            p = np.clip(c + rng.normal(0, 0.3, n), 0.01, 0.99)
            records.append(
                PredictionRecord(
                    utterance_id=utt,
                    probabilities=[float(x) for x in p],
                    y_hat=float(100 * p.mean()),
                    seed=seed,
                    folds=[0],
                )
            )
    return records, truths


class TestStratifiedReport:
    def test_structure(self):
        records, truths = _records_and_truths()
        report = stratified_report(records, truths)
        assert report.seeds == [0, 1]
        assert set(report.by_severity) == {"mild", "moderate", "moderately_severe"}
        assert report.counts["by_severity"]["mild"] == 2
        pop = report.population
        assert set(pop["per_seed"]) == {"0", "1"}
        assert pop["mean"]["f1"] is not None

    def test_single_severity_equals_population(self):
        records, truths = _records_and_truths()
        only_mild = [r for r in records if truths[r.utterance_id].severity == "mild"]
        report = stratified_report(only_mild, truths)
        assert report.by_severity["mild"] == report.population

    def test_word_counts_partition(self):
        records, truths = _records_and_truths()
        report = stratified_report(records, truths)
        per_sev = sum(
            report.by_severity[sev]["per_seed"]["0"]["n_valid_words"]
            for sev in report.by_severity
        )
        assert per_sev == report.population["per_seed"]["0"]["n_valid_words"]

    def test_render_layout(self):
        records, truths = _records_and_truths()
        report = stratified_report(records, truths)
        text = render_report_text([("joint", report)])
        assert "Severity" in text and "joint" in text
        assert "mild" in text and "moderately_severe" in text
        for col in ("F1", "MCC", "Acc.", "Corr.", "RMSE"):
            assert col in text

    def test_multi_system_rows(self):
        records, truths = _records_and_truths()
        report = stratified_report(records, truths)
        main = render_main_table([("decoder", report), ("joint", report)])
        assert main.count("decoder") == 1 and main.count("joint") == 1
        sev = render_severity_table([("decoder", report), ("joint", report)])
        assert sev.count("decoder") == len(report.by_severity)

    def test_missing_labels_rejected(self):
        records, truths = _records_and_truths()
        del truths["u0"]
        with pytest.raises(ValueError):
            stratified_report(records, truths)

    def test_json_round_trip(self, tmp_path):
        import json

        records, truths = _records_and_truths()
        report = stratified_report(records, truths)
        blob = json.dumps(report.to_json_dict(), sort_keys=True)
        data = json.loads(blob)
        again = MetricsReport(
            seeds=data["seeds"],
            population=data["population"],
            by_severity=data["by_severity"],
            counts=data["counts"],
        )
        assert render_report_text([("x", again)]) == render_report_text([("x", report)])


class TestLabelsFile:
    def test_round_trip(self, tmp_path):
        truths = [
            TruthRecord("u1", np.array([1, 0, 1], np.int8), np.array([1, 1, 0], np.int8), "mild", 50.0),
            TruthRecord("u2", np.array([0], np.int8), np.array([1], np.int8), "unknown", None),
        ]
        path = tmp_path / "labels.tsv"
        write_labels_file(path, truths)
        back = read_labels_file(path)
        assert set(back) == {"u1", "u2"}
        assert list(back["u1"].correct) == [1, 0, 1]
        assert list(back["u1"].valid) == [1, 1, 0]
        assert back["u1"].target_score == 50.0
        assert back["u2"].target_score is None
        assert back["u2"].severity == "unknown"
