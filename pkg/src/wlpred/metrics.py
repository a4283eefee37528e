"""Word-level and sentence-level evaluation with severity stratification.

Word metrics treat the incorrect class as positive: predictions and labels
are both inverted before the confusion matrix is built. All accumulation is
in float64 / exact integers regardless of feature precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class NoValidWords(ValueError):
    """Every word is masked out; the requested quantity is undefined."""


@dataclass(frozen=True)
class WordMetrics:
    f1: float
    mcc: float
    accuracy: float
    exact_match: float
    f1_degenerate: bool
    mcc_degenerate: bool
    true_pos: int
    false_pos: int
    true_neg: int
    false_neg: int
    n_valid_words: int
    n_utterances: int
    n_skipped_utterances: int


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> tuple[float, bool, float, bool]:
    """(f1, f1_degenerate, mcc, mcc_degenerate) from inverted-space counts.

    Conventions for degenerate inputs: F1 is 1 when there are no positive
    predictions and no positive labels; MCC is 0 when its denominator is 0.
    """
    f1_denom = 2 * tp + fp + fn
    if f1_denom == 0:
        f1, f1_deg = 1.0, True
    else:
        f1, f1_deg = 2 * tp / f1_denom, False
    mcc_prod = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_prod == 0:
        mcc, mcc_deg = 0.0, True
    else:
        mcc = float(tp * tn - fp * fn) / math.sqrt(float(mcc_prod))
        mcc_deg = False
    return f1, f1_deg, mcc, mcc_deg


def word_metrics(
    probabilities: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    threshold: float = 0.5,
) -> WordMetrics:
    """Word-level metrics over per-utterance probability/label/mask arrays.

    p >= threshold predicts "correct"; the confusion matrix is built after
    inverting both predictions and labels so that the incorrect class is
    positive. exact_match is the fraction of utterances (with at least one
    valid word) whose every valid word is classified correctly.
    """
    if not (len(probabilities) == len(labels) == len(masks)):
        raise ValueError("probabilities, labels and masks must align per utterance")
    tp = fp = tn = fn = 0
    exact = 0
    n_nonempty = 0
    n_skipped = 0
    for p, c, m in zip(probabilities, labels, masks):
        p = np.asarray(p, dtype=np.float64)
        c = np.asarray(c)
        valid = np.asarray(m).astype(bool)
        if p.shape != c.shape or p.shape != valid.shape:
            raise ValueError("per-utterance arrays must share one shape")
        if not valid.any():
            n_skipped += 1
            continue
        n_nonempty += 1
        pred_correct = p[valid] >= threshold
        label_correct = c[valid].astype(bool)
        pred_pos = ~pred_correct
        label_pos = ~label_correct
        tp += int(np.sum(pred_pos & label_pos))
        fp += int(np.sum(pred_pos & ~label_pos))
        fn += int(np.sum(~pred_pos & label_pos))
        tn += int(np.sum(~pred_pos & ~label_pos))
        if bool(np.all(pred_correct == label_correct)):
            exact += 1
    n_valid = tp + fp + tn + fn
    if n_valid == 0:
        raise NoValidWords("no valid words across all utterances")
    f1, f1_deg, mcc, mcc_deg = confusion_metrics(tp, fp, tn, fn)
    return WordMetrics(
        f1=f1,
        mcc=mcc,
        accuracy=(tp + tn) / n_valid,
        exact_match=exact / n_nonempty,
        f1_degenerate=f1_deg,
        mcc_degenerate=mcc_deg,
        true_pos=tp,
        false_pos=fp,
        true_neg=tn,
        false_neg=fn,
        n_valid_words=n_valid,
        n_utterances=n_nonempty,
        n_skipped_utterances=n_skipped,
    )


def incorrect_word_f1(probabilities, labels, masks, threshold: float = 0.5) -> float:
    return word_metrics(probabilities, labels, masks, threshold).f1


@dataclass(frozen=True)
class SentenceMetrics:
    rmse: float
    pearson: Optional[float]  # None marks an undefined correlation
    n: int


def sentence_metrics(predicted: Sequence[float], target: Sequence[float]) -> SentenceMetrics:
    """RMSE (percentage points) and two-pass Pearson correlation.

    Pearson is reported as None (not 0) when either side has zero variance
    or fewer than two points; RMSE remains valid.
    """
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("predicted and target must be equal-length vectors")
    if a.size == 0:
        raise ValueError("sentence metrics need at least one pair")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    if a.size < 2:
        return SentenceMetrics(rmse=rmse, pearson=None, n=int(a.size))
    ca = a - a.mean()
    cb = b - b.mean()
    var_a = float(np.sum(ca * ca))
    var_b = float(np.sum(cb * cb))
    if var_a == 0.0 or var_b == 0.0:
        return SentenceMetrics(rmse=rmse, pearson=None, n=int(a.size))
    pearson = float(np.sum(ca * cb)) / math.sqrt(var_a * var_b)
    return SentenceMetrics(rmse=rmse, pearson=pearson, n=int(a.size))


@dataclass(frozen=True)
class TruthRecord:
    """Ground truth for one utterance, as read from a labels file."""

    utterance_id: str
    correct: np.ndarray
    valid: np.ndarray
    severity: str
    target_score: Optional[float]


def write_labels_file(path, truths: Sequence[TruthRecord]) -> None:
    """TSV: utterance_id, correct bits, valid bits, severity, target_score."""
    lines = ["utterance_id\tcorrect\tvalid\tseverity\ttarget_score"]
    for t in truths:
        correct = "".join(str(int(x)) for x in t.correct)
        valid = "".join(str(int(x)) for x in t.valid)
        score = "" if t.target_score is None else repr(float(t.target_score))
        lines.append(f"{t.utterance_id}\t{correct}\t{valid}\t{t.severity}\t{score}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_labels_file(path) -> dict[str, TruthRecord]:
    truths = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("utterance_id\t"):
            raise ValueError(f"{path}: not a labels file")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ValueError(f"{path}: malformed labels row: {line!r}")
            utt, correct, valid, severity, score = fields
            truths[utt] = TruthRecord(
                utterance_id=utt,
                correct=np.array([int(ch) for ch in correct], dtype=np.int8),
                valid=np.array([int(ch) for ch in valid], dtype=np.int8),
                severity=severity,
                target_score=float(score) if score else None,
            )
    return truths


_WORD_KEYS = ("f1", "mcc", "accuracy", "exact_match")


def _stratum_for_seed(records, truths, threshold: float) -> dict:
    probs, labels, masks = [], [], []
    pred_scores, true_scores = [], []
    for rec in records:
        truth = truths[rec.utterance_id]
        p = np.asarray(rec.probabilities, dtype=np.float64)
        if p.shape != truth.correct.shape:
            raise ValueError(
                f"{rec.utterance_id}: prediction has {p.size} words, labels have {truth.correct.size}"
            )
        probs.append(p)
        labels.append(truth.correct)
        masks.append(truth.valid)
        if rec.y_hat is not None and truth.target_score is not None:
            pred_scores.append(rec.y_hat)
            true_scores.append(truth.target_score)
    wm = word_metrics(probs, labels, masks, threshold)
    out = {
        "f1": wm.f1,
        "mcc": wm.mcc,
        "accuracy": wm.accuracy,
        "exact_match": wm.exact_match,
        "f1_degenerate": wm.f1_degenerate,
        "mcc_degenerate": wm.mcc_degenerate,
        "n_utterances": wm.n_utterances,
        "n_skipped_utterances": wm.n_skipped_utterances,
        "n_valid_words": wm.n_valid_words,
        "rmse": None,
        "pearson": None,
        "n_scored_sentences": len(pred_scores),
    }
    if pred_scores:
        sm = sentence_metrics(pred_scores, true_scores)
        out["rmse"] = sm.rmse
        out["pearson"] = sm.pearson
    return out


def _aggregate(per_seed: dict[int, dict]) -> tuple[dict, dict]:
    keys = _WORD_KEYS + ("rmse", "pearson")
    mean: dict = {}
    std: dict = {}
    for key in keys:
        values = [per_seed[s][key] for s in sorted(per_seed)]
        if any(v is None for v in values):
            mean[key] = None
            std[key] = None
        else:
            arr = np.asarray(values, dtype=np.float64)
            mean[key] = float(arr.mean())
            std[key] = float(arr.std())  # population std over seeds
    return mean, std


@dataclass
class MetricsReport:
    """Full-population and per-severity metrics, per seed with mean/std."""

    seeds: list[int]
    population: dict
    by_severity: dict[str, dict]
    counts: dict

    def to_json_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "population": self.population,
            "by_severity": self.by_severity,
            "counts": self.counts,
        }


def stratified_report(records, truths: dict[str, TruthRecord], threshold: float = 0.5) -> MetricsReport:
    """Build a MetricsReport from multi-seed PredictionRecords and truths."""
    seeds = sorted({rec.seed for rec in records})
    if not seeds:
        raise ValueError("no prediction records")
    by_seed: dict[int, list] = {s: [] for s in seeds}
    for rec in records:
        if rec.utterance_id not in truths:
            raise ValueError(f"no labels for utterance {rec.utterance_id}")
        by_seed[rec.seed].append(rec)
    for s in seeds:
        by_seed[s].sort(key=lambda r: r.utterance_id)

    severities = sorted({truths[r.utterance_id].severity for r in records})

    def build(filter_severity: Optional[str]) -> dict:
        per_seed = {}
        for s in seeds:
            recs = [
                r
                for r in by_seed[s]
                if filter_severity is None
                or truths[r.utterance_id].severity == filter_severity
            ]
            per_seed[s] = _stratum_for_seed(recs, truths, threshold)
        mean, std = _aggregate(per_seed)
        return {
            "per_seed": {str(s): per_seed[s] for s in seeds},
            "mean": mean,
            "std": std,
        }

    population = build(None)
    by_severity = {sev: build(sev) for sev in severities}
    n_utts = len({r.utterance_id for r in records})
    counts = {
        "n_utterances": n_utts,
        "n_seeds": len(seeds),
        "by_severity": {
            sev: sum(
                1
                for u in {r.utterance_id for r in records}
                if truths[u].severity == sev
            )
            for sev in severities
        },
    }
    return MetricsReport(seeds=seeds, population=population, by_severity=by_severity, counts=counts)


def _fmt(mean: Optional[float], std: Optional[float], decimals: int) -> str:
    if mean is None:
        return "undefined"
    if std is None:
        return f"{mean:.{decimals}f}"
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


_COLUMNS = (("F1", "f1", 3), ("MCC", "mcc", 3), ("Acc.", "accuracy", 3), ("Corr.", "pearson", 3), ("RMSE", "rmse", 2))


def render_main_table(named_reports: Sequence[tuple[str, MetricsReport]]) -> str:
    """One row per system: population metrics, seed mean and std."""
    header = ["System"] + [c[0] for c in _COLUMNS]
    rows = [header]
    for name, report in named_reports:
        mean = report.population["mean"]
        std = report.population["std"]
        rows.append([name] + [_fmt(mean[k], std[k], d) for _, k, d in _COLUMNS])
    return _render_rows(rows)


def render_severity_table(named_reports: Sequence[tuple[str, MetricsReport]]) -> str:
    """Severity blocks, one row per system inside each block."""
    header = ["Severity", "System"] + [c[0] for c in _COLUMNS]
    rows = [header]
    severities: list[str] = []
    for _, report in named_reports:
        for sev in report.by_severity:
            if sev not in severities:
                severities.append(sev)
    for sev in severities:
        for name, report in named_reports:
            stratum = report.by_severity.get(sev)
            if stratum is None:
                continue
            mean, std = stratum["mean"], stratum["std"]
            rows.append([sev, name] + [_fmt(mean[k], std[k], d) for _, k, d in _COLUMNS])
    return _render_rows(rows)


def render_report_text(named_reports: Sequence[tuple[str, MetricsReport]]) -> str:
    parts = [
        "Main comparison (per-seed metrics, mean ± std over seeds)",
        render_main_table(named_reports),
        "",
        "Severity-wise comparison",
        render_severity_table(named_reports),
    ]
    return "\n".join(parts) + "\n"


def _render_rows(rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
