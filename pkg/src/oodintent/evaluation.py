"""Metrics, score-distribution statistics, multi-seed aggregation, and the
inference-latency benchmark.

The detection task is scored as (K+1)-way classification with OOD as one
extra class; OOD is the positive class for the detection metrics.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import OOD_CLASS
from .errors import BenchmarkWarning

HEADLINE_METRICS = ("ind_accuracy", "ind_macro_f1", "ood_recall", "ood_f1")


@dataclass
class ClassScore:
    class_index: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    ind_accuracy: float
    ind_macro_f1: float
    ood_recall: float
    ood_f1: float
    ood_precision: float
    per_class: list[ClassScore]
    confusion: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "ind_accuracy": self.ind_accuracy,
            "ind_macro_f1": self.ind_macro_f1,
            "ood_recall": self.ood_recall,
            "ood_f1": self.ood_f1,
            "ood_precision": self.ood_precision,
            "per_class": [vars(c) for c in self.per_class],
            "confusion": self.confusion,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            ind_accuracy=obj["ind_accuracy"],
            ind_macro_f1=obj["ind_macro_f1"],
            ood_recall=obj["ood_recall"],
            ood_f1=obj["ood_f1"],
            ood_precision=obj["ood_precision"],
            per_class=[ClassScore(**c) for c in obj["per_class"]],
            confusion=dict(obj["confusion"]),
        )


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def compute_metrics(predictions, gold, num_classes: int) -> EvalReport:
    """Score aligned prediction/gold label lists.

    Labels are class indices in [0, num_classes) or OOD_CLASS. IND accuracy
    counts a rejected in-domain sample as an error; classes absent from both
    gold and predictions contribute F1 = 0 to the macro average.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    gd = np.asarray(gold, dtype=np.int64)
    if pred.shape != gd.shape or pred.ndim != 1:
        raise ValueError("predictions and gold must be equal-length 1-d sequences")
    for name, arr in (("predictions", pred), ("gold", gd)):
        bad = (arr != OOD_CLASS) & ((arr < 0) | (arr >= num_classes))
        if np.any(bad):
            raise ValueError(f"unknown label {int(arr[bad][0])} in {name}")

    # Confusion over K+1 classes with OOD folded onto index num_classes.
    k = num_classes
    p_idx = np.where(pred == OOD_CLASS, k, pred)
    g_idx = np.where(gd == OOD_CLASS, k, gd)
    matrix = np.zeros((k + 1, k + 1), dtype=np.int64)
    np.add.at(matrix, (g_idx, p_idx), 1)

    per_class = []
    f1_sum = 0.0
    for c in range(k):
        tp = int(matrix[c, c])
        fp = int(matrix[:, c].sum()) - tp
        fn = int(matrix[c, :].sum()) - tp
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class.append(
            ClassScore(
                class_index=c,
                precision=precision,
                recall=recall,
                f1=f1,
                support=int(matrix[c, :].sum()),
            )
        )
        f1_sum += f1

    tp_o = int(matrix[k, k])
    fp_o = int(matrix[:, k].sum()) - tp_o
    fn_o = int(matrix[k, :].sum()) - tp_o
    ood_precision, ood_recall, ood_f1 = _prf(tp_o, fp_o, fn_o)

    gold_ind = int(matrix[:k, :].sum())
    ind_correct = int(np.trace(matrix[:k, :k]))
    confusion = {
        "ind_correct": ind_correct,
        "ind_as_other_ind": int(matrix[:k, :k].sum()) - ind_correct,
        "ind_rejected": int(matrix[:k, k].sum()),
        "ood_rejected": tp_o,
        "ood_accepted": fn_o,
    }
    return EvalReport(
        ind_accuracy=ind_correct / gold_ind if gold_ind else 0.0,
        ind_macro_f1=f1_sum / k if k else 0.0,
        ood_recall=ood_recall,
        ood_f1=ood_f1,
        ood_precision=ood_precision,
        per_class=per_class,
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# Score-distribution statistics
# ---------------------------------------------------------------------------


@dataclass
class ScoreStats:
    ind_mean: float
    ind_variance: float
    ood_mean: float
    ood_variance: float
    bin_edges: np.ndarray
    ind_counts: np.ndarray
    ood_counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "ind": {"mean": self.ind_mean, "variance": self.ind_variance},
            "ood": {"mean": self.ood_mean, "variance": self.ood_variance},
            "bin_edges": self.bin_edges.tolist(),
            "ind_counts": self.ind_counts.tolist(),
            "ood_counts": self.ood_counts.tolist(),
        }


def score_stats(confidences, is_ood, bins: int = 50) -> ScoreStats:
    """Group means/variances (population) and shared-edge histograms."""
    c = np.asarray(confidences, dtype=np.float64)
    o = np.asarray(is_ood, dtype=bool)
    if c.ndim != 1 or c.shape != o.shape or c.size == 0:
        raise ValueError("confidences and is_ood must be equal-length non-empty vectors")
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    ind = c[~o]
    ood = c[o]
    if ind.size == 0 or ood.size == 0:
        raise ValueError("both the IND and the OOD group must be non-empty")
    lo, hi = float(np.min(c)), float(np.max(c))
    if hi <= lo:  # all confidences identical; give the histogram some width
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    ind_counts, _ = np.histogram(ind, bins=edges)
    ood_counts, _ = np.histogram(ood, bins=edges)
    return ScoreStats(
        ind_mean=float(np.mean(ind)),
        ind_variance=float(np.var(ind)),
        ood_mean=float(np.mean(ood)),
        ood_variance=float(np.var(ood)),
        bin_edges=edges,
        ind_counts=ind_counts,
        ood_counts=ood_counts,
    )


# ---------------------------------------------------------------------------
# Multi-seed aggregation
# ---------------------------------------------------------------------------


def aggregate_runs(reports: list[EvalReport]) -> dict:
    """Mean and sample standard deviation of the headline metrics."""
    if not reports:
        raise ValueError("aggregate_runs needs at least one report")
    out: dict = {"n_runs": len(reports)}
    for name in HEADLINE_METRICS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": float(np.mean(values)), "std": std}
    return out


# ---------------------------------------------------------------------------
# Inference-latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class TimingReport:
    per_sample_seconds: dict[str, float]
    ratios: dict[str, float]
    num_samples: int
    repetitions: int

    def to_dict(self) -> dict:
        return {
            "per_sample_seconds": self.per_sample_seconds,
            "ratios": self.ratios,
            "num_samples": self.num_samples,
            "repetitions": self.repetitions,
        }


def benchmark_inference(model, detectors: dict, samples, repetitions: int = 5) -> TimingReport:
    """Median per-sample scoring time per detector, normalized to MSP = 1.00x.

    Only the scoring path is timed; the shared encoder forward (logits and
    hidden features) is computed once outside the timed region for every
    detector alike.
    """
    if repetitions < 3:
        raise ValueError(f"repetitions must be at least 3, got {repetitions}")
    if "msp" not in detectors:
        raise ValueError("an 'msp' detector is required as the timing baseline")
    X = np.asarray(samples, dtype=np.float64)
    n = X.shape[0]
    if n < 100:
        warnings.warn(
            f"only {n} samples; per-sample timings may be unstable", BenchmarkWarning
        )
    logits = model.logits(X)
    features = model.hidden(X)

    per_sample: dict[str, float] = {}
    for name, det in detectors.items():
        needs = det.needs_features
        for i in range(min(n, 32)):  # warm-up, untimed
            det.confidence(logits=logits[i], features=features[i] if needs else None)
        reps = []
        for _ in range(repetitions):
            start = time.perf_counter()
            for i in range(n):
                det.confidence(logits=logits[i], features=features[i] if needs else None)
            reps.append((time.perf_counter() - start) / n)
        per_sample[name] = float(np.median(reps))

    base = per_sample["msp"]
    ratios = {name: (1.0 if name == "msp" else t / base) for name, t in per_sample.items()}
    return TimingReport(
        per_sample_seconds=per_sample,
        ratios=ratios,
        num_samples=n,
        repetitions=repetitions,
    )


# ---------------------------------------------------------------------------
# Score-dump files
# ---------------------------------------------------------------------------

SCORE_DUMP_HEADER = ("id", "gold", "confidence", "prediction")


def write_score_dump(path, ids, gold_labels, confidences, predictions) -> None:
    """One CSV record per evaluated sample: id, gold, confidence, prediction."""
    rows = list(zip(ids, gold_labels, confidences, predictions))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_DUMP_HEADER)
        for sample_id, gold, conf, pred in rows:
            writer.writerow([sample_id, gold, repr(float(conf)), pred])


def read_score_dump(path) -> tuple[list[str], list[str], np.ndarray, list[str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SCORE_DUMP_HEADER:
            raise ValueError(f"{path}: not a score dump (bad header {header})")
        ids, gold, conf, pred = [], [], [], []
        for row in reader:
            if len(row) != 4:
                raise ValueError(f"{path}: malformed score-dump row {row}")
            ids.append(row[0])
            gold.append(row[1])
            conf.append(float(row[2]))
            pred.append(row[3])
    return ids, gold, np.asarray(conf, dtype=np.float64), pred
