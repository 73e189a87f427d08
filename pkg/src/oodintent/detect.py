"""Confidence scores (energy, max-softmax, GDA, LOF), detector fitting,
adaptive threshold calibration, and the accept-or-reject prediction rule.

Confidence convention: higher means more likely in-domain, for every
detector kind. A sample is rejected as OOD when its confidence is strictly
below the calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .data import OOD_CLASS
from .errors import CalibrationError, FitError, StateError, VersionError
from .numeric import SpdFactor, mahalanobis_sq, row_logsumexp, row_softmax, softmax, spd_factor

DETECTOR_KINDS = ("msp", "energy", "gda", "lof", "nplusone")
DETECTOR_FORMAT_VERSION = 1

_EPS = 1e-10  # density guard, keeps reachability ratios finite on duplicates
_CHUNK = 2048  # row block for pairwise-distance passes


def energy_score(logits, temperature: float) -> float:
    """-T * log(sum_i exp(logit_i / T)). Lower for in-domain samples."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("energy_score requires a non-empty logit vector")
    return float(-temperature * row_logsumexp(v[None, :] / temperature)[0])


def energy_confidences(logit_matrix, temperature: float) -> np.ndarray:
    """Row-wise negated energy scores (higher = more in-domain)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m = np.asarray(logit_matrix, dtype=np.float64)
    return temperature * row_logsumexp(m / temperature)


def msp_score(logits) -> float:
    """Maximum softmax probability, in (0, 1]."""
    return float(np.max(softmax(logits)))


def msp_confidences(logit_matrix) -> np.ndarray:
    """Row-wise maximum softmax probability."""
    return np.max(row_softmax(logit_matrix), axis=1)


# ---------------------------------------------------------------------------
# Gaussian discriminant analysis over feature space
# ---------------------------------------------------------------------------


@dataclass
class GdaModel:
    """Per-class centroids plus a shared (ridged) covariance factor."""

    means: np.ndarray
    covariance: np.ndarray
    ridge: float
    factor: SpdFactor = field(repr=False)
    _whiten: np.ndarray = field(repr=False)
    _means_white: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def confidence(self, x) -> float:
        """Negated squared Mahalanobis distance to the nearest centroid."""
        xv = np.asarray(x, dtype=np.float64)
        if xv.ndim != 1 or xv.shape[0] != self.dim:
            raise ValueError(f"feature has shape {xv.shape}, model dimension is {self.dim}")
        diffs = (self.means - xv).T  # (d, K)
        sol = self.factor.solve(diffs)
        sq = np.maximum(np.sum(diffs * sol, axis=0), 0.0)
        return float(-np.min(sq))

    def confidence_batch(self, X) -> np.ndarray:
        """Vectorized confidence over rows of X (whitened-space distances)."""
        xm = np.asarray(X, dtype=np.float64)
        xw = xm @ self._whiten.T
        d2 = _pairwise_sq_dists(xw, self._means_white)
        return -np.min(d2, axis=1)


def _finalize_gda(means: np.ndarray, covariance: np.ndarray, ridge: float) -> GdaModel:
    factor = spd_factor(covariance, ridge)
    whiten = solve_triangular(factor.lower, np.eye(factor.dim), lower=True)
    return GdaModel(
        means=means,
        covariance=covariance,
        ridge=float(ridge),
        factor=factor,
        _whiten=whiten,
        _means_white=means @ whiten.T,
    )


def fit_gda(features, labels, ridge: float | None = None, num_classes: int | None = None) -> GdaModel:
    """Fit per-class means and the pooled within-class covariance.

    The covariance is the within-class scatter divided by the total sample
    count, then ridged (default 1e-6 * trace/dim) and factored. Every class
    must have at least two samples.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must align with feature rows")
    k = int(num_classes) if num_classes is not None else int(np.max(y)) + 1
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels out of range [0, {k})")
    n, d = X.shape
    means = np.empty((k, d), dtype=np.float64)
    scatter = np.zeros((d, d), dtype=np.float64)
    for c in range(k):
        rows = X[y == c]
        if rows.shape[0] < 2:
            raise FitError(f"class {c} has {rows.shape[0]} samples; need at least 2")
        mu = rows.mean(axis=0)
        means[c] = mu
        centered = rows - mu
        scatter += centered.T @ centered
    covariance = scatter / n
    if ridge is None:
        ridge = 1e-6 * float(np.trace(covariance)) / d
    return _finalize_gda(means, covariance, float(ridge))


def gda_confidence(model: GdaModel, x) -> float:
    return model.confidence(x)


# ---------------------------------------------------------------------------
# Local outlier factor over feature space
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


@dataclass
class LofModel:
    """Stored training vectors with precomputed k-distances and densities.

    Neighborhoods are tie-inclusive: every point within the k-distance
    counts as a neighbor, so grids and other tied geometries are handled
    exactly as the definitional computation does.
    """

    store: np.ndarray
    k: int
    k_distances: np.ndarray = field(repr=False)
    lrd: np.ndarray = field(repr=False)
    training_scores: np.ndarray = field(repr=False)

    def score(self, x) -> float:
        """Local outlier factor of a query point (about 1 for inliers)."""
        return float(self.score_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def score_batch(self, X) -> np.ndarray:
        xm = np.asarray(X, dtype=np.float64)
        if xm.ndim != 2 or xm.shape[1] != self.store.shape[1]:
            raise ValueError(
                f"queries have shape {xm.shape}, store dimension is {self.store.shape[1]}"
            )
        out = np.empty(xm.shape[0], dtype=np.float64)
        for lo in range(0, xm.shape[0], _CHUNK):
            rows = xm[lo : lo + _CHUNK]
            d = np.sqrt(_pairwise_sq_dists(rows, self.store))
            kdist = np.partition(d, self.k - 1, axis=1)[:, self.k - 1]
            mask = d <= kdist[:, None]
            counts = mask.sum(axis=1)
            reach = np.maximum(self.k_distances[None, :], d)
            lrd_q = 1.0 / (_EPS + (reach * mask).sum(axis=1) / counts)
            out[lo : lo + _CHUNK] = ((self.lrd[None, :] * mask).sum(axis=1) / counts) / lrd_q
        return out

    def confidence(self, x) -> float:
        return -self.score(x)

    def confidence_batch(self, X) -> np.ndarray:
        return -self.score_batch(X)


def fit_lof(features, k: int = 20) -> LofModel:
    """Precompute k-distances, local reachability densities, and the
    training-point outlier factors for the stored vectors."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise FitError("features must be a non-empty (n, d) matrix")
    n = X.shape[0]
    if not 1 <= k < n:
        raise FitError(f"neighborhood size {k} must be in [1, {n - 1}] for {n} stored vectors")

    kdist = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        d = np.sqrt(_pairwise_sq_dists(X[lo : lo + _CHUNK], X))
        d[np.arange(d.shape[0]), np.arange(lo, lo + d.shape[0])] = np.inf
        kdist[lo : lo + _CHUNK] = np.partition(d, k - 1, axis=1)[:, k - 1]

    lrd = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        d = np.sqrt(_pairwise_sq_dists(X[lo : lo + _CHUNK], X))
        d[np.arange(d.shape[0]), np.arange(lo, lo + d.shape[0])] = np.inf
        mask = d <= kdist[lo : lo + _CHUNK, None]
        counts = mask.sum(axis=1)
        reach = np.maximum(kdist[None, :], d)
        reach[~mask] = 0.0
        lrd[lo : lo + _CHUNK] = 1.0 / (_EPS + reach.sum(axis=1) / counts)

    training = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        d = np.sqrt(_pairwise_sq_dists(X[lo : lo + _CHUNK], X))
        d[np.arange(d.shape[0]), np.arange(lo, lo + d.shape[0])] = np.inf
        mask = d <= kdist[lo : lo + _CHUNK, None]
        counts = mask.sum(axis=1)
        training[lo : lo + _CHUNK] = ((lrd[None, :] * mask).sum(axis=1) / counts) / lrd[
            lo : lo + _CHUNK
        ]

    return LofModel(store=X, k=int(k), k_distances=kdist, lrd=lrd, training_scores=training)


def lof_confidence(model: LofModel, x) -> float:
    return model.confidence(x)


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def threshold_sweep(confidences, is_ood) -> tuple[float, float]:
    """Best (threshold, OOD F1) under the `confidence < threshold -> OOD` rule.

    Candidates are midpoints between consecutive distinct confidences plus
    -inf/+inf sentinels; ties in F1 resolve to the smallest threshold.
    """
    c = np.asarray(confidences, dtype=np.float64)
    o = np.asarray(is_ood, dtype=bool)
    if c.ndim != 1 or c.shape != o.shape or c.size == 0:
        raise ValueError("confidences and is_ood must be equal-length non-empty vectors")
    total_ood = int(o.sum())
    if total_ood == 0 or total_ood == c.size:
        raise CalibrationError("calibration needs at least one IND and one OOD sample")

    order = np.argsort(c, kind="stable")
    cs = c[order]
    tp = np.concatenate([[0], np.cumsum(o[order])])  # OOD among the i lowest
    i = np.arange(c.size + 1)
    fp = i - tp
    fn = total_ood - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)

    valid = np.ones(c.size + 1, dtype=bool)
    valid[1:-1] = cs[1:] > cs[:-1]  # only boundaries between distinct values
    f1 = np.where(valid, f1, -1.0)
    best = int(np.argmax(f1))  # first max = smallest threshold
    if best == 0:
        thr = -math.inf
    elif best == c.size:
        thr = math.inf
    else:
        thr = float(0.5 * (cs[best - 1] + cs[best]))
    return thr, float(f1[best])


def calibrate_threshold(confidences, is_ood) -> float:
    """Threshold maximizing OOD F1 on the given validation confidences."""
    return threshold_sweep(confidences, is_ood)[0]


def binary_ood_f1(pred_ood, gold_ood) -> float:
    """F1 of the OOD class for boolean prediction/gold vectors."""
    p = np.asarray(pred_ood, dtype=bool)
    g = np.asarray(gold_ood, dtype=bool)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# The detector object and the prediction rule
# ---------------------------------------------------------------------------


@dataclass
class Detector:
    """A fitted score function plus (for threshold kinds) a calibrated cutoff."""

    kind: str
    threshold: float | None = None
    temperature: float = 1.0
    gda: GdaModel | None = None
    lof: LofModel | None = None

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "energy" and self.temperature <= 0:
            raise ValueError("energy detector needs a positive temperature")
        if self.kind == "gda" and self.gda is None:
            raise ValueError("gda detector needs a fitted GdaModel")
        if self.kind == "lof" and self.lof is None:
            raise ValueError("lof detector needs a fitted LofModel")

    @property
    def needs_features(self) -> bool:
        return self.kind in ("gda", "lof")

    def confidence(self, logits=None, features=None) -> float:
        if self.kind == "msp":
            return msp_score(logits)
        if self.kind == "energy":
            return -energy_score(logits, self.temperature)
        if self.kind == "gda":
            return self.gda.confidence(features)
        if self.kind == "lof":
            return self.lof.confidence(features)
        # nplusone: probability mass away from the rejection class
        return 1.0 - float(softmax(logits)[-1])

    def confidence_batch(self, logits=None, features=None) -> np.ndarray:
        if self.kind == "msp":
            return msp_confidences(logits)
        if self.kind == "energy":
            return energy_confidences(logits, self.temperature)
        if self.kind == "gda":
            return self.gda.confidence_batch(features)
        if self.kind == "lof":
            return self.lof.confidence_batch(features)
        return 1.0 - row_softmax(logits)[:, -1]


def predict_batch(model, detector: Detector, X) -> np.ndarray:
    """Predicted class index per row, with OOD_CLASS for rejections."""
    xm = np.asarray(X, dtype=np.float64)
    logits = model.logits(xm)
    if detector.kind == "nplusone":
        top = np.argmax(logits, axis=1)
        return np.where(top == logits.shape[1] - 1, OOD_CLASS, top)
    if detector.threshold is None:
        raise StateError(f"{detector.kind} detector has no calibrated threshold")
    features = model.hidden(xm) if detector.needs_features else None
    conf = detector.confidence_batch(logits=logits, features=features)
    accepted = np.argmax(logits, axis=1)
    return np.where(conf < detector.threshold, OOD_CLASS, accepted)


def predict(model, detector: Detector, x) -> int:
    """Single-sample prediction: an in-domain class index or OOD_CLASS."""
    return int(predict_batch(model, detector, np.asarray(x, dtype=np.float64)[None, :])[0])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def detector_to_dict(det: Detector) -> dict:
    out = {
        "format_version": DETECTOR_FORMAT_VERSION,
        "kind": det.kind,
        "threshold": det.threshold,
        "temperature": det.temperature,
        "gda": None,
        "lof": None,
    }
    if det.gda is not None:
        out["gda"] = {
            "means": det.gda.means.tolist(),
            "covariance": det.gda.covariance.tolist(),
            "ridge": det.gda.ridge,
        }
    if det.lof is not None:
        out["lof"] = {"store": det.lof.store.tolist(), "k": det.lof.k}
    return out


def detector_from_dict(obj: dict) -> Detector:
    version = obj.get("format_version")
    if version != DETECTOR_FORMAT_VERSION:
        raise VersionError(
            f"unsupported detector format: expected {DETECTOR_FORMAT_VERSION}, found {version}"
        )
    gda = None
    if obj.get("gda") is not None:
        g = obj["gda"]
        gda = _finalize_gda(
            np.asarray(g["means"], dtype=np.float64),
            np.asarray(g["covariance"], dtype=np.float64),
            float(g["ridge"]),
        )
    lof = None
    if obj.get("lof") is not None:
        lof = fit_lof(np.asarray(obj["lof"]["store"], dtype=np.float64), int(obj["lof"]["k"]))
    threshold = obj.get("threshold")
    return Detector(
        kind=obj["kind"],
        threshold=None if threshold is None else float(threshold),
        temperature=float(obj.get("temperature", 1.0)),
        gda=gda,
        lof=lof,
    )
