"""Defender-side detection: zero checks, outlier filtering and secreting-coordinate probes."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import linalg
from sklearn.cluster import KMeans

from .nn.model import ModelParams, extract

log = logging.getLogger(__name__)

OUTLIER_METHODS = ("kmeans", "pca", "que")


@dataclass
class DetectionReport:
    method: str
    flagged_ids: list[int]
    detection_percentage: float
    aux: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


# -- zero-activation check ----------------------------------------------------
@dataclass
class ZeroCheckResult:
    flagged: bool
    zero_fractions: np.ndarray
    flagged_coords: list[int]
    tau: float

    def report(self) -> DetectionReport:
        return DetectionReport("zero", [], float("nan"), {
            "flagged": self.flagged, "tau": self.tau, "flagged_coords": self.flagged_coords,
            "max_zero_fraction": float(self.zero_fractions.max()),
            "zero_fractions": [float(v) for v in self.zero_fractions]})


def load_zero_check_calibration() -> dict:
    text = resources.files("artifact").joinpath("data/zero_check_calibration.json").read_text()
    return json.loads(text)


def default_tau() -> float:
    return float(load_zero_check_calibration()["tau"])


def zero_fractions(activations: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    return (np.abs(activations) < epsilon).mean(axis=0)


def zero_activation_check(upstream: ModelParams, random_samples, epsilon: float = 1e-6,
                          tau: float | None = None) -> ZeroCheckResult:
    """Flag coordinates whose near-zero fraction exceeds ``tau``.

    ``tau`` defaults to the shipped calibration: the maximum per-coordinate
    zero fraction of clean models plus three standard deviations.
    """
    x = np.asarray(random_samples, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("zero check needs a non-empty sample matrix")
    tau = default_tau() if tau is None else tau
    frac = zero_fractions(extract(upstream, x), epsilon)
    coords = [int(i) for i in np.flatnonzero(frac > tau)]
    return ZeroCheckResult(bool(coords), frac, coords, float(tau))


def calibrate_tau(baseline_models: list[ModelParams], samples, epsilon: float = 1e-6) -> dict:
    """tau = mean + 3 std of the per-model maximum coordinate zero fraction."""
    maxes = np.array([zero_fractions(extract(m, samples), epsilon).max() for m in baseline_models])
    return {"tau": float(maxes.mean() + 3 * maxes.std()), "max_zero_fractions": maxes.tolist(),
            "epsilon": epsilon, "n_models": len(baseline_models), "n_samples": int(len(samples))}


# -- outlier scores -------------------------------------------------------------
def _kmeans_scores(acts: np.ndarray, seed: int) -> np.ndarray:
    km = KMeans(n_clusters=2, n_init=10, random_state=int(seed) % (1 << 32)).fit(acts)
    labels = km.labels_
    counts = np.bincount(labels, minlength=2)
    if counts.min() == 0:
        return np.zeros(len(acts))
    small = int(np.argmin(counts)) if counts[0] != counts[1] else 1
    large = 1 - small
    dist = np.linalg.norm(acts - km.cluster_centers_[large], axis=1)
    # membership dominates; distance breaks ties within a group
    return dist + (labels == small) * (dist.max() + 1.0)


def _pca_scores(acts: np.ndarray) -> np.ndarray:
    centered = acts - acts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return (centered @ vt[0]) ** 2


def robust_whitener(acts: np.ndarray, trim: float = 0.1, iters: int = 3, floor: float = 1e-2):
    """Mean and inverse square root of a trimmed covariance estimate.

    The first core is chosen with a diagonal, per-coordinate trimmed scale
    around the median, so a tight minority cluster cannot hide inside a
    covariance it inflated itself. Each later pass keeps the ``1 - trim``
    fraction of rows closest under the current full estimate. Eigenvalues
    are floored at ``floor`` times their mean so that directions the core
    never visits are amplified by a bounded factor.
    """
    n, dim = acts.shape
    n_keep = max(min(n, dim + 1), int(math.ceil((1 - trim) * n)))
    med = np.median(acts, axis=0)
    dev = np.sort(np.abs(acts - med), axis=0)[:n_keep]
    scale = (dev ** 2).mean(axis=0)
    if scale.max() <= 1e-24:
        raise np.linalg.LinAlgError("rank-degenerate covariance")
    scale = np.maximum(scale, floor * scale.mean())
    dist = (((acts - med) ** 2) / scale).sum(axis=1)
    keep = np.sort(np.argsort(dist, kind="stable")[:n_keep])
    for _ in range(iters):
        mu = acts[keep].mean(axis=0)
        cov = np.cov(acts[keep], rowvar=False).reshape(dim, dim)
        evals, evecs = linalg.eigh(cov)
        if evals.max() <= 1e-24:
            raise np.linalg.LinAlgError("rank-degenerate covariance")
        evals = np.maximum(evals, floor * evals.mean())
        inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
        dist = (((acts - mu) @ inv_sqrt) ** 2).sum(axis=1)
        keep = np.sort(np.argsort(dist, kind="stable")[:n_keep])
    return mu, inv_sqrt


def que_matrix(sigma: np.ndarray, alpha: float) -> np.ndarray:
    """exp(alpha (S - I) / (||S||_2 - 1)); identity when ||S||_2 <= 1."""
    evals, evecs = linalg.eigh(sigma)
    top = evals.max()
    if top - 1.0 <= 1e-12:
        return np.eye(len(sigma))
    w = np.exp(alpha * (evals - 1.0) / (top - 1.0))
    return (evecs * w) @ evecs.T


def _que_scores(acts: np.ndarray, alpha: float, trim: float) -> np.ndarray:
    mu, inv_sqrt = robust_whitener(acts, trim)
    white = (acts - mu) @ inv_sqrt
    sigma = white.T @ white / len(white)
    m = que_matrix(sigma, alpha)
    return np.einsum("ij,jk,ik->i", white, m, white) / np.trace(m)


def outlier_scores(activation_matrix, method: str = "que", alpha_que: float = 4.0, seed: int = 0,
                   trim: float = 0.1) -> np.ndarray:
    """Per-sample outlier scores; larger means more anomalous."""
    acts = np.asarray(activation_matrix, dtype=np.float64)
    if acts.ndim != 2 or len(acts) < 2:
        raise ValueError("need at least two samples")
    if method == "kmeans":
        return _kmeans_scores(acts, seed)
    if method == "pca":
        return _pca_scores(acts)
    if method == "que":
        # drop coordinates that are constant over the set (e.g. dead ReLUs)
        live = acts.std(axis=0) > 1e-12
        if not live.any():
            return np.zeros(len(acts))
        try:
            return _que_scores(acts[:, live], alpha_que, trim)
        except np.linalg.LinAlgError:
            warnings.warn("degenerate covariance; falling back to pca scores", RuntimeWarning)
            return _pca_scores(acts)
    raise ValueError(f"unknown outlier method {method!r}")


def filter_and_rate(scores, n_t_estimate: int, true_property_flags, ids=None,
                    method: str = "") -> DetectionReport:
    """Flag the ceil(1.5 * n_t_estimate) top scores and measure property recall.

    Ties go to the smaller sample id. Detection percentage is
    |flagged & property| / (number of property samples).
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(true_property_flags).astype(bool)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    if n_t_estimate < 1:
        raise ValueError("n_t estimate must be >= 1")
    budget = int(math.ceil(1.5 * n_t_estimate))
    if budget > len(scores):
        raise ValueError(f"flag budget {budget} exceeds set size {len(scores)}")
    order = np.lexsort((ids, -scores))
    flagged = order[:budget]
    n_true = int(flags.sum())
    hits = int(flags[flagged].sum())
    if n_true == 0:
        pct = 0.0
    else:
        pct = hits / n_true
    if pct > 1.5:
        warnings.warn("detection percentage above 1.5; clamping", RuntimeWarning)
        pct = 1.5
    return DetectionReport(method, [int(i) for i in ids[flagged]], float(pct),
                           {"budget": budget, "hits": hits, "n_property": n_true})


def detect(activations, property_flags, n_t_estimate: int, method: str, ids=None,
           alpha_que: float = 4.0, seed: int = 0) -> DetectionReport:
    scores = outlier_scores(activations, method, alpha_que, seed)
    report = filter_and_rate(scores, n_t_estimate, property_flags, ids, method)
    if method == "que":
        report.aux["note"] = "simplified QUE (trimmed-covariance whitening, no clustering or dimension reduction)"
    return report


# -- secreting-coordinate probes -----------------------------------------------
def average_value_probe(upstream: ModelParams, samples, m_size: int, true_mask=None) -> dict:
    """Candidates = ceil(1.5 m) coordinates with the smallest mean activation."""
    acts = extract(upstream, samples)
    A = acts.shape[1]
    if m_size > A:
        raise ValueError("m_size exceeds activation dimension")
    k = int(math.ceil(1.5 * m_size))
    means = acts.mean(axis=0)
    cand = np.sort(np.argsort(means, kind="stable")[:k])
    out = {"candidates": [int(c) for c in cand]}
    if true_mask is not None:
        truth = set(np.flatnonzero(np.asarray(true_mask, dtype=bool)).tolist())
        out["detection_rate"] = len(truth & set(out["candidates"])) / m_size
    return out


def intersection_probe(upstream: ModelParams, samples, m_size: int, true_mask=None) -> dict:
    """Intersect each sample's 5 m smallest-activation coordinates."""
    acts = extract(upstream, samples)
    if len(acts) == 0:
        raise ValueError("intersection probe needs at least one sample")
    k = min(5 * m_size, acts.shape[1])
    shortlist = np.argsort(acts, axis=1, kind="stable")[:, :k]
    keep = np.zeros(acts.shape[1], dtype=bool)
    keep[shortlist[0]] = True
    for row in shortlist[1:]:
        here = np.zeros_like(keep)
        here[row] = True
        keep &= here
    cand = [int(c) for c in np.flatnonzero(keep)]
    out = {"candidates": cand}
    if true_mask is not None:
        truth = set(np.flatnonzero(np.asarray(true_mask, dtype=bool)).tolist())
        hit = len(truth & set(cand))
        precision = hit / len(cand) if cand else 0.0
        recall = hit / m_size
        out.update(precision=precision, recall=recall,
                   f1=0.0 if hit == 0 else 2 * precision * recall / (precision + recall))
    return out
