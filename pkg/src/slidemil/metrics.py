"""Evaluation statistics: BACC, AUC, kappa, Pearson, C-index, Kaplan-Meier,
log-rank, bootstrap CIs, rejection curves.

Every rank statistic counts wins and ties as integers before a single final
division, so values agree bit-for-bit with brute-force pair enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import SurvivalRecord
from .errors import MetricUndefinedError, ValidationError


@dataclass
class BootstrapResult:
    point: float
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n_replicates: int

    def to_dict(self) -> dict:
        return {"point": self.point, "mean": self.mean, "std": self.std,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "n_replicates": self.n_replicates}


@dataclass
class KMCurve:
    times: np.ndarray     # distinct event times, ascending
    survival: np.ndarray  # product-limit estimate after each time
    at_risk: np.ndarray   # subjects at risk just before each time


def balanced_accuracy(true_labels, predicted_labels) -> float:
    """Mean per-class recall over the classes present in the truth."""
    truth = np.asarray(true_labels, dtype=int)
    pred = np.asarray(predicted_labels, dtype=int)
    if truth.shape != pred.shape or truth.size == 0:
        raise MetricUndefinedError("need aligned, nonempty label arrays")
    recalls = []
    for c in np.unique(truth):
        in_class = truth == c
        recalls.append(np.mean(pred[in_class] == c))
    return float(np.mean(recalls))


def auc(labels, scores) -> float:
    """Binary AUC as the Mann-Whitney statistic: wins + half-ties over all
    positive/negative pairs, counted exactly."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    neg_sorted = np.sort(neg)
    wins = int(np.searchsorted(neg_sorted, pos, side="left").sum())
    ties = int((np.searchsorted(neg_sorted, pos, side="right")
                - np.searchsorted(neg_sorted, pos, side="left")).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def cohens_kappa(true_labels, predicted_labels, weighting: str = "none") -> float:
    """Agreement beyond chance; weighting 'none' or 'quadratic'."""
    if weighting not in ("none", "quadratic"):
        raise ValidationError(f"unknown kappa weighting {weighting!r}")
    truth = np.asarray(true_labels, dtype=int)
    pred = np.asarray(predicted_labels, dtype=int)
    if truth.shape != pred.shape or truth.size == 0:
        raise MetricUndefinedError("need aligned, nonempty label arrays")
    cats = np.unique(np.concatenate([truth, pred]))
    n_cat = len(cats)
    index = {c: i for i, c in enumerate(cats)}
    observed = np.zeros((n_cat, n_cat), dtype=np.float64)
    for t, p in zip(truth, pred):
        observed[index[t], index[p]] += 1.0
    observed /= truth.size
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    if weighting == "none":
        weights = 1.0 - np.eye(n_cat)
    else:
        if n_cat == 1:
            weights = np.zeros((1, 1))
        else:
            grid = np.arange(n_cat, dtype=np.float64)
            weights = ((grid[:, None] - grid[None, :]) / (n_cat - 1)) ** 2
    disagreement_expected = float((weights * expected).sum())
    if disagreement_expected == 0.0:
        raise MetricUndefinedError("kappa undefined: chance disagreement is zero")
    return 1.0 - float((weights * observed).sum()) / disagreement_expected


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise MetricUndefinedError("Pearson r needs >= 2 aligned points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise MetricUndefinedError("Pearson r undefined for constant input")
    return float((xc * yc).sum() / denom)


def mean_squared_error(truth, pred) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.size == 0:
        raise MetricUndefinedError("need aligned, nonempty arrays")
    return float(np.mean((truth - pred) ** 2))


def concordance_index(times, events, risks) -> float:
    """Harrell's C: over pairs (i, j) with t_i < t_j and event at i, count
    risk_i > risk_j as a win and equal risks as half."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=int)
    risks = np.asarray(risks, dtype=np.float64)
    n = len(times)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise MetricUndefinedError("no comparable pairs for the C-index")
    wins = int((comparable & (risks[:, None] > risks[None, :])).sum())
    ties = int((comparable & (risks[:, None] == risks[None, :])).sum())
    return (wins + 0.5 * ties) / n_pairs


def km_curve(times, events) -> KMCurve:
    """Product-limit survival estimate over the distinct event times."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise MetricUndefinedError("empty survival sample")
    event_times = np.unique(times[events == 1])
    survival = np.empty(len(event_times), dtype=np.float64)
    at_risk = np.empty(len(event_times), dtype=int)
    s = 1.0
    for i, t in enumerate(event_times):
        n_risk = int((times >= t).sum())
        d = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - d / n_risk
        survival[i] = s
        at_risk[i] = n_risk
    return KMCurve(times=event_times, survival=survival, at_risk=at_risk)


def logrank_test(group_a: list[SurvivalRecord], group_b: list[SurvivalRecord]) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi-square statistic, p-value) at 1 dof."""
    if not group_a or not group_b:
        raise MetricUndefinedError("both groups must be nonempty")
    times_a = np.array([r.time for r in group_a], dtype=np.float64)
    events_a = np.array([r.event for r in group_a], dtype=int)
    times_b = np.array([r.time for r in group_b], dtype=np.float64)
    events_b = np.array([r.event for r in group_b], dtype=int)
    all_times = np.concatenate([times_a, times_b])
    all_events = np.concatenate([events_a, events_b])
    event_times = np.unique(all_times[all_events == 1])
    if len(event_times) == 0:
        raise MetricUndefinedError("log-rank needs at least one event")

    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n_a = int((times_a >= t).sum())
        n_b = int((times_b >= t).sum())
        n_tot = n_a + n_b
        d_a = int(((times_a == t) & (events_a == 1)).sum())
        d_tot = d_a + int(((times_b == t) & (events_b == 1)).sum())
        expected_a = d_tot * n_a / n_tot
        observed_minus_expected += d_a - expected_a
        if n_tot > 1:
            variance += (d_tot * (n_a / n_tot) * (n_b / n_tot)
                         * (n_tot - d_tot) / (n_tot - 1))
    if variance == 0.0:
        raise MetricUndefinedError("log-rank variance is zero")
    statistic = observed_minus_expected ** 2 / variance
    p_value = math.erfc(math.sqrt(statistic / 2.0))  # chi-square survival, 1 dof
    return float(statistic), float(p_value)


def bootstrap_ci(metric, data: tuple, n_replicates: int = 1000, seed: int = 42,
                 max_redraw_factor: int = 100) -> BootstrapResult:
    """Percentile bootstrap of metric(*data) with slide-level resampling.

    Resamples that violate the metric's preconditions are redrawn; total draws
    are capped at max_redraw_factor * n_replicates."""
    arrays = [np.asarray(a) for a in data]
    n = len(arrays[0])
    if n == 0 or any(len(a) != n for a in arrays):
        raise ValidationError("bootstrap needs aligned, nonempty data arrays")
    point = float(metric(*arrays))
    rng = np.random.default_rng(seed)
    values = np.empty(n_replicates, dtype=np.float64)
    draws = 0
    cap = max_redraw_factor * n_replicates
    done = 0
    while done < n_replicates:
        if draws >= cap:
            raise ValidationError("bootstrap redraw cap exceeded; data too degenerate")
        idx = rng.integers(n, size=n)
        draws += 1
        try:
            values[done] = float(metric(*(a[idx] for a in arrays)))
        except MetricUndefinedError:
            continue
        done += 1
    lo, hi = np.percentile(values, [2.5, 97.5])
    return BootstrapResult(point=point, mean=float(values.mean()),
                           std=float(values.std(ddof=1)), ci_low=float(lo),
                           ci_high=float(hi), n_replicates=n_replicates)


def rejection_curve(metric, truth, pred, uncertainties,
                    fractions) -> list[tuple[float, float | None]]:
    """Recompute metric(truth, pred) after dropping the ceil(qN) highest-uncertainty
    samples for each fraction q; ties in uncertainty break by stable sample order."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    unc = np.asarray(uncertainties, dtype=np.float64)
    n = len(unc)
    if not (len(truth) == len(pred) == n) or n == 0:
        raise ValidationError("rejection curve needs aligned, nonempty arrays")
    for q in fractions:
        if not 0.0 <= q < 1.0:
            raise ValidationError(f"rejection fraction {q} outside [0, 1)")
    drop_order = np.argsort(-unc, kind="stable")
    curve = []
    for q in fractions:
        k = math.ceil(q * n)
        keep = np.ones(n, dtype=bool)
        keep[drop_order[:k]] = False
        try:
            value = float(metric(truth[keep], pred[keep]))
        except MetricUndefinedError:
            value = None
        curve.append((float(q), value))
    return curve
