"""
Evaluation metrics over attack results and detector verdicts.

Rates are percentages in [0, 100]; means over empty sets are reported as 0
with an ``undefined`` flag instead of NaN.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_auc_score

from .utils import BenchError

logger = logging.getLogger(__name__)

DATA_KINDS = ('in-unmod', 'in-adv', 'ood-unmod', 'ood-adv')
BENIGN_KIND = 'in-unmod'


class MetricsError(BenchError):
    pass


@dataclass
class FlaggedMean:
    value: float
    undefined: bool = False


def target_success_rate(results: Sequence) -> float:
    """
    Percentage of attack results that reached their target.

    A result's ``success`` already includes detector evasion for protected pipelines.

    Examples:
        3 of 4 successful results give 75.0.
    """
    if not results:
        raise MetricsError("target_success_rate needs at least one result")
    return 100.0 * sum(bool(r.success) for r in results) / len(results)


def transform_success_rate(results: Sequence) -> float:
    """Mean success under fresh transform draws, for EOT results."""
    if not results:
        raise MetricsError("transform_success_rate needs at least one result")
    rates = [r.transform_success_rate for r in results if r.transform_success_rate is not None]
    if len(rates) != len(results):
        raise MetricsError("Every result needs a transform success rate")
    return 100.0 * float(np.mean(rates))


def mean_target_confidence(results: Sequence) -> FlaggedMean:
    """Mean target confidence over successful results only."""
    confs = [r.target_confidence for r in results if r.success]
    if not confs:
        logger.warning("No successful attack; mean target confidence undefined")
        return FlaggedMean(0.0, True)
    return FlaggedMean(float(np.mean(confs)))


def mean_perturbation(results: Sequence, norm: str = 'l2') -> FlaggedMean:
    values = [r.l2_distance if norm == 'l2' else r.linf_distance for r in results]
    if not values:
        return FlaggedMean(0.0, True)
    return FlaggedMean(float(np.mean(values)))


def minmax_expected_confidence(probs: np.ndarray, num_targets: int, targets: Optional[np.ndarray] = None,
                               per_target_count: Optional[int] = None) -> Tuple[float, float]:
    """
    Min and max over targets t of E[g(x)(t)].

    The caller runs the model (``models.confidences``) and groups adversarial rows
    by passing the target each one was aimed at.

    Args:
        probs: Confidence vectors, shape (N, K)
        num_targets: Number of candidate targets (the in-distribution classes)
        targets: For adversarial inputs, the target each row was attacked towards;
            the expectation for t then runs over the rows aimed at t. Targets with
            no rows are skipped.
        per_target_count: When given, each expectation uses exactly this many rows:
            the first ones of ``probs``, or the first ones aimed at each target.

    Returns:
        (min_t, max_t)

    Raises:
        MetricsError: Empty input, or fewer than ``per_target_count`` rows for a target
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise MetricsError(f"Expected a non-empty (N, K) confidence array, got {probs.shape}")
    if per_target_count is not None and per_target_count < 1:
        raise ValueError(f"per_target_count must be positive, got {per_target_count}")
    limit = slice(None, per_target_count)
    if targets is None:
        if per_target_count is not None and len(probs) < per_target_count:
            raise MetricsError(f"Need {per_target_count} rows per target, got {len(probs)}")
        expected = probs[limit, :num_targets].mean(axis=0)
    else:
        targets = np.asarray(targets)
        means = []
        for t in range(num_targets):
            rows = probs[targets == t, t]
            if rows.size == 0:
                continue
            if per_target_count is not None and rows.size < per_target_count:
                raise MetricsError(f"Need {per_target_count} rows for target {t}, got {rows.size}")
            means.append(rows[limit].mean())
        expected = np.array(means)
        if expected.size == 0:
            raise MetricsError("No rows for any target")
    return float(expected.min()), float(expected.max())


@dataclass
class DetectionSummary:
    """Flag rates per data kind; ``fpr`` is the rate on benign in-distribution data."""
    polarity: str
    per_kind: Dict[str, float] = field(default_factory=dict)
    tpr: Optional[float] = None
    fpr: Optional[float] = None


def detection_rates(verdicts: Sequence, kinds: Sequence[str]) -> DetectionSummary:
    """
    Detection rate per data kind, TPR over non-benign kinds and FPR on ``in-unmod``.

    Raises:
        MetricsError: Mixed verdict polarities, unknown kinds or length mismatch
    """
    if len(verdicts) != len(kinds):
        raise MetricsError(f"{len(verdicts)} verdicts but {len(kinds)} kinds")
    if not verdicts:
        raise MetricsError("detection_rates needs at least one verdict")
    polarities = {v.polarity for v in verdicts}
    if len(polarities) != 1:
        raise MetricsError(f"Mixed verdict polarities: {sorted(polarities)}")
    unknown = set(kinds) - set(DATA_KINDS)
    if unknown:
        raise MetricsError(f"Unknown data kinds: {sorted(unknown)}")

    flagged: Dict[str, int] = defaultdict(int)
    counts: Dict[str, int] = defaultdict(int)
    for verdict, kind in zip(verdicts, kinds):
        counts[kind] += 1
        flagged[kind] += int(verdict.flagged)

    summary = DetectionSummary(polarity=polarities.pop())
    for kind in DATA_KINDS:
        if counts[kind]:
            summary.per_kind[kind] = 100.0 * flagged[kind] / counts[kind]
    if counts[BENIGN_KIND]:
        summary.fpr = summary.per_kind[BENIGN_KIND]
    positives = [k for k in DATA_KINDS if k != BENIGN_KIND and counts[k]]
    if positives:
        summary.tpr = 100.0 * sum(flagged[k] for k in positives) / sum(counts[k] for k in positives)
    return summary


def auroc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """Area under the ROC curve with higher scores meaning "positive"."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricsError("auroc needs both positive and negative scores")
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    return float(roc_auc_score(labels, np.concatenate([pos, neg])))
