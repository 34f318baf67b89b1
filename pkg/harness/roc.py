import logging
from typing import Sequence

import numpy as np

from harness.dto import EpisodeLog, RocPoint, RocResult
from harness.harness_exceptions import RocUndefinedError

logger = logging.getLogger(__name__)


def trapezoid_auc(points: Sequence[RocPoint]) -> float:
    ordered = sorted(points, key=lambda p: (p.false_positive_rate, p.true_positive_rate))
    fpr = np.array([p.false_positive_rate for p in ordered])
    tpr = np.array([p.true_positive_rate for p in ordered])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_from_statistics(statistics: Sequence[float], labels: Sequence[bool]) -> RocResult:
    """
    ROC of the rule "flag a scenario when its statistic is below the threshold".

    Thresholds sweep 0, every midpoint between consecutive distinct statistics, and 1.

    Raises:
        RocUndefinedError: every label is the same
    """
    stats = np.clip(np.asarray(statistics, dtype=float), 0.0, 1.0)
    positive = np.asarray(labels, dtype=bool)
    if stats.shape != positive.shape:
        raise ValueError("statistics and labels must have the same length")
    positives, negatives = int(positive.sum()), int((~positive).sum())
    if positives == 0 or negatives == 0:
        raise RocUndefinedError(f"ROC needs both classes, got {positives} positive and {negatives} negative")

    distinct = np.unique(stats)
    thresholds = np.concatenate([[0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]])
    points = []
    for threshold in thresholds:
        flagged = stats <= threshold if threshold >= 1.0 else stats < threshold
        points.append(RocPoint(
            threshold=float(threshold),
            true_positive_rate=float(np.count_nonzero(flagged & positive)) / positives,
            false_positive_rate=float(np.count_nonzero(flagged & ~positive)) / negatives,
        ))
    return RocResult(points=points, auc=trapezoid_auc(points), positives=positives, negatives=negatives)


def roc_analysis(logs: Sequence[EpisodeLog], gt_threshold: float) -> RocResult:
    """
    Compare each episode's minimum per-tick predicted aggregate with its driven score.

    An episode is positive when its true aggregate is below ``gt_threshold``; failed or
    unscored episodes and episodes without predictions are skipped.
    """
    statistics, labels = [], []
    for log in logs:
        minimum = log.min_predicted_aggregate()
        if log.failed or log.report is None or minimum is None:
            logger.warning(f"Skipping episode {log.scenario_id} in ROC analysis")
            continue
        statistics.append(minimum)
        labels.append(log.report.aggregate < gt_threshold)
    result = roc_from_statistics(statistics, labels)
    logger.info(f"ROC over {len(statistics)} episodes: AUC={result.auc:.3f}")
    return result.model_copy(update={"gt_threshold": gt_threshold})
