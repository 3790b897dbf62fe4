"""Evaluation formulas: trajectory L1, reward/success, mAP, and Spearman.

The scalar trajectory error averages, over keyposes, the L1 norm of the
translation difference (in cm) plus the relative rotation angle (in degrees)
scaled into cm-equivalents by a ``UnitExchange`` rate.  Two rates are in use:
1 cm = 1 degree for scalar L1 reporting, and 1 cm = 10 degrees for the mAP
error thresholds.

mAP follows COCO-style detection evaluation with trajectories in place of
boxes: beam log-probability is the confidence, the L1 error replaces IoU
(a prediction whose error exceeds the threshold is a false positive, as is
any prediction whose episode ground truth was already matched by a
higher-confidence prediction), and the AP is the area under the all-point
interpolated precision envelope.  There are no classes; the mean is taken
over L1 thresholds of [0.5, 1, 2, 5, 10, 20, 50] cm only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateEpisode,
    DegenerateInput,
    LengthMismatch,
)
from .geometry import Trajectory, rotation_angle_deg


@dataclass(frozen=True)
class UnitExchange:
    """Rate equating rotation degrees with position centimeters."""

    degrees_per_cm: float

    def __post_init__(self):
        if self.degrees_per_cm <= 0:
            raise ValueError("degrees_per_cm must be positive")


#: 1 cm = 1 degree, used for scalar trajectory L1 reporting.
L1_UNITS = UnitExchange(1.0)
#: 1 cm = 10 degrees, used for mAP error thresholds.
MAP_UNITS = UnitExchange(10.0)

MAP_THRESHOLDS_CM = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)

SUCCESS_REWARD_THRESHOLD = 0.75


# ---------------------------------------------------------------------------
# scalar errors and reward
# ---------------------------------------------------------------------------

def traj_l1(pred: Trajectory, gt: Trajectory, units: UnitExchange = L1_UNITS) -> float:
    """Mean over keyposes of position L1 (cm) + rotation angle (cm-equivalent)."""
    if len(pred.keyposes) != len(gt.keyposes):
        raise LengthMismatch(
            f"{len(pred.keyposes)} predicted vs {len(gt.keyposes)} ground-truth keyposes"
        )
    total = 0.0
    for kp_pred, kp_gt in zip(pred.keyposes, gt.keyposes):
        pos_cm = 100.0 * float(
            np.sum(np.abs(kp_pred.pose.position - kp_gt.pose.position))
        )
        rot_deg = float(
            rotation_angle_deg(kp_gt.pose.orientation, kp_pred.pose.orientation)
        )
        total += pos_cm + rot_deg / units.degrees_per_cm
    return total / len(pred.keyposes)


def reward(p_current, p_init, p_goal) -> float:
    """clamp(1 - |p - goal| / |p_init - goal|, [0, 1]) with L2 norms."""
    p_current = np.asarray(p_current, dtype=np.float64)
    p_init = np.asarray(p_init, dtype=np.float64)
    p_goal = np.asarray(p_goal, dtype=np.float64)
    denom = float(np.linalg.norm(p_init - p_goal))
    if denom <= 1e-9:
        raise DegenerateEpisode("initial position coincides with the goal")
    value = 1.0 - float(np.linalg.norm(p_current - p_goal)) / denom
    return min(max(value, 0.0), 1.0)


def is_success(reward_value: float) -> bool:
    """An episode succeeds when its reward reaches the 0.75 threshold."""
    return reward_value >= SUCCESS_REWARD_THRESHOLD


# ---------------------------------------------------------------------------
# episodes and average precision
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Prediction:
    trajectory: Trajectory
    confidence: float  # beam log-probability

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError("prediction confidence must be finite")


@dataclass(frozen=True, eq=False)
class EpisodeRecord:
    """One ground-truth trajectory plus confidence-ranked predictions."""

    episode_id: str
    ground_truth: Trajectory
    predictions: tuple

    def __post_init__(self):
        object.__setattr__(self, "predictions", tuple(self.predictions))


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    confidence_cut: float


@dataclass(frozen=True)
class PRCurve:
    threshold_cm: float
    points: tuple = field(default_factory=tuple)


def _ranked_errors(episodes, units: UnitExchange):
    """Globally confidence-sorted predictions with precomputed errors.

    Ties are broken by (episode_id, prediction index) so results are
    deterministic.
    """
    rows = []
    for ep in episodes:
        for idx, pred in enumerate(ep.predictions):
            rows.append(
                (
                    -pred.confidence,
                    str(ep.episode_id),
                    idx,
                    traj_l1(pred.trajectory, ep.ground_truth, units),
                )
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def compute_ap(
    episodes,
    threshold_cm: float,
    units: UnitExchange = MAP_UNITS,
) -> tuple:
    """Average precision at one L1 error threshold.

    Returns ``(ap, PRCurve)``.  A prediction is a true positive iff its error
    is <= threshold and its episode's ground truth was not already matched by
    a higher-confidence prediction; recall is relative to the episode count.
    AP is the area under the all-point interpolated precision envelope.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("need at least one episode")
    ids = [str(ep.episode_id) for ep in episodes]
    if len(set(ids)) != len(ids):
        raise ValueError("episode ids must be unique")
    rows = _ranked_errors(episodes, units)
    n_episodes = len(episodes)

    matched = set()
    tp_flags = []
    for neg_conf, episode_id, _, error in rows:
        if error <= threshold_cm and episode_id not in matched:
            matched.add(episode_id)
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    if not rows:
        return 0.0, PRCurve(threshold_cm=threshold_cm)

    cum_tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(rows) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_episodes

    # All-point interpolation: precision at recall r is the maximum precision
    # achieved at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_recall) * p
        prev_recall = r

    points = tuple(
        PRPoint(float(r), float(p), float(-row[0]))
        for row, r, p in zip(rows, recall, precision)
    )
    return float(ap), PRCurve(threshold_cm=threshold_cm, points=points)


@dataclass(frozen=True)
class MapResult:
    mean_ap: float
    per_threshold: tuple  # of (threshold_cm, ap, PRCurve)


def compute_map(
    episodes,
    units: UnitExchange = MAP_UNITS,
    thresholds_cm=MAP_THRESHOLDS_CM,
) -> MapResult:
    """Unweighted mean of per-threshold APs (default thresholds, 1 cm = 10 deg)."""
    episodes = list(episodes)
    per = []
    for thr in thresholds_cm:
        ap, curve = compute_ap(episodes, thr, units)
        per.append((float(thr), ap, curve))
    mean_ap = float(np.mean([ap for _, ap, _ in per]))
    return MapResult(mean_ap=mean_ap, per_threshold=tuple(per))


def mean_l1(episodes, units: UnitExchange = L1_UNITS, mode: str = "top1") -> float:
    """Mean trajectory L1 over episodes.

    ``mode="top1"`` scores each episode's highest-confidence prediction;
    ``mode="best"`` scores the lowest-error (oracle best-of-k) prediction.
    Episodes without predictions are skipped.
    """
    if mode not in ("top1", "best"):
        raise ValueError("mode must be 'top1' or 'best'")
    errors = []
    for ep in episodes:
        if not ep.predictions:
            continue
        errs = [traj_l1(p.trajectory, ep.ground_truth, units) for p in ep.predictions]
        if mode == "top1":
            best_idx = max(
                range(len(ep.predictions)),
                key=lambda i: (ep.predictions[i].confidence, -i),
            )
            errors.append(errs[best_idx])
        else:
            errors.append(min(errs))
    if not errors:
        raise DegenerateInput("no episode has predictions")
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------

def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(confidences, errors) -> float:
    """Spearman rank correlation with average ranks for ties.

    Raises DegenerateInput for fewer than two samples or a constant input.
    """
    x = np.asarray(confidences, dtype=np.float64)
    y = np.asarray(errors, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    n = len(x)
    if n < 2:
        raise DegenerateInput("need at least two samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("correlation undefined for constant input")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        # No ties: the classic integer formula is exact (monotone data gives
        # exactly +-1.0).
        d = rx - ry
        return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1.0)))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))
