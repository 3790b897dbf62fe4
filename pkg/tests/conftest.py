"""Shared fixtures and independent oracle implementations.

Oracles here deliberately avoid the library code paths they check: brute
force scans, naive rank computations, and scipy where it provides a mature
second opinion.
"""

import numpy as np
import pytest

from keypose.geometry import CameraModel, Gripper, Keypose, Pose6D, Trajectory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng, scale=0.5) -> Pose6D:
    return Pose6D(rng.uniform(-scale, scale, 3), random_quat(rng))


def random_trajectory(rng, scale=0.5) -> Trajectory:
    return Trajectory(
        (
            Keypose(random_pose(rng, scale), Gripper.GRASP),
            Keypose(random_pose(rng, scale), Gripper.RELEASE),
        )
    )


def default_camera() -> CameraModel:
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_camera(rng) -> CameraModel:
    """A camera near the origin-looking viewpoint used by scene generation."""
    from keypose.scenegen import GenConfig, _sample_camera

    cfg = GenConfig()
    return _sample_camera(rng, cfg.hard_band, cfg)


def random_in_frustum_pose(rng, cam: CameraModel, d_range=(0.3, 1.8)) -> Pose6D:
    """World pose whose position projects strictly inside the image."""
    u, v = rng.uniform(0.05, 0.95, 2)
    d = rng.uniform(*d_range)
    x = (u * cam.width - cam.cx) * d / cam.fx
    y = (v * cam.height - cam.cy) * d / cam.fy
    p_cam = np.array([x, y, d])
    inv = cam.extrinsic.inverse()
    return Pose6D(inv.transform_point(p_cam), random_quat(rng))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def brute_force_window_max(p: np.ndarray, w: int) -> np.ndarray:
    """O(V*w) shift-and-maximum scan of the clipped sliding window max."""
    p = np.asarray(p, dtype=np.float64)
    wm = p.copy()
    for s in range(1, w + 1):
        np.maximum(wm[s:], p[:-s], out=wm[s:])
        np.maximum(wm[:-s], p[s:], out=wm[:-s])
    return wm


def brute_force_nms(p: np.ndarray, w: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.flatnonzero(p >= brute_force_window_max(p, w))


def brute_force_ap(episodes, threshold_cm: float, units) -> float:
    """AP via per-TP-level max precision over all confidence cuts.

    Independent of the sweep/envelope implementation: for each achievable
    recall level i/E it scans every cut for the best precision with >= i true
    positives, then averages.
    """
    from keypose.metrics import traj_l1

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
    rows.sort()
    n_episodes = len(list(episodes))

    matched = set()
    flags = []
    for _, eid, _, err in rows:
        ok = err <= threshold_cm and eid not in matched
        if ok:
            matched.add(eid)
        flags.append(ok)

    total_tp = sum(flags)
    if total_tp == 0:
        return 0.0
    ap = 0.0
    for level in range(1, total_tp + 1):
        best = 0.0
        tp = 0
        for cut in range(len(rows)):
            tp += flags[cut]
            if tp >= level:
                best = max(best, tp / (cut + 1))
        ap += best / n_episodes
    return ap


def naive_average_ranks(x) -> np.ndarray:
    """O(n^2) counting-based average ranks, independent of sorting."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(x))
    for i, v in enumerate(x):
        less = np.sum(x < v)
        equal = np.sum(x == v)
        out[i] = less + (equal + 1) / 2.0
    return out


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    return float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))
