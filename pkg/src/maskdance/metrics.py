"""Evaluation metrics: beat alignment, foot contact/skating, Frechet distances, diversity."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.ndimage import uniform_filter1d

from .motion import SKELETON, MotionError, MotionSequence, PoseConstraint, Skeleton, joint_positions


class MetricError(ValueError):
    pass


class NoConstraintError(MetricError):
    pass


# ---------------------------------------------------------------- rhythm

def beat_align_score(music_beats, dance_beats, sigma: float = 3.0) -> float:
    """Gaussian-kernel average distance from each music beat to its nearest dance beat.

    Both beat lists must use the same time unit as ``sigma``.
    """
    bm = np.asarray(music_beats, dtype=np.float64).reshape(-1)
    bd = np.asarray(dance_beats, dtype=np.float64).reshape(-1)
    if bm.size == 0:
        raise MetricError("music beats must be non-empty")
    if sigma <= 0:
        raise MetricError("sigma must be positive")
    if bd.size == 0:
        warnings.warn("no dance beats; beat alignment score is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    nearest = np.min(np.abs(bm[:, None] - bd[None, :]), axis=1)
    return float(np.mean(np.exp(-nearest ** 2 / (2 * sigma ** 2))))


def extract_dance_beats(seq: MotionSequence, skeleton: Skeleton = SKELETON, window: int = 5) -> np.ndarray:
    """Times (seconds) of local minima of the smoothed total joint-speed envelope."""
    if seq.frames < 5:
        raise MetricError("need at least 5 frames to extract beats")
    pos = joint_positions(seq, skeleton)
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=-1).sum(axis=1) * seq.fps
    env = uniform_filter1d(speed, size=window, mode="nearest")
    left = env[1:-1] < env[:-2]
    right = env[1:-1] <= env[2:]
    idx = np.flatnonzero(left & right) + 1
    return (idx + 0.5) / seq.fps


# ---------------------------------------------------------------- physical plausibility

def pfc(seq: MotionSequence, skeleton: Skeleton = SKELETON) -> float:
    """Physical foot contact score: sum of s^i over the N frames divided by N times the peak acceleration.

    s^i is only defined on interior frames (central second difference); the two boundary
    frames contribute zero.
    """
    if seq.frames < 3:
        raise MetricError("need at least 3 frames")
    pos = joint_positions(seq, skeleton)
    com = pos.mean(axis=1)
    dt = 1.0 / seq.fps
    acc = (com[2:] - 2 * com[1:-1] + com[:-2]) / dt ** 2
    acc[:, 2] = np.maximum(acc[:, 2], 0.0)
    acc_norm = np.linalg.norm(acc, axis=-1)
    lf, rf = skeleton.foot_joints
    v_left = np.linalg.norm(pos[2:, lf] - pos[1:-1, lf], axis=-1) / dt
    v_right = np.linalg.norm(pos[2:, rf] - pos[1:-1, rf], axis=-1) / dt
    peak = acc_norm.max()
    if peak == 0:
        return 0.0
    s = acc_norm * v_left * v_right
    return float(s.sum() / (seq.frames * peak))


def foot_skating_ratio(seq: MotionSequence, skeleton: Skeleton = SKELETON, h_contact: float = 0.05,
                       v_slide: float = 0.1) -> float:
    """Fraction of frame transitions where a foot below ``h_contact`` moves faster than ``v_slide``."""
    if h_contact <= 0 or v_slide <= 0:
        raise MetricError("thresholds must be positive")
    if seq.frames < 2:
        return 0.0
    pos = joint_positions(seq, skeleton)
    feet = pos[:, list(skeleton.foot_joints)]
    speed = np.linalg.norm(np.diff(feet[..., :2], axis=0), axis=-1) * seq.fps
    low = feet[1:, :, 2] < h_contact
    sliding = (low & (speed > v_slide)).any(axis=1)
    return float(sliding.mean())


# ---------------------------------------------------------------- feature extractors

def kinematic_features(seq: MotionSequence, skeleton: Skeleton = SKELETON) -> np.ndarray:
    """Per joint: mean and variance of speed, mean and variance of acceleration magnitude."""
    if seq.frames < 3:
        raise MetricError("need at least 3 frames")
    pos = joint_positions(seq, skeleton)
    vel = np.diff(pos, axis=0) * seq.fps
    acc = np.diff(vel, axis=0) * seq.fps
    sp = np.linalg.norm(vel, axis=-1)
    ac = np.linalg.norm(acc, axis=-1)
    return np.concatenate([sp.mean(0), sp.var(0), ac.mean(0), ac.var(0)])


GEOMETRIC_PREDICATES = (
    "left_hand_above_head",
    "right_hand_above_head",
    "both_hands_above_shoulders",
    "hands_apart_beyond_shoulder_width",
    "hands_together",
    "left_knee_bent_beyond_90",
    "right_knee_bent_beyond_90",
    "feet_crossed",
    "left_foot_lifted",
    "right_foot_lifted",
    "feet_wide_apart",
    "torso_leaning",
)


def _angle(a, b):
    cos = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + 1e-9)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def pose_predicates(pos: np.ndarray, skeleton: Skeleton = SKELETON) -> np.ndarray:
    """Boolean matrix (frames x 12) of the fixed pose templates."""
    ix = skeleton.index
    root, chest, head = pos[:, 0], pos[:, ix("chest")], pos[:, ix("head")]
    lsh, rsh = pos[:, ix("l_shoulder")], pos[:, ix("r_shoulder")]
    lh, rh = pos[:, ix("l_hand")], pos[:, ix("r_hand")]
    lk, rk = pos[:, ix("l_knee")], pos[:, ix("r_knee")]
    lf, rf = pos[:, ix("l_foot")], pos[:, ix("r_foot")]
    shoulder_w = np.linalg.norm(lsh - rsh, axis=-1)
    hands = np.linalg.norm(lh - rh, axis=-1)
    lateral = lsh - rsh
    lateral[:, 2] = 0.0
    lateral /= np.linalg.norm(lateral, axis=-1, keepdims=True) + 1e-9
    ground = np.minimum(lf[:, 2], rf[:, 2])
    up = np.array([0.0, 0.0, 1.0])
    return np.column_stack([
        lh[:, 2] > head[:, 2],
        rh[:, 2] > head[:, 2],
        (lh[:, 2] > lsh[:, 2]) & (rh[:, 2] > rsh[:, 2]),
        hands > 2.0 * shoulder_w,
        hands < 0.2,
        _angle(root - lk, lf - lk) < 90.0,
        _angle(root - rk, rf - rk) < 90.0,
        ((lf - rf) * lateral).sum(-1) < 0.0,
        lf[:, 2] - ground > 0.1,
        rf[:, 2] - ground > 0.1,
        np.linalg.norm((lf - rf)[:, :2], axis=-1) > 0.5,
        _angle(chest - root, np.broadcast_to(up, chest.shape)) > 20.0,
    ])


def geometric_features(seq: MotionSequence, skeleton: Skeleton = SKELETON) -> np.ndarray:
    """Frequency of each pose template over the clip's frames."""
    if seq.frames < 3:
        raise MetricError("need at least 3 frames")
    return pose_predicates(joint_positions(seq, skeleton), skeleton).mean(axis=0)


# ---------------------------------------------------------------- distribution metrics

@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, features) -> "GaussianSummary":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        mu = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False)) if len(x) > 1 else np.zeros((x.shape[1],) * 2)
        cov = (cov + cov.T) / 2
        if len(x) < x.shape[1] + 1:
            cov = cov + 1e-6 * np.eye(x.shape[1])
        return cls(mu, cov)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_cross)
    return max(value, 0.0)


def fid(gen, ref) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows = clips)."""
    g = np.asarray(gen, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if r.ndim == 1:
        r = r[:, None]
    if g.shape[1] != r.shape[1]:
        raise MetricError(f"feature dimensions differ: {g.shape[1]} vs {r.shape[1]}")
    return frechet_distance(GaussianSummary.fit(g), GaussianSummary.fit(r))


def diversity(features) -> float:
    """Mean Euclidean distance over all unordered pairs of clips."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise MetricError("diversity needs at least two clips")
    d = [np.linalg.norm(x[i] - x[j]) for i, j in combinations(range(len(x)), 2)]
    return float(np.mean(d))


# ---------------------------------------------------------------- pose adherence

def pose_discrepancy(target: np.ndarray, predicted: np.ndarray, validity: np.ndarray) -> float:
    """Sum of squared errors over valid (frame, joint) entries divided by their count."""
    valid = np.asarray(validity, dtype=bool)
    count = valid.sum()
    if count == 0:
        raise NoConstraintError("constraint has no valid entries")
    err = ((np.asarray(predicted, np.float64) - np.asarray(target, np.float64)) ** 2).sum(-1)
    return float((err * valid).sum() / count)


def joint_distance(constraint: PoseConstraint, motion: MotionSequence, skeleton: Skeleton = SKELETON) -> float:
    if motion.frames != constraint.frames:
        raise MotionError("constraint and motion differ in frame count")
    return pose_discrepancy(constraint.positions, joint_positions(motion, skeleton), constraint.validity)
