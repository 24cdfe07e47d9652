"""Joint scene-level evaluation metrics.

minJADE/minJFDE take the best of K jointly-generated samples: all agents
of sample k must come from the same rollout, so the min is over samples,
never over per-agent mixtures. The *_bruteforce twins recompute the same
quantities with bare Python loops and exist as oracles for the vectorized
paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "joint_ade",
    "joint_fde",
    "joint_ade_bruteforce",
    "joint_fde_bruteforce",
    "collision_rate",
    "collision_rate_bruteforce",
    "constant_velocity_extrapolation",
    "SceneEval",
    "EvalReport",
    "evaluate_scene",
]

DEFAULT_COLLISION_THRESHOLD = 0.2  # meters


def _check_pred_truth(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[3] != 2:
        raise ValueError(f"pred must be (K, N, T, 2), got {pred.shape}")
    if truth.shape != pred.shape[1:]:
        raise ValueError(f"truth shape {truth.shape} != pred scene shape {pred.shape[1:]}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    return pred, truth


def joint_ade(pred: np.ndarray, truth: np.ndarray) -> tuple[float, int]:
    """Best-of-K joint average displacement error.

    Per sample: mean Euclidean displacement over all N agents and T steps;
    returns (min over samples, argmin sample index).
    """
    pred, truth = _check_pred_truth(pred, truth)
    per_sample = np.linalg.norm(pred - truth[None], axis=3).mean(axis=(1, 2))
    best = int(np.argmin(per_sample))
    return float(per_sample[best]), best


def joint_fde(pred: np.ndarray, truth: np.ndarray) -> tuple[float, int]:
    """Best-of-K joint final displacement error (last step only, mean over agents)."""
    pred, truth = _check_pred_truth(pred, truth)
    per_sample = np.linalg.norm(pred[:, :, -1] - truth[None, :, -1], axis=2).mean(axis=1)
    best = int(np.argmin(per_sample))
    return float(per_sample[best]), best


def joint_ade_bruteforce(pred, truth) -> tuple[float, int]:
    pred, truth = _check_pred_truth(pred, truth)
    K, N, T, _ = pred.shape
    best_val, best_k = math.inf, -1
    for k in range(K):
        total = 0.0
        for n in range(N):
            for t in range(T):
                dx = pred[k, n, t, 0] - truth[n, t, 0]
                dy = pred[k, n, t, 1] - truth[n, t, 1]
                total += math.hypot(dx, dy)
        val = total / (N * T)
        if val < best_val:
            best_val, best_k = val, k
    return best_val, best_k


def joint_fde_bruteforce(pred, truth) -> tuple[float, int]:
    pred, truth = _check_pred_truth(pred, truth)
    K, N, T, _ = pred.shape
    best_val, best_k = math.inf, -1
    for k in range(K):
        total = 0.0
        for n in range(N):
            dx = pred[k, n, T - 1, 0] - truth[n, T - 1, 0]
            dy = pred[k, n, T - 1, 1] - truth[n, T - 1, 1]
            total += math.hypot(dx, dy)
        val = total / N
        if val < best_val:
            best_val, best_k = val, k
    return best_val, best_k


def collision_rate(pred: np.ndarray, threshold: float = DEFAULT_COLLISION_THRESHOLD) -> float:
    """Fraction of samples where any agent pair gets strictly closer than threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[3] != 2:
        raise ValueError(f"pred must be (K, N, T, 2), got {pred.shape}")
    K, N = pred.shape[:2]
    if N < 2:
        return 0.0
    diff = pred[:, :, None] - pred[:, None, :]          # (K, N, N, T, 2)
    dists = np.linalg.norm(diff, axis=4)
    iu = np.triu_indices(N, k=1)
    pair_dists = dists[:, iu[0], iu[1]]                  # (K, n_pairs, T)
    collided = (pair_dists < threshold).any(axis=(1, 2))
    return float(collided.mean())


def collision_rate_bruteforce(pred, threshold: float = DEFAULT_COLLISION_THRESHOLD) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    K, N, T, _ = pred.shape
    hits = 0
    for k in range(K):
        found = False
        for i in range(N):
            for j in range(i + 1, N):
                for t in range(T):
                    d = math.hypot(*(pred[k, i, t] - pred[k, j, t]))
                    if d < threshold:
                        found = True
        if found:
            hits += 1
    return hits / K


def constant_velocity_extrapolation(scene) -> np.ndarray:
    """Single-sample baseline: continue each agent's last observed displacement.

    Returns a (1, N, t_fut, 2) prediction usable with the joint metrics.
    """
    cur = scene.positions[:, scene.t_hist - 1]
    prev = scene.positions[:, scene.t_hist - 2] if scene.t_hist >= 2 else cur
    vel = cur - prev
    steps = np.arange(1, scene.t_fut + 1)
    fut = cur[:, None, :] + steps[None, :, None] * vel[:, None, :]
    return fut[None]


@dataclass(frozen=True)
class SceneEval:
    scene_id: str
    jade: float
    jfde: float
    best_jade_sample: int
    best_jfde_sample: int
    collided_samples: int
    n_samples: int


@dataclass(frozen=True)
class EvalReport:
    """Aggregate of per-scene joint metrics; means are unweighted over scenes."""

    per_scene: tuple = field(default_factory=tuple)
    collision_threshold: float = DEFAULT_COLLISION_THRESHOLD

    @property
    def jade(self) -> float:
        return float(np.mean([s.jade for s in self.per_scene]))

    @property
    def jfde(self) -> float:
        return float(np.mean([s.jfde for s in self.per_scene]))

    @property
    def collision_rate(self) -> float:
        total = sum(s.n_samples for s in self.per_scene)
        hits = sum(s.collided_samples for s in self.per_scene)
        return hits / total if total else 0.0

    def to_csv(self) -> str:
        lines = ["scene,jade,best_jade_sample,jfde,best_jfde_sample,collided_samples,n_samples"]
        for s in self.per_scene:
            lines.append(
                f"{s.scene_id},{s.jade!r},{s.best_jade_sample},{s.jfde!r},"
                f"{s.best_jfde_sample},{s.collided_samples},{s.n_samples}"
            )
        lines.append(
            f"__aggregate__,{self.jade!r},-1,{self.jfde!r},-1,"
            f"{sum(s.collided_samples for s in self.per_scene)},"
            f"{sum(s.n_samples for s in self.per_scene)}"
        )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'scene':<24} {'minJADE':>10} {'minJFDE':>10} {'coll':>6}"
        rows = [header, "-" * len(header)]
        for s in self.per_scene:
            frac = s.collided_samples / s.n_samples if s.n_samples else 0.0
            rows.append(f"{s.scene_id:<24} {s.jade:>10.4f} {s.jfde:>10.4f} {frac:>6.2f}")
        rows.append("-" * len(header))
        rows.append(
            f"{'mean':<24} {self.jade:>10.4f} {self.jfde:>10.4f} {self.collision_rate:>6.2f}"
        )
        return "\n".join(rows)


def evaluate_scene(scene_id: str, pred: np.ndarray, truth: np.ndarray,
                   collision_threshold: float = DEFAULT_COLLISION_THRESHOLD) -> SceneEval:
    """Joint metrics for one scene's K predicted futures against the truth."""
    jade, k_ade = joint_ade(pred, truth)
    jfde, k_fde = joint_fde(pred, truth)
    pred = np.asarray(pred, dtype=np.float64)
    K, N = pred.shape[:2]
    collided = 0
    if N >= 2:
        diff = pred[:, :, None] - pred[:, None, :]
        dists = np.linalg.norm(diff, axis=4)
        iu = np.triu_indices(N, k=1)
        collided = int((dists[:, iu[0], iu[1]] < collision_threshold).any(axis=(1, 2)).sum())
    return SceneEval(
        scene_id=scene_id, jade=jade, jfde=jfde,
        best_jade_sample=k_ade, best_jfde_sample=k_fde,
        collided_samples=collided, n_samples=K,
    )
