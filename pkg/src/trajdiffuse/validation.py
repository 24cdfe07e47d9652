"""Input validation helpers shared by the estimator and CLI surfaces."""

from __future__ import annotations

import numpy as np

from .data import TrajectoryScene

__all__ = ["check_array_2d", "check_scenes", "check_goals"]


def check_array_2d(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 (n_samples, n_features) array."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} needs at least one row")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_scenes(scenes, name: str = "scenes") -> list[TrajectoryScene]:
    """Validate a non-empty homogeneous list of TrajectoryScene."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError(f"{name} must contain at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, TrajectoryScene):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected TrajectoryScene")
    spans = {(s.t_hist, s.t_fut) for s in scenes}
    if len(spans) != 1:
        raise ValueError(f"{name} mixes window layouts: {sorted(spans)}")
    return scenes


def check_goals(goals, n_agents: int) -> np.ndarray:
    arr = np.asarray(goals, dtype=np.float64)
    if arr.shape != (n_agents, 2):
        raise ValueError(f"goals must be ({n_agents}, 2), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("goals contain non-finite values")
    return arr
