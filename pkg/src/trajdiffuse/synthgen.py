"""Synthetic multi-agent scene generator with known ground truth.

Provides desk-scale training and evaluation data: straight-line walkers,
smooth sinusoidal turns, and agent pairs whose paths cross mid-future.
One frame corresponds to 0.4 s (ETH/UCY annotation cadence), so the
default speed range 0.3-0.6 m/frame is pedestrian-like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrajectoryScene
from .mathutils import RngStream

__all__ = ["SynthConfig", "generate", "SCENE_KINDS"]

SCENE_KINDS = ("constant_velocity", "sine_turn", "crossing_pair")


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 100
    agents_min: int = 1
    agents_max: int = 3
    kinds: tuple = SCENE_KINDS
    speed_min: float = 0.3          # m/frame
    speed_max: float = 0.6
    noise: float = 0.0              # meters, i.i.d. jitter on every frame
    seed: int = 0
    t_hist: int = 8
    t_fut: int = 12
    arena: float = 20.0             # half-width; all positions stay inside

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not 1 <= self.agents_min <= self.agents_max:
            raise ValueError("need 1 <= agents_min <= agents_max")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("speeds must be positive and ordered")
        unknown = set(self.kinds) - set(SCENE_KINDS)
        if unknown:
            raise ValueError(f"unknown scene kinds: {sorted(unknown)}")
        if not self.kinds:
            raise ValueError("kinds must be non-empty")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _start_box(cfg: SynthConfig) -> float:
    """Half-width of the start region that keeps full paths inside the arena."""
    t_full = cfg.t_hist + cfg.t_fut
    margin = (t_full - 1) * cfg.speed_max + 4.0 * cfg.noise
    box = cfg.arena - margin
    if box <= 0:
        raise ValueError("arena too small for the configured speeds")
    return box


def _constant_velocity(rng: RngStream, cfg: SynthConfig, n_agents: int) -> np.ndarray:
    t_full = cfg.t_hist + cfg.t_fut
    box = _start_box(cfg)
    starts = rng.uniform(-box, box, (n_agents, 2))
    angles = rng.uniform(-np.pi, np.pi, n_agents)
    speeds = rng.uniform(cfg.speed_min, cfg.speed_max, n_agents)
    steps = np.arange(t_full)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return starts[:, None, :] + steps[None, :, None] * (speeds[:, None] * dirs)[:, None, :]


def _sine_turn(rng: RngStream, cfg: SynthConfig, n_agents: int) -> np.ndarray:
    """Heading oscillates sinusoidally; speed constant per agent."""
    t_full = cfg.t_hist + cfg.t_fut
    box = _start_box(cfg)
    out = np.empty((n_agents, t_full, 2))
    for a in range(n_agents):
        start = rng.uniform(-box, box, 2)
        base = rng.uniform(-np.pi, np.pi)
        amp = rng.uniform(0.5, 1.0)
        freq = rng.uniform(0.6, 1.2) / t_full * 2.0 * np.pi
        phase = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        pos = np.array(start)
        out[a, 0] = pos
        for f in range(1, t_full):
            heading = base + amp * np.sin(freq * f + phase)
            pos = pos + speed * np.array([np.cos(heading), np.sin(heading)])
            out[a, f] = pos
    return out


def _crossing_pair(rng: RngStream, cfg: SynthConfig) -> np.ndarray:
    """Two straight walkers meeting at the same point mid-future."""
    t_full = cfg.t_hist + cfg.t_fut
    cross_frame = cfg.t_hist - 1 + cfg.t_fut // 2 + int(rng.integers(-1, 2))
    box = max(_start_box(cfg) * 0.25, 1e-3)
    cross_pt = rng.uniform(-box, box, 2)
    angles = rng.uniform(-np.pi, np.pi) + np.array([0.0, rng.uniform(np.pi / 3, 2 * np.pi / 3)])
    speeds = rng.uniform(cfg.speed_min, cfg.speed_max, 2)
    steps = np.arange(t_full)
    out = np.empty((2, t_full, 2))
    for a in range(2):
        direction = np.array([np.cos(angles[a]), np.sin(angles[a])])
        out[a] = cross_pt + (steps - cross_frame)[:, None] * speeds[a] * direction
    return out


def generate(config: SynthConfig) -> list[TrajectoryScene]:
    """Deterministically generate scenes per config; same seed, same scenes."""
    rng = RngStream(config.seed)
    t_full = config.t_hist + config.t_fut
    kind_list = tuple(config.kinds)
    scenes = []
    for s in range(config.n_scenes):
        kind = kind_list[s % len(kind_list)]
        scene_rng = rng.child(s)
        if kind == "crossing_pair":
            pos = _crossing_pair(scene_rng, config)
        else:
            n_agents = int(scene_rng.integers(config.agents_min, config.agents_max + 1))
            if kind == "constant_velocity":
                pos = _constant_velocity(scene_rng, config, n_agents)
            else:
                pos = _sine_turn(scene_rng, config, n_agents)
        if config.noise > 0:
            jitter = scene_rng.normal(0.0, config.noise, pos.shape)
            pos = pos + np.clip(jitter, -4.0 * config.noise, 4.0 * config.noise)
        scenes.append(TrajectoryScene(
            positions=pos,
            t_hist=config.t_hist,
            t_fut=config.t_fut,
            obs_mask=np.ones((pos.shape[0], config.t_hist), dtype=bool),
            scene_id=f"{kind}-{s:05d}",
        ))
    assert all(np.abs(s.positions).max() <= config.arena for s in scenes)
    return scenes
