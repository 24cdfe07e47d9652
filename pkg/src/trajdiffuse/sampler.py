"""Guided reverse diffusion producing K joint full-trajectory samples.

One reverse pass denoises all agents of a scene together, so every sample
is a jointly consistent rollout (the contract the joint metrics rely on).
Per-sample RNG streams are derived from (seed, sample index); running the
K samples batched, sequentially or in parallel yields identical bytes.

Each step applies, in order: the ancestral reverse update, the posterior
guidance nudge x += lambda_t * g, and (optionally) the RePaint overwrite
that re-imposes a forward-noised copy of the observed history in
trajectory space before re-encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ParseError, TrajectoryScene, build_scene_graph
from .denoiser import DenoiserModel, NumericError
from .guidance import (
    GuidanceSpec,
    GuidanceTerm,
    Observation,
    _gradient_core,
    default_lambda_schedule,
    denormalize,
    observation_from_scene,
)
from .mathutils import RngStream
from .schedule import NoiseSchedule

__all__ = [
    "PredictionRequest",
    "SceneSampleSet",
    "sample_scene",
    "predict",
    "build_preset_spec",
    "write_prediction_csv",
    "read_prediction_csv",
    "write_diagnostics_csv",
    "PRESETS",
]

PRESETS = ("predict", "predict_repaint", "controllable", "robust")

# Calibrated on the synthetic desk-scale setup; overridable per call.
DEFAULT_LAMBDA_BASE = {
    "predict": 1.0,
    "predict_repaint": 1.0,
    "controllable": 1.0,
    "robust": 1.0,
}
ROBUST_SIGMA_REF = 0.05    # meters; noise level where robust guidance halves
SAMPLE_STREAM_TAG = 100    # RngStream path prefix for per-sample chains


@dataclass(frozen=True)
class PredictionRequest:
    scene: TrajectoryScene
    K: int
    spec: GuidanceSpec
    seed: int
    goals: np.ndarray | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class SceneSampleSet:
    """K jointly-generated rollouts for one scene, world frame."""

    samples: np.ndarray       # (K, N, t_fut, 2) predicted futures
    full: np.ndarray          # (K, N, t_full, 2) full trajectories
    diagnostics: np.ndarray   # (n_guided_steps, K) guidance loss trace
    scene_id: str = ""

    @property
    def K(self) -> int:
        return self.samples.shape[0]


def sample_scene(model: DenoiserModel, sched: NoiseSchedule,
                 req: PredictionRequest) -> SceneSampleSet:
    """Run the guided reverse chain for one scene and K samples."""
    scene = req.scene
    spec = req.spec
    if spec.lambda_schedule.size != sched.T:
        raise ValueError(
            f"lambda_schedule length {spec.lambda_schedule.size} != T={sched.T}"
        )
    graph = build_scene_graph(scene)
    obs = observation_from_scene(scene, graph, goals=req.goals)
    n, k = graph.n_agents, model.config.k
    t_full, t_hist = scene.t_full, scene.t_hist

    streams = [RngStream(req.seed, SAMPLE_STREAM_TAG, i) for i in range(req.K)]
    x = np.stack([s.standard_normal((n, k)) for s in streams])    # (K, N, k)

    hist_mask = scene.obs_mask                                     # (N, t_hist)
    c0 = obs.history                                               # (N, t_hist, 2)
    traces = [] if spec.active else None

    for t in range(sched.T, 0, -1):
        try:
            if spec.active:
                g, eps_hat, losses = _gradient_core(
                    model, sched, x, t, graph, obs, spec
                )
                traces.append(losses)
            else:
                with torch.no_grad():
                    eps_hat = model.net(
                        torch.from_numpy(x), t, torch.from_numpy(graph.edges)
                    ).numpy()
                g = None
        except NumericError as exc:
            raise NumericError(f"sample chain failed at step t={t}: {exc}") from exc

        if t > 1:
            eps = np.stack([s.standard_normal((n, k)) for s in streams])
        else:
            eps = np.zeros_like(x)
        x = sched.reverse_step(x, t, eps_hat, eps)
        if g is not None:
            x = x + spec.lambda_at(t) * g

        if spec.repaint:
            # Forward-noise the observed history to the produced state's
            # level t-1 (closed form; abar_0 := 1, so the final overwrite
            # re-imposes the observation exactly).
            abar_prev = sched.alpha_bar[t - 2] if t > 1 else 1.0
            if t > 1:
                eps_rp = np.stack(
                    [s.standard_normal((n, t_hist, 2)) for s in streams]
                )
            else:
                eps_rp = np.zeros((req.K, n, t_hist, 2))
            c_mix = np.sqrt(abar_prev) * c0 + np.sqrt(1.0 - abar_prev) * eps_rp
            traj = model.decode_latents(x, t_full)                 # (K, N, T, 2)
            overwrite = np.broadcast_to(hist_mask[None, :, :, None], c_mix.shape)
            traj[:, :, :t_hist][overwrite] = c_mix[overwrite]
            x = model.encode_trajectories(traj)

        if not np.isfinite(x).all():
            bad = np.argwhere(~np.isfinite(x).reshape(req.K, -1).all(axis=1))
            raise NumericError(
                f"non-finite state at step t={t}, sample {int(bad[0, 0])}"
            )

    full_norm = model.decode_latents(x, t_full)
    full_world = denormalize(full_norm, graph)
    diagnostics = (
        np.stack(traces) if traces else np.zeros((0, req.K))
    )
    return SceneSampleSet(
        samples=full_world[:, :, t_hist:].copy(),
        full=full_world,
        diagnostics=diagnostics,
        scene_id=scene.scene_id,
    )


def build_preset_spec(preset: str, sched: NoiseSchedule, *,
                      noise_sigma: float = 0.0,
                      lambda_base: float | None = None,
                      goal_weight: float = 1.0,
                      repeller_weight: float = 0.0,
                      repeller_radius: float = 0.4,
                      grad_clip: float = 1.0,
                      full_chain: bool = True) -> GuidanceSpec:
    """GuidanceSpec for one of the built-in task presets.

    predict          reconstruction guidance only
    predict_repaint  reconstruction guidance + RePaint hard conditioning
    controllable     reconstruction + goal attraction (+ optional repeller)
    robust           reconstruction with lambda shrunk as the declared
                     observation noise grows
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    base = DEFAULT_LAMBDA_BASE[preset] if lambda_base is None else lambda_base
    if preset == "robust":
        base = base / (1.0 + (noise_sigma / ROBUST_SIGMA_REF) ** 2)
    terms = [GuidanceTerm("reconstruction", weight=1.0)]
    if preset == "controllable":
        terms.append(GuidanceTerm("goal", weight=goal_weight))
    if repeller_weight > 0:
        terms.append(
            GuidanceTerm("repeller", weight=repeller_weight, radius=repeller_radius)
        )
    return GuidanceSpec(
        terms=tuple(terms),
        lambda_schedule=default_lambda_schedule(sched, base),
        grad_clip=grad_clip,
        repaint=(preset == "predict_repaint"),
        full_chain=full_chain,
    )


def predict(model: DenoiserModel, sched: NoiseSchedule, scene: TrajectoryScene,
            K: int, preset: str = "predict", seed: int = 0,
            goals=None, **spec_overrides) -> SceneSampleSet:
    """Task-preset front end over sample_scene."""
    if preset == "controllable" and goals is None:
        raise ValueError("controllable preset requires goals")
    spec = build_preset_spec(
        preset, sched, noise_sigma=scene.noise_sigma, **spec_overrides
    )
    req = PredictionRequest(scene=scene, K=K, spec=spec, seed=seed, goals=goals)
    return sample_scene(model, sched, req)


def write_prediction_csv(sample_set: SceneSampleSet, t_hist: int, path) -> None:
    """CSV with header ``sample,agent,frame,x,y,segment``.

    frame is the relative index k; segment is "history" for k <= 0 and
    "future" for k >= 1. Floats use repr for lossless round trips.
    """
    full = sample_set.full
    K, N, t_total, _ = full.shape
    lines = ["sample,agent,frame,x,y,segment"]
    for s in range(K):
        for a in range(N):
            for idx in range(t_total):
                k = idx - (t_hist - 1)
                segment = "history" if k <= 0 else "future"
                x, y = full[s, a, idx]
                lines.append(f"{s},{a},{k},{float(x)!r},{float(y)!r},{segment}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_prediction_csv(path):
    """Parse a prediction CSV back into (full, t_hist, t_fut) arrays."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "sample,agent,frame,x,y,segment":
            raise ParseError(f"{path}: unexpected header {header!r}", line=1)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 6:
                raise ParseError(f"{path}: line {lineno}: expected 6 fields", line=lineno)
            try:
                rows.append((int(fields[0]), int(fields[1]), int(fields[2]),
                             float(fields[3]), float(fields[4]), fields[5]))
            except ValueError as exc:
                raise ParseError(
                    f"{path}: line {lineno}: malformed field ({exc})", line=lineno
                ) from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    samples = sorted({r[0] for r in rows})
    agents = sorted({r[1] for r in rows})
    frames = sorted({r[2] for r in rows})
    t_hist = sum(1 for k in frames if k <= 0)
    t_fut = len(frames) - t_hist
    if samples != list(range(len(samples))) or agents != list(range(len(agents))):
        raise ParseError(f"{path}: sample/agent indices must be dense from 0")
    full = np.zeros((len(samples), len(agents), len(frames), 2))
    f_index = {k: i for i, k in enumerate(frames)}
    seen = 0
    for s, a, k, x, y, segment in rows:
        expected = "history" if k <= 0 else "future"
        if segment != expected:
            raise ParseError(f"{path}: frame {k} tagged {segment!r}, expected {expected!r}")
        full[s, a, f_index[k]] = (x, y)
        seen += 1
    if seen != full.shape[0] * full.shape[1] * full.shape[2]:
        raise ParseError(f"{path}: missing or duplicate rows")
    return full, t_hist, t_fut


def write_diagnostics_csv(sample_set: SceneSampleSet, sched_T: int, path) -> None:
    """Per-step guidance-loss trace: ``step,sample,loss`` (step = diffusion t)."""
    lines = ["step,sample,loss"]
    trace = sample_set.diagnostics
    for row in range(trace.shape[0]):
        t = sched_T - row
        for s in range(trace.shape[1]):
            lines.append(f"{t},{s},{float(trace[row, s])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
