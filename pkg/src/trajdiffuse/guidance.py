"""Posterior-sampling guidance: losses on the estimated clean trajectories
and their gradients with respect to the noisy latent state.

The gradient chain runs latent x_t -> predicted noise -> Tweedie posterior
mean -> decoded trajectory -> (optionally de-normalized world frame) ->
scalar loss, all in torch. By default the chain differentiates through the
noise predictor itself; GuidanceSpec.full_chain=False freezes the network
and keeps only the analytic part, which is cheaper but less faithful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SceneGraph, TrajectoryScene
from .denoiser import DenoiserModel, NumericError
from .schedule import NoiseSchedule

__all__ = [
    "GuidanceTerm",
    "GuidanceSpec",
    "Observation",
    "observation_from_scene",
    "loss_reconstruction",
    "loss_repeller",
    "loss_goal",
    "guidance_gradient",
    "denormalize",
    "default_lambda_schedule",
]

_TINY = 1e-300
TERM_KINDS = ("reconstruction", "repeller", "goal")
DEFAULT_REPELLER_RADIUS = 0.4  # meters, pedestrian comfort radius


@dataclass(frozen=True)
class GuidanceTerm:
    kind: str
    weight: float = 1.0
    radius: float = DEFAULT_REPELLER_RADIUS   # repeller threshold, meters

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown guidance term kind: {self.kind!r}")
        if self.weight < 0:
            raise ValueError("term weight must be >= 0")
        if self.radius <= 0:
            raise ValueError("repeller radius must be > 0")


@dataclass(frozen=True)
class GuidanceSpec:
    """Weighted guidance terms plus the per-step scale and options."""

    terms: tuple
    lambda_schedule: np.ndarray       # (T,), lambda_t for t = 1..T
    grad_clip: float = 1.0
    repaint: bool = False
    full_chain: bool = True

    def __post_init__(self):
        lam = np.asarray(self.lambda_schedule, dtype=np.float64)
        if lam.ndim != 1:
            raise ValueError("lambda_schedule must be 1-D")
        if (lam < 0).any():
            raise ValueError("lambda_t must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "lambda_schedule", lam)

    @property
    def active(self) -> bool:
        return any(t.weight > 0 for t in self.terms)

    def lambda_at(self, t: int) -> float:
        return float(self.lambda_schedule[t - 1])


def default_lambda_schedule(sched: NoiseSchedule, base: float) -> np.ndarray:
    """Constant base scaled by (1 - alpha_bar_t): strong early, fading late."""
    return base * (1.0 - sched.alpha_bar)


@dataclass(frozen=True)
class Observation:
    """Conditioning data in the same normalized frame as the scene nodes.

    goals, when present, are world-frame target endpoints.
    """

    history: np.ndarray            # (N, t_hist, 2) normalized frame
    obs_mask: np.ndarray           # (N, t_hist) bool
    noise_sigma: float = 0.0
    goals: np.ndarray | None = None  # (N, 2) world frame

    def __post_init__(self):
        hist = np.asarray(self.history, dtype=np.float64)
        mask = np.asarray(self.obs_mask, dtype=bool)
        if hist.ndim != 3 or hist.shape[2] != 2:
            raise ValueError(f"history must be (N, t_hist, 2), got {hist.shape}")
        if mask.shape != hist.shape[:2]:
            raise ValueError("obs_mask shape must match history")
        if not mask[:, -1].all():
            raise ValueError("current frame must be observed")
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "obs_mask", mask)
        if self.goals is not None:
            goals = np.asarray(self.goals, dtype=np.float64)
            if goals.shape != (hist.shape[0], 2):
                raise ValueError(f"goals must be (N, 2), got {goals.shape}")
            if not np.isfinite(goals).all():
                raise ValueError("goals contain non-finite values")
            object.__setattr__(self, "goals", goals)


def observation_from_scene(scene: TrajectoryScene, graph: SceneGraph,
                           goals=None) -> Observation:
    """Extract the normalized observed history (and optional goals) for guidance."""
    return Observation(
        history=graph.nodes[:, : scene.t_hist].copy(),
        obs_mask=scene.obs_mask.copy(),
        noise_sigma=scene.noise_sigma,
        goals=None if goals is None else np.asarray(goals, dtype=np.float64),
    )


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def _guarded_norm(ss: torch.Tensor) -> torch.Tensor:
    """sqrt of a sum of squares that is exactly 0 (with zero grad) at 0."""
    return torch.sqrt(ss.clamp_min(_TINY)) * (ss > _TINY)


def _rotations(headings: np.ndarray) -> torch.Tensor:
    c, s = np.cos(headings), np.sin(headings)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (N, 2, 2)
    return torch.from_numpy(rot)


def denormalize(traj, graph: SceneGraph):
    """Map agent-local trajectories (..., N, T, 2) back to the world frame."""
    arr = _as_tensor(traj)
    rot = _rotations(graph.headings)
    origins = torch.from_numpy(graph.origins)
    world = torch.einsum("nij,...ntj->...nti", rot, arr) + origins[:, None, :]
    return world.numpy() if not isinstance(traj, torch.Tensor) else world


def loss_reconstruction(x0_hat_traj, obs: Observation) -> torch.Tensor:
    """L2 norm of the masked history residual (normalized frame).

    Masked-out entries contribute nothing, so the loss is invariant to
    whatever the observation stores at unavailable frames.
    """
    traj = _as_tensor(x0_hat_traj)
    t_hist = obs.history.shape[1]
    target = torch.from_numpy(obs.history)
    mask = torch.from_numpy(obs.obs_mask.astype(np.float64))[..., None]
    resid = (traj[..., :t_hist, :] - target) * mask
    ss = (resid ** 2).sum(dim=(-3, -2, -1))
    return _guarded_norm(ss)


def loss_repeller(x0_hat_traj, radius: float = DEFAULT_REPELLER_RADIUS) -> torch.Tensor:
    """Hinge penalty on close agent pairs, summed over ordered pairs and frames.

    Input must be world-frame positions (..., N, T, 2); the i=j diagonal is
    excluded and the sum is divided by the agent count.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    traj = _as_tensor(x0_hat_traj)
    n = traj.shape[-3]
    if n < 2:
        return traj.sum(dim=(-3, -2, -1)) * 0.0
    diff = traj.unsqueeze(-4) - traj.unsqueeze(-3)          # (..., N, N, T, 2)
    ss = (diff ** 2).sum(-1)
    dist = torch.sqrt(ss.clamp_min(_TINY))
    hinge = torch.relu(1.0 - dist / radius)
    off_diag = 1.0 - torch.eye(n, dtype=traj.dtype)
    hinge = hinge * off_diag[..., :, :, None]
    return hinge.sum(dim=(-3, -2, -1)) / n


def loss_goal(x0_hat_traj, goals) -> torch.Tensor:
    """Sum over agents of the distance between final positions and goals (world frame)."""
    if goals is None:
        raise ValueError("goal guidance requires goals")
    traj = _as_tensor(x0_hat_traj)
    target = _as_tensor(goals)
    resid = traj[..., -1, :] - target
    ss = (resid ** 2).sum(-1)
    return _guarded_norm(ss).sum(-1)


def _total_loss(traj_norm: torch.Tensor, graph: SceneGraph, obs: Observation,
                terms) -> torch.Tensor:
    """Weighted guidance loss for (..., N, T, 2) normalized trajectories."""
    total = traj_norm.sum(dim=(-3, -2, -1)) * 0.0
    world = None
    for term in terms:
        if term.weight == 0:
            continue
        if term.kind == "reconstruction":
            total = total + term.weight * loss_reconstruction(traj_norm, obs)
            continue
        if world is None:
            world = denormalize(traj_norm, graph)
        if term.kind == "repeller":
            total = total + term.weight * loss_repeller(world, term.radius)
        else:
            total = total + term.weight * loss_goal(world, obs.goals)
    return total


def _gradient_core(model: DenoiserModel, sched: NoiseSchedule, nodes: np.ndarray,
                   t: int, graph: SceneGraph, obs: Observation, spec: GuidanceSpec):
    """Shared guided-step computation, batched over leading sample dims.

    Returns (gradient, eps_hat, loss values) as numpy arrays; gradient is
    -d(total loss)/d(x_t), clipped per scene sample.
    """
    x = torch.from_numpy(np.ascontiguousarray(nodes)).clone().requires_grad_(True)
    edges = torch.from_numpy(graph.edges)
    eps_hat = model.net(x, t, edges)
    if not spec.active:
        batch_shape = x.shape[:-2]
        return (
            np.zeros_like(nodes),
            eps_hat.detach().numpy(),
            np.zeros(batch_shape, dtype=np.float64),
        )
    eps_for_x0 = eps_hat if spec.full_chain else eps_hat.detach()
    x0_hat = sched.posterior_mean_x0(x, t, eps_for_x0)
    t_full = graph.nodes.shape[1]
    traj = model.decode_latents_torch(x0_hat, t_full)
    losses = _total_loss(traj, graph, obs, spec.terms)
    grad = torch.autograd.grad(losses.sum(), x)[0]
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite guidance gradient at step t={t}")
    g = -grad
    flat = g.reshape(*g.shape[:-2], -1)
    norms = flat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    scale = (spec.grad_clip / norms).clamp(max=1.0)
    g = (flat * scale).reshape(g.shape)
    return g.detach().numpy(), eps_hat.detach().numpy(), losses.detach().numpy()


def guidance_gradient(model: DenoiserModel, sched: NoiseSchedule, x_t,
                      graph: SceneGraph, obs: Observation,
                      spec: GuidanceSpec) -> np.ndarray:
    """Clipped negative gradient of the total guidance loss at x_t.

    x_t is a LatentSceneState or a bare (N, k) array paired with spec-level
    step handling by the caller.
    """
    nodes = np.asarray(x_t.nodes, dtype=np.float64)
    g, _, _ = _gradient_core(model, sched, nodes, x_t.step, graph, obs, spec)
    return g
