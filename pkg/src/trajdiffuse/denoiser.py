"""Graph-attention noise predictor over latent trajectory nodes.

Each agent's full trajectory lives as a whitened PCA latent vector; the
predictor consumes the noisy latents at diffusion step t together with the
scene's pairwise edge features and returns the noise estimate. Weights are
torch float64 so gradient checks against central differences are tight;
every random draw (init, step/noise sampling, shuffling) comes from
explicit RngStream instances, never torch's global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import SceneGraph, TrajectoryScene, build_scene_graph
from .mathutils import PcaCodec, RngStream, pca_encode, pca_fit
from .schedule import NoiseSchedule

__all__ = [
    "NumericError",
    "ModelConfig",
    "TrainConfig",
    "LatentSceneState",
    "NoisePredictor",
    "DenoiserModel",
    "time_embedding",
    "fit_trajectory_codec",
    "training_loss",
    "train",
]

DTYPE = torch.float64
EDGE_DIM = 6


class NumericError(RuntimeError):
    """Non-finite values produced during a numeric computation."""


@dataclass(frozen=True)
class ModelConfig:
    k: int = 10
    hidden: int = 128
    layers: int = 3
    time_embed_dim: int = 32

    def __post_init__(self):
        if self.k < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("k, hidden and layers must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even and >= 2")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0


@dataclass(frozen=True)
class LatentSceneState:
    """Per-agent latent coordinates at one diffusion step."""

    nodes: np.ndarray   # (N, k)
    step: int


def time_embedding(t: int, dim: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal step embedding: interleaved (sin, cos) pairs.

    emb[2i] = sin(t / 10000^(2i/dim)), emb[2i+1] = cos(same argument).
    """
    if dim < 2 or dim % 2:
        raise ValueError("dim must be even and >= 2")
    if T is not None and not 1 <= t <= T:
        raise ValueError(f"step t={t} outside [1, {T}]")
    half = np.arange(dim // 2, dtype=np.float64)
    args = t / np.power(10000.0, 2.0 * half / dim)
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(args)
    emb[1::2] = np.cos(args)
    return emb


def _init_linear(layer: nn.Linear, rng: RngStream, zero: bool = False) -> None:
    """Uniform fan-in init (or zeros), drawn from an explicit stream."""
    fan_in = layer.weight.shape[1]
    bound = 0.0 if zero else 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
        else:
            layer.weight.copy_(torch.from_numpy(
                rng.uniform(-bound, bound, tuple(layer.weight.shape))))
        if layer.bias is not None:
            layer.bias.zero_()


class _GatLayer(nn.Module):
    """Single-head graph attention with edge-conditioned scores.

    Attention logit for the (i, j) pair is
    LeakyReLU(a([W h_i || W h_j || W_e e_ij])) with messages W h_j; setting
    W_e to zero recovers plain node-pair attention.
    """

    def __init__(self, hidden: int, edge_in: int):
        super().__init__()
        self.W = nn.Linear(hidden, hidden, bias=False, dtype=DTYPE)
        self.We = nn.Linear(edge_in, hidden, bias=False, dtype=DTYPE)
        self.attn = nn.Linear(3 * hidden, 1, bias=False, dtype=DTYPE)
        self.leaky = nn.LeakyReLU(0.2)

    def forward(self, h: torch.Tensor, edge_feat: torch.Tensor) -> torch.Tensor:
        # h: (B, N, H); edge_feat: (B, N, N, edge_in)
        B, N, H = h.shape
        wh = self.W(h)
        we = self.We(edge_feat)
        pair = torch.cat([
            wh.unsqueeze(2).expand(B, N, N, H),
            wh.unsqueeze(1).expand(B, N, N, H),
            we,
        ], dim=-1)
        logits = self.leaky(self.attn(pair).squeeze(-1))      # (B, N, N)
        alpha = torch.softmax(logits, dim=2)
        msg = torch.einsum("bij,bjh->bih", alpha, wh)
        return h + torch.nn.functional.mish(msg)


class NoisePredictor(nn.Module):
    """Encoder -> stacked GAT layers -> decoder with input residual.

    The encoder maps (latent || time embedding) to the hidden width through
    a two-layer Mish MLP with post-layer normalization; edges are augmented
    once with the encoded source node and shared by all attention layers;
    the decoder's final projection starts at zero so the untrained model is
    the identity on its residual input.
    """

    def __init__(self, config: ModelConfig, rng: RngStream):
        super().__init__()
        self.config = config
        k, hidden = config.k, config.hidden
        self.enc1 = nn.Linear(k + config.time_embed_dim, hidden, dtype=DTYPE)
        self.enc2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.enc_norm = nn.LayerNorm(hidden, dtype=DTYPE)
        self.gat = nn.ModuleList(
            [_GatLayer(hidden, EDGE_DIM + hidden) for _ in range(config.layers)]
        )
        self.dec1 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.dec2 = nn.Linear(hidden, k, dtype=DTYPE)

        init_rng = rng.child(0)
        _init_linear(self.enc1, init_rng)
        _init_linear(self.enc2, init_rng)
        for layer in self.gat:
            _init_linear(layer.W, init_rng)
            _init_linear(layer.We, init_rng)
            _init_linear(layer.attn, init_rng)
        _init_linear(self.dec1, init_rng)
        _init_linear(self.dec2, init_rng, zero=True)

    def forward(self, nodes: torch.Tensor, t: int, edges: torch.Tensor) -> torch.Tensor:
        """nodes: (B, N, k) or (N, k); edges: (N, N, 6). Returns noise estimate."""
        squeeze = nodes.ndim == 2
        if squeeze:
            nodes = nodes.unsqueeze(0)
        B, N, _ = nodes.shape

        emb = torch.from_numpy(time_embedding(t, self.config.time_embed_dim))
        emb = emb.to(DTYPE).expand(B, N, -1)
        h = self.enc1(torch.cat([nodes, emb], dim=-1))
        h = self.enc_norm(self.enc2(torch.nn.functional.mish(h)))

        edge_feat = torch.cat([
            edges.unsqueeze(0).expand(B, N, N, EDGE_DIM),
            h.unsqueeze(2).expand(B, N, N, h.shape[-1]),
        ], dim=-1)
        for idx, layer in enumerate(self.gat):
            h = layer(h, edge_feat)
            if not torch.isfinite(h.detach()).all():
                raise NumericError(f"non-finite activations after GAT layer {idx}")
        out = self.dec2(torch.nn.functional.mish(self.dec1(h))) + nodes
        if not torch.isfinite(out.detach()).all():
            raise NumericError("non-finite noise prediction in decoder")
        return out.squeeze(0) if squeeze else out


def fit_trajectory_codec(scenes, k: int) -> tuple[PcaCodec, np.ndarray]:
    """Fit the latent codec on normalized full trajectories of all agents.

    Returns the codec plus the per-component whitening scale used by the
    diffusion chain (sqrt explained variance, floored so near-dead
    components cannot blow up the division).
    """
    samples = []
    for scene in scenes:
        graph = scene if isinstance(scene, SceneGraph) else build_scene_graph(scene)
        samples.append(graph.nodes.reshape(graph.n_agents, -1))
    stacked = np.concatenate(samples, axis=0)
    codec = pca_fit(stacked, k)
    scale = np.sqrt(codec.explained_variance)
    floor = max(1e-3 * (scale[0] if scale.size else 0.0), 1e-8)
    return codec, np.maximum(scale, floor)


class DenoiserModel:
    """Trainable noise predictor bundled with its latent codec.

    Latents handed to the network are whitened: z = encode(traj)/scale.
    """

    def __init__(self, config: ModelConfig, codec: PcaCodec,
                 latent_scale: np.ndarray, seed: int = 0):
        if codec.k != config.k:
            raise ValueError(f"codec k={codec.k} != model k={config.k}")
        latent_scale = np.asarray(latent_scale, dtype=np.float64)
        if latent_scale.shape != (config.k,):
            raise ValueError("latent_scale must have shape (k,)")
        if not (latent_scale > 0).all():
            raise ValueError("latent_scale entries must be positive")
        self.config = config
        self.codec = codec
        self.latent_scale = latent_scale
        self.init_seed = int(seed)
        self.net = NoisePredictor(config, RngStream(seed, 0xD1FF))

    # -- latent conversions ------------------------------------------------

    def encode_trajectories(self, nodes: np.ndarray) -> np.ndarray:
        """(..., T, 2) normalized trajectories -> (..., k) whitened latents."""
        nodes = np.asarray(nodes, dtype=np.float64)
        flat = nodes.reshape(*nodes.shape[:-2], -1)
        return pca_encode(self.codec, flat) / self.latent_scale

    def decode_latents(self, z: np.ndarray, t_full: int) -> np.ndarray:
        """(..., k) whitened latents -> (..., T, 2) normalized trajectories."""
        z = np.asarray(z, dtype=np.float64)
        flat = (z * self.latent_scale) @ self.codec.components + self.codec.mean
        return flat.reshape(*z.shape[:-1], t_full, 2)

    def decode_latents_torch(self, z: torch.Tensor, t_full: int) -> torch.Tensor:
        """Differentiable twin of decode_latents."""
        scale = torch.from_numpy(self.latent_scale)
        comps = torch.from_numpy(self.codec.components)
        mean = torch.from_numpy(self.codec.mean)
        flat = (z * scale) @ comps + mean
        return flat.reshape(*z.shape[:-1], t_full, 2)

    def encode_trajectories_torch(self, traj: torch.Tensor) -> torch.Tensor:
        comps = torch.from_numpy(self.codec.components)
        mean = torch.from_numpy(self.codec.mean)
        scale = torch.from_numpy(self.latent_scale)
        flat = traj.reshape(*traj.shape[:-2], traj.shape[-2] * 2)
        return (flat - mean) @ comps.T / scale

    # -- inference ----------------------------------------------------------

    def predict_noise(self, state: LatentSceneState, graph: SceneGraph) -> np.ndarray:
        """Noise estimate for one scene state; numpy in, numpy out."""
        nodes = np.asarray(state.nodes, dtype=np.float64)
        if nodes.shape != (graph.n_agents, self.config.k):
            raise ValueError(
                f"state nodes shape {nodes.shape} != ({graph.n_agents}, {self.config.k})"
            )
        with torch.no_grad():
            out = self.net(
                torch.from_numpy(nodes), state.step, torch.from_numpy(graph.edges)
            )
        return out.numpy()

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()


def _scene_latents(model: DenoiserModel, scenes) -> list[tuple[SceneGraph, np.ndarray]]:
    out = []
    for scene in scenes:
        graph = build_scene_graph(scene)
        out.append((graph, model.encode_trajectories(graph.nodes)))
    return out


def training_loss(model: DenoiserModel, batch, sched: NoiseSchedule,
                  rng: RngStream) -> torch.Tensor:
    """Min-SNR-weighted denoising loss over a batch of (graph, clean latents).

    Per scene: t ~ U{1..T}, eps ~ N(0, I), x_t by the closed-form forward
    map, loss = weight(t) * mean((eps - eps_hat)^2); returns the batch mean
    as a differentiable scalar.
    """
    if not batch:
        raise ValueError("empty batch")
    total = None
    for graph, z0 in batch:
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(z0.shape)
        x_t = sched.forward_noise(z0, t, eps)
        eps_hat = model.net(
            torch.from_numpy(x_t), t, torch.from_numpy(graph.edges)
        )
        err = (torch.from_numpy(eps) - eps_hat) ** 2
        scene_loss = sched.minsnr_weight(t) * err.mean()
        total = scene_loss if total is None else total + scene_loss
    return total / len(batch)


def train(model: DenoiserModel, scenes, sched: NoiseSchedule,
          config: TrainConfig) -> list[float]:
    """Adam training loop; mutates the model in place, returns per-epoch loss.

    Deterministic given config.seed: the shuffle stream and the noise
    stream are both derived from it, and all math is float64 CPU.
    """
    if not scenes:
        raise ValueError("empty training set")
    prepared = _scene_latents(model, scenes)
    shuffle_rng = RngStream(config.seed, 1)
    noise_rng = RngStream(config.seed, 2)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(prepared), config.batch_size):
            batch = [prepared[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = training_loss(model, batch, sched, noise_rng)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_loss += value * len(batch)
        history.append(epoch_loss / len(prepared))
    return history
