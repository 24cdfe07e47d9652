"""Shared fixtures: single-thread torch, micro-models, and the trained
desk-scale model reused by the sampler and acceptance tests."""

import numpy as np
import pytest
import torch

import trajdiffuse as td

torch.set_num_threads(1)


MICRO_T_HIST = 3
MICRO_T_FUT = 4
MICRO_T_FULL = MICRO_T_HIST + MICRO_T_FUT


def random_micro_scene(seed: int, n_agents: int = 2,
                       t_hist: int = MICRO_T_HIST, t_fut: int = MICRO_T_FUT):
    """Small smooth random-walk scene with distinct headings."""
    rng = td.RngStream(seed, 7)
    t_full = t_hist + t_fut
    start = rng.uniform(-3, 3, (n_agents, 2))
    angle = rng.uniform(-np.pi, np.pi, n_agents)
    speed = rng.uniform(0.3, 0.6, n_agents)
    wiggle = rng.normal(0.0, 0.05, (n_agents, t_full, 2))
    steps = np.arange(t_full)
    dirs = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    pos = start[:, None] + steps[None, :, None] * (speed[:, None] * dirs)[:, None]
    pos = pos + wiggle
    return td.TrajectoryScene(
        positions=pos, t_hist=t_hist, t_fut=t_fut,
        obs_mask=np.ones((n_agents, t_hist), dtype=bool),
        scene_id=f"micro-{seed}",
    )


def micro_model(seed: int = 0, k: int = 3, hidden: int = 8, layers: int = 3,
                n_fit_scenes: int = 40):
    """Untrained micro model with a codec fitted on random micro scenes."""
    scenes = [random_micro_scene(100 + i, n_agents=2) for i in range(n_fit_scenes)]
    codec, scale = td.fit_trajectory_codec(scenes, k)
    config = td.ModelConfig(k=k, hidden=hidden, layers=layers, time_embed_dim=4)
    return td.DenoiserModel(config, codec, scale, seed=seed)


def get_flat_params(model) -> np.ndarray:
    return np.concatenate(
        [p.detach().numpy().reshape(-1) for p in model.parameters()]
    )


def set_flat_params(model, vec: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(
                vec[offset:offset + n].reshape(tuple(p.shape))
            ))
            offset += n
    assert offset == vec.size


def flat_param_grad(loss, model) -> np.ndarray:
    grads = torch.autograd.grad(loss, list(model.parameters()))
    return np.concatenate([g.numpy().reshape(-1) for g in grads])


def permute_graph(graph, perm):
    return td.SceneGraph(
        nodes=graph.nodes[perm],
        edges=graph.edges[np.ix_(perm, perm)],
        headings=graph.headings[perm],
        origins=graph.origins[perm],
        t_hist=graph.t_hist,
        t_fut=graph.t_fut,
    )


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(np.linalg.norm(got), np.linalg.norm(want), 1e-12)
    return float(np.linalg.norm(got - want) / scale)


@pytest.fixture(scope="session")
def micro_sched():
    return td.NoiseSchedule.create(T=20)


@pytest.fixture(scope="session")
def trained_setup():
    """The desk-scale training run shared by sampler/acceptance tests.

    500 mixed synthetic scenes, 100 epochs, default architecture: exactly
    the configuration the training-sanity acceptance criterion pins down.
    """
    train_scenes = td.generate(td.SynthConfig(
        n_scenes=500, seed=11, agents_min=1, agents_max=3,
        kinds=("constant_velocity", "sine_turn", "crossing_pair"),
    ))
    sched = td.NoiseSchedule.create(T=100)
    codec, scale = td.fit_trajectory_codec(train_scenes, 10)
    model = td.DenoiserModel(td.ModelConfig(), codec, scale, seed=5)
    history = td.train(model, train_scenes, sched,
                       td.TrainConfig(batch_size=32, lr=1e-3, epochs=100, seed=5))
    return {"model": model, "sched": sched, "history": history,
            "train_scenes": train_scenes}
