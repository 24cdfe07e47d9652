import numpy as np
import pytest
import torch

import trajdiffuse as td
from trajdiffuse.data import build_scene_graph
from trajdiffuse.guidance import (
    GuidanceSpec,
    GuidanceTerm,
    Observation,
    _gradient_core,
    default_lambda_schedule,
    denormalize,
    guidance_gradient,
    loss_goal,
    loss_reconstruction,
    loss_repeller,
    observation_from_scene,
)
from trajdiffuse.mathutils import RngStream, finite_diff_grad

from conftest import micro_model, random_micro_scene, relative_error


def make_obs(history, mask=None, goals=None):
    history = np.asarray(history, dtype=np.float64)
    if mask is None:
        mask = np.ones(history.shape[:2], dtype=bool)
    return Observation(history=history, obs_mask=mask, goals=goals)


class TestReconstruction:
    def test_zero_when_history_matches(self):
        hist = RngStream(0).standard_normal((2, 3, 2))
        traj = np.concatenate([hist, np.ones((2, 4, 2))], axis=1)
        assert float(loss_reconstruction(traj, make_obs(hist))) == 0.0

    def test_hand_l2(self):
        hist = np.zeros((1, 2, 2))
        traj = np.zeros((1, 3, 2))
        traj[0, 0] = (3.0, 4.0)     # residual (3,4) at frame 0, (0,0) at frame 1
        assert float(loss_reconstruction(traj, make_obs(hist))) == pytest.approx(5.0)

    def test_fully_masked_except_current(self):
        hist = RngStream(1).standard_normal((1, 4, 2))
        mask = np.zeros((1, 4), dtype=bool)
        mask[0, -1] = True
        traj = RngStream(2).standard_normal((1, 6, 2)) * 10
        traj[0, 3] = hist[0, 3]   # current frame matches
        assert float(loss_reconstruction(traj, make_obs(hist, mask))) == 0.0

    def test_masked_entries_bit_invariant(self):
        rng = RngStream(3)
        hist = rng.standard_normal((2, 4, 2))
        mask = np.ones((2, 4), dtype=bool)
        mask[0, 1] = mask[1, 0] = False
        traj = rng.standard_normal((2, 7, 2))
        base = float(loss_reconstruction(traj, make_obs(hist, mask)))
        hist2 = hist.copy()
        hist2[0, 1] = 1e6
        hist2[1, 0] = -1e6
        again = float(loss_reconstruction(traj, make_obs(hist2, mask)))
        assert base == again

    def test_nonnegative(self):
        rng = RngStream(4)
        for _ in range(10):
            traj = rng.standard_normal((2, 5, 2))
            hist = rng.standard_normal((2, 3, 2))
            assert float(loss_reconstruction(traj, make_obs(hist))) >= 0.0


class TestRepeller:
    def test_zero_beyond_radius(self):
        traj = np.zeros((2, 4, 2))
        traj[1, :, 0] = 5.0
        assert float(loss_repeller(traj, radius=1.0)) == 0.0

    def test_single_agent_zero(self):
        assert float(loss_repeller(np.zeros((1, 6, 2)), radius=1.0)) == 0.0

    def test_coincident_pair_hand_value(self):
        traj = np.zeros((2, 3, 2))
        traj[1, :, 0] = (10.0, 0.0, 10.0)   # coincident only at frame 1
        assert float(loss_repeller(traj, radius=1.0)) == pytest.approx(1.0)

    def test_scales_with_proximity(self):
        # Ordered pairs both count: L = (1/N) * 2 * max(1 - d/r, 0).
        traj = np.zeros((2, 1, 2))
        traj[1, 0, 0] = 0.5
        assert float(loss_repeller(traj, radius=1.0)) == pytest.approx(0.5)
        traj[1, 0, 0] = 0.25
        assert float(loss_repeller(traj, radius=1.0)) == pytest.approx(0.75)

    def test_radius_validation(self):
        with pytest.raises(ValueError):
            loss_repeller(np.zeros((2, 1, 2)), radius=0.0)


class TestGoal:
    def test_zero_at_goal(self):
        traj = RngStream(5).standard_normal((3, 4, 2))
        assert float(loss_goal(traj, traj[:, -1].copy())) == 0.0

    def test_three_four_five(self):
        traj = np.zeros((1, 4, 2))
        assert float(loss_goal(traj, np.array([[3.0, 4.0]]))) == pytest.approx(5.0)

    def test_translation_invariance(self):
        rng = RngStream(6)
        traj = rng.standard_normal((2, 5, 2))
        goals = rng.standard_normal((2, 2))
        base = float(loss_goal(traj, goals))
        shift = np.array([7.0, -3.0])
        assert float(loss_goal(traj + shift, goals + shift)) == pytest.approx(base, abs=1e-12)

    def test_missing_goals(self):
        with pytest.raises(ValueError, match="goals"):
            loss_goal(np.zeros((1, 3, 2)), None)


class TestDenormalize:
    def test_roundtrip_with_graph(self):
        scene = random_micro_scene(31, n_agents=3)
        graph = build_scene_graph(scene)
        world = denormalize(graph.nodes, graph)
        np.testing.assert_allclose(world, scene.positions, atol=1e-9)


def _setup_gradient_case(seed, n_agents=2, with_goal=False, with_repeller=False):
    model = micro_model(seed=seed)
    sched = td.NoiseSchedule.create(T=20)
    scene = random_micro_scene(400 + seed, n_agents=n_agents)
    graph = build_scene_graph(scene)
    rng = RngStream(seed, 9)
    goals = scene.future[:, -1] + rng.normal(0, 0.5, (n_agents, 2)) if with_goal else None
    obs = observation_from_scene(scene, graph, goals=goals)
    terms = [GuidanceTerm("reconstruction", weight=1.0)]
    if with_goal:
        terms.append(GuidanceTerm("goal", weight=0.7))
    if with_repeller:
        terms.append(GuidanceTerm("repeller", weight=0.5, radius=1.5))
    return model, sched, graph, obs, terms


class TestGuidanceGradient:
    def test_zero_weights_zero_gradient(self):
        model, sched, graph, obs, _ = _setup_gradient_case(1)
        spec = GuidanceSpec(
            terms=(GuidanceTerm("reconstruction", weight=0.0),),
            lambda_schedule=default_lambda_schedule(sched, 1.0),
        )
        z = RngStream(10).standard_normal((2, 3))
        g = guidance_gradient(model, sched, td.LatentSceneState(z, 5), graph, obs, spec)
        np.testing.assert_array_equal(g, np.zeros_like(z))

    def test_zero_loss_zero_gradient(self):
        model, sched, graph, _, _ = _setup_gradient_case(2)
        z = RngStream(11).standard_normal((2, 3))
        t = 4
        # Build an observation that exactly matches the decoded posterior mean.
        eps_hat = model.predict_noise(td.LatentSceneState(z, t), graph)
        x0 = sched.posterior_mean_x0(z, t, eps_hat)
        traj = model.decode_latents(x0, graph.nodes.shape[1])
        obs = Observation(
            history=traj[:, :graph.t_hist],
            obs_mask=np.ones((2, graph.t_hist), dtype=bool),
        )
        spec = GuidanceSpec(
            terms=(GuidanceTerm("reconstruction", weight=1.0),),
            lambda_schedule=default_lambda_schedule(sched, 1.0),
        )
        g = guidance_gradient(model, sched, td.LatentSceneState(z, t), graph, obs, spec)
        np.testing.assert_allclose(g, np.zeros_like(z), atol=1e-9)

    @pytest.mark.parametrize("full_chain", [True, False])
    def test_matches_finite_differences(self, full_chain):
        model, sched, graph, obs, terms = _setup_gradient_case(
            3, with_goal=True, with_repeller=True
        )
        spec = GuidanceSpec(
            terms=tuple(terms),
            lambda_schedule=default_lambda_schedule(sched, 1.0),
            grad_clip=1e9,
            full_chain=full_chain,
        )
        t_full = graph.nodes.shape[1]
        rng = RngStream(12)
        for point in range(4):
            z = rng.standard_normal((2, 3))
            t = int(rng.integers(1, sched.T + 1))
            g, eps_hat_base, _ = _gradient_core(model, sched, z, t, graph, obs, spec)

            def f(flat):
                x = flat.reshape(2, 3)
                if full_chain:
                    eps_hat = model.predict_noise(td.LatentSceneState(x, t), graph)
                else:
                    eps_hat = eps_hat_base
                x0 = sched.posterior_mean_x0(x, t, eps_hat)
                traj = torch.from_numpy(model.decode_latents(x0, t_full))
                from trajdiffuse.guidance import _total_loss
                return float(_total_loss(traj, graph, obs, spec.terms))

            numeric = -finite_diff_grad(f, z.reshape(-1), h=1e-6).reshape(2, 3)
            assert relative_error(g, numeric) < 1e-4

    def test_gradient_clipping(self):
        model, sched, graph, obs, terms = _setup_gradient_case(4)
        z = RngStream(13).standard_normal((2, 3)) * 50   # far from data: big loss
        spec_small = GuidanceSpec(
            terms=tuple(terms), lambda_schedule=default_lambda_schedule(sched, 1.0),
            grad_clip=0.1,
        )
        g = guidance_gradient(model, sched, td.LatentSceneState(z, 10), graph, obs, spec_small)
        assert np.linalg.norm(g) <= 0.1 + 1e-12

    def test_single_update_decreases_loss_statistically(self):
        sched = td.NoiseSchedule.create(T=20)
        model = micro_model(seed=5)
        decreases = 0
        total = 100
        rng = RngStream(14)
        t_full = random_micro_scene(0).t_full
        spec = GuidanceSpec(
            terms=(GuidanceTerm("reconstruction", weight=1.0),),
            lambda_schedule=default_lambda_schedule(sched, 1.0),
        )
        for trial in range(total):
            scene = random_micro_scene(500 + trial, n_agents=2)
            graph = build_scene_graph(scene)
            obs = observation_from_scene(scene, graph)
            z = rng.standard_normal((2, 3))
            t = int(rng.integers(1, sched.T + 1))
            g, _, loss_before = _gradient_core(model, sched, z, t, graph, obs, spec)
            _, _, loss_after = _gradient_core(
                model, sched, z + 1e-3 * g, t, graph, obs, spec
            )
            if loss_after <= loss_before + 1e-12:
                decreases += 1
        assert decreases >= 95

    def test_nan_state_raises_numeric_error(self):
        model, sched, graph, obs, terms = _setup_gradient_case(6)
        spec = GuidanceSpec(
            terms=tuple(terms), lambda_schedule=default_lambda_schedule(sched, 1.0)
        )
        z = np.full((2, 3), np.nan)
        with pytest.raises(td.NumericError):
            guidance_gradient(model, sched, td.LatentSceneState(z, 5), graph, obs, spec)


class TestSpecValidation:
    def test_weights_nonnegative(self):
        with pytest.raises(ValueError):
            GuidanceTerm("reconstruction", weight=-0.1)

    def test_lambda_nonnegative(self):
        with pytest.raises(ValueError):
            GuidanceSpec(terms=(), lambda_schedule=np.array([-0.1, 0.2]))

    def test_grad_clip_positive(self):
        with pytest.raises(ValueError):
            GuidanceSpec(terms=(), lambda_schedule=np.ones(3), grad_clip=0.0)

    def test_observation_goal_shape(self):
        with pytest.raises(ValueError, match="goals"):
            make_obs(np.zeros((2, 3, 2)), goals=np.zeros((3, 2)))
