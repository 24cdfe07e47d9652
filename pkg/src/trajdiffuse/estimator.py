"""Scikit-learn style entry points.

TrajectoryPCA is a plain transformer over flattened trajectory vectors;
DiffusionTrajectoryPredictor wires codec fitting, denoiser training and
guided sampling behind the usual fit/predict surface so the model composes
with sklearn tooling (get_params, set_params, clone).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import sampler as sampler_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import (
    DenoiserModel,
    ModelConfig,
    TrainConfig,
    fit_trajectory_codec,
    train,
)
from .mathutils import pca_decode, pca_encode, pca_fit
from .schedule import NoiseSchedule
from .validation import check_array_2d, check_goals, check_scenes

__all__ = ["TrajectoryPCA", "DiffusionTrajectoryPredictor"]


class TrajectoryPCA(TransformerMixin, BaseEstimator):
    """PCA via covariance eigendecomposition with a deterministic sign fix.

    Population-normalized variances; components_ rows are orthonormal and
    sorted by explained variance descending.
    """

    def __init__(self, n_components=10):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array_2d(X)
        self.codec_ = pca_fit(X, self.n_components)
        self.components_ = self.codec_.components
        self.mean_ = self.codec_.mean
        self.explained_variance_ = self.codec_.explained_variance
        return self

    def transform(self, X):
        self._check_fitted()
        return pca_encode(self.codec_, np.asarray(X, dtype=np.float64))

    def inverse_transform(self, Z):
        self._check_fitted()
        return pca_decode(self.codec_, np.asarray(Z, dtype=np.float64))

    def _check_fitted(self):
        if not hasattr(self, "codec_"):
            raise RuntimeError("TrajectoryPCA is not fitted; call fit first")


class DiffusionTrajectoryPredictor(BaseEstimator):
    """Joint trajectory prediction by guided latent diffusion.

    fit() learns the trajectory codec and the noise predictor from complete
    scenes; predict() runs the guided reverse chain on observed histories
    and returns K joint rollouts per scene. All stochasticity is controlled
    by explicit seeds.
    """

    def __init__(self, n_components=10, hidden=128, n_layers=3,
                 diffusion_steps=100, gamma=5.0, time_embed_dim=32,
                 beta_schedule="linear", epochs=50, batch_size=32,
                 lr=1e-3, seed=0):
        self.n_components = n_components
        self.hidden = hidden
        self.n_layers = n_layers
        self.diffusion_steps = diffusion_steps
        self.gamma = gamma
        self.time_embed_dim = time_embed_dim
        self.beta_schedule = beta_schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    # -- training -----------------------------------------------------------

    def fit(self, scenes, y=None):
        scenes = check_scenes(scenes)
        self.schedule_ = NoiseSchedule.create(
            T=self.diffusion_steps, kind=self.beta_schedule, gamma=self.gamma
        )
        codec, scale = fit_trajectory_codec(scenes, self.n_components)
        config = ModelConfig(
            k=self.n_components, hidden=self.hidden, layers=self.n_layers,
            time_embed_dim=self.time_embed_dim,
        )
        self.model_ = DenoiserModel(config, codec, scale, seed=self.seed)
        self.loss_history_ = train(
            self.model_, scenes, self.schedule_,
            TrainConfig(batch_size=self.batch_size, lr=self.lr,
                        epochs=self.epochs, seed=self.seed),
        )
        return self

    # -- inference ------------------------------------------------------------

    def predict(self, scenes, K=20, preset="predict", seed=0, goals=None,
                **spec_overrides):
        """K joint futures per scene; returns a list of SceneSampleSet.

        goals, when given, is one (N_agents, 2) array per scene (required
        by the controllable preset).
        """
        self._check_fitted()
        scenes = check_scenes(scenes)
        if goals is not None and len(goals) != len(scenes):
            raise ValueError("goals must provide one entry per scene")
        out = []
        for i, scene in enumerate(scenes):
            scene_goals = None
            if goals is not None and goals[i] is not None:
                scene_goals = check_goals(goals[i], scene.n_agents)
            out.append(sampler_mod.predict(
                self.model_, self.schedule_, scene, K,
                preset=preset, seed=seed + i, goals=scene_goals,
                **spec_overrides,
            ))
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        self._check_fitted()
        save_checkpoint(self.model_, self.schedule_, path)

    @classmethod
    def from_checkpoint(cls, path):
        model, sched = load_checkpoint(path)
        est = cls(
            n_components=model.config.k, hidden=model.config.hidden,
            n_layers=model.config.layers, diffusion_steps=sched.T,
            gamma=sched.gamma, time_embed_dim=model.config.time_embed_dim,
            beta_schedule=sched.kind, seed=model.init_seed,
        )
        est.model_ = model
        est.schedule_ = sched
        est.loss_history_ = []
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError(
                "DiffusionTrajectoryPredictor is not fitted; call fit or from_checkpoint"
            )
