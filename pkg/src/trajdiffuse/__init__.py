"""Joint multi-agent trajectory prediction and controllable generation with
guided latent diffusion.

A single unconditionally trained diffusion model over full (history +
future) trajectories serves prediction, robust prediction under noisy or
incomplete history, and goal-directed generation, all selected at sampling
time through posterior guidance.
"""

from .data import (
    ETHUCY_SCENES,
    ParseError,
    Perturbation,
    RawTrack,
    SceneGraph,
    TrajectoryScene,
    apply_perturbation,
    build_scene_graph,
    leave_one_out_split,
    load_ethucy,
    make_windows,
    write_ethucy,
)
from .denoiser import (
    DenoiserModel,
    LatentSceneState,
    ModelConfig,
    NumericError,
    TrainConfig,
    fit_trajectory_codec,
    train,
    training_loss,
)
from .estimator import DiffusionTrajectoryPredictor, TrajectoryPCA
from .guidance import (
    GuidanceSpec,
    GuidanceTerm,
    Observation,
    guidance_gradient,
    loss_goal,
    loss_reconstruction,
    loss_repeller,
)
from .mathutils import PcaCodec, RngStream, finite_diff_grad, pca_decode, pca_encode, pca_fit
from .metrics import (
    EvalReport,
    collision_rate,
    constant_velocity_extrapolation,
    evaluate_scene,
    joint_ade,
    joint_fde,
)
from .sampler import PredictionRequest, SceneSampleSet, predict, sample_scene
from .schedule import NoiseSchedule
from .synthgen import SynthConfig, generate
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
