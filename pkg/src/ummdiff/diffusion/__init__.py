from .denoiser import Denoiser, DenoiserConfig, timestep_embedding
from .sampling import (
    SamplerConfig,
    check_alpha,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    fuse_predictions,
    training_loss,
)
from .schedule import NoiseSchedule, make_schedule, q_sample, q_step

__all__ = [
    "Denoiser", "DenoiserConfig", "timestep_embedding",
    "SamplerConfig", "check_alpha", "ddim_sample", "ddim_step", "ddim_timesteps",
    "fuse_predictions", "training_loss",
    "NoiseSchedule", "make_schedule", "q_sample", "q_step",
]
