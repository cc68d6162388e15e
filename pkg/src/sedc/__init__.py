"""Diffusion-based trajectory planning for control of physical systems.

States are generated by a guided, endpoint-inpainted diffusion model with a
linear-plus-quadratic (dual-mode) denoiser; controls are recovered from
consecutive states by an autoregressive inverse-dynamics model.  Guided
self-finetuning rolls sampled controls through the true simulator and adds
the resulting trajectories back into the training pool.
"""
from .dynamics import SystemSpec, make_system, rollout, simulate, step
from .dataset import TrajectoryDataset, generate, load, save
from .diffusion import Controller, GuidanceSpec, build_schedule, guided_sample
from .pipeline import TrainConfig, control, gsf_round, plan, run, train

__all__ = [
    "SystemSpec", "make_system", "rollout", "simulate", "step",
    "TrajectoryDataset", "generate", "load", "save",
    "Controller", "GuidanceSpec", "build_schedule", "guided_sample",
    "TrainConfig", "control", "gsf_round", "plan", "run", "train",
]
