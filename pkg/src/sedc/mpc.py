"""Data-driven MPC baseline: learned residual forward model + cross-entropy planning."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import TrajectoryDataset
from .dynamics import SystemSpec, simulate, step
from .numerics import DTYPE, AdamConfig, ConfigError, ParamStore, adam_step, as_tensor, init_module_, make_rng, mse


class ForwardModelDiverged(RuntimeError):
    pass


@dataclass
class MPCConfig:
    hidden: int = 128
    blocks: int = 2
    train_steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    horizon: int = 16  # cap; the effective horizon is min(horizon, remaining steps)
    iterations: int = 5
    candidates: int = 64
    elite_fraction: float = 0.1
    init_std: float = 1.0  # in units of the data's control std
    target_weight: float = 1.0
    energy_weight: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.candidates < 1 or self.iterations < 1:
            raise ConfigError("horizon, candidates and iterations must be >= 1")
        if not 0 < self.elite_fraction <= 1:
            raise ConfigError("elite_fraction must be in (0, 1]")


class ResidualMLP(nn.Module):
    """``y_next = y + g(y, u)`` with ``g`` a residual MLP, all in normalised units."""

    def __init__(self, N, M, hidden=128, blocks=2):
        super().__init__()
        self.inp = nn.Linear(N + M, hidden)
        self.blocks = nn.ModuleList(nn.Linear(hidden, hidden) for _ in range(blocks))
        self.out = nn.Linear(hidden, N)

    def forward(self, y, u):
        h = torch.relu(self.inp(torch.cat([y, u], dim=-1)))
        for b in self.blocks:
            h = h + torch.relu(b(h))
        return y + self.out(h)


class LearnedModel:
    """Raw-unit wrapper around a trained :class:`ResidualMLP`."""

    def __init__(self, net: ResidualMLP, stats):
        self.net, self.stats = net, stats

    def __call__(self, y, u):
        with torch.no_grad():
            yn = as_tensor(self.stats.norm_states(y))
            un = as_tensor(self.stats.norm_controls(u))
            return self.stats.denorm_states(self.net(yn, un).numpy())


def true_model(spec: SystemSpec):
    """Exact one-step model (for sanity checks)."""
    return lambda y, u: step(spec, y, u)


def fit_forward_model(ds: TrajectoryDataset, cfg: MPCConfig) -> LearnedModel:
    rng = make_rng(cfg.seed)
    N, M = ds.spec.N, ds.spec.M
    st = ds.stats
    y = as_tensor(st.norm_states(ds.states[:, :-1]).reshape(-1, N))
    yn = as_tensor(st.norm_states(ds.states[:, 1:]).reshape(-1, N))
    u = as_tensor(st.norm_controls(ds.controls).reshape(-1, M))
    net = init_module_(ResidualMLP(N, M, cfg.hidden, cfg.blocks).to(DTYPE), rng)
    store = ParamStore.from_modules(fwd=net)
    adam = AdamConfig(lr=cfg.lr, decay_every=max(1, int(0.7 * cfg.train_steps)))
    first = None
    for _ in range(cfg.train_steps):
        idx = rng.integers(0, y.shape[0], size=min(cfg.batch_size, y.shape[0]))
        loss = mse(net(y[idx], u[idx]), yn[idx])
        if first is None:
            first = loss.item()
        if not np.isfinite(loss.item()) or loss.item() > 1e3 * max(first, 1e-8):
            raise ForwardModelDiverged(f"forward-model loss {loss.item():.3g} (initial {first:.3g})")
        adam_step(store, store.grads(loss), adam)
    return LearnedModel(net, st)


def cem_refit(candidates, scores, elite_fraction):
    """Mean and std of the lowest-scoring fraction; candidates (..., S, H, M), scores (..., S)."""
    S = candidates.shape[-3]
    n_elite = max(1, int(round(elite_fraction * S)))
    order = np.argsort(scores, axis=-1)[..., :n_elite]
    elite = np.take_along_axis(candidates, order[..., None, None], axis=-3)
    return elite.mean(axis=-3), elite.std(axis=-3)


def plan_cem(model, y, yf, horizon, cfg: MPCConfig, mean, std, rng, dt):
    """One CEM solve for a batch of tasks. Returns the refined mean (B, H, M)."""
    B, M = mean.shape[0], mean.shape[-1]
    S = cfg.candidates
    for _ in range(cfg.iterations):
        cand = mean[:, None] + std[:, None] * rng.standard_normal((B, S, horizon, M))
        cand[:, 0] = mean  # keep the incumbent
        state = np.repeat(y[:, None], S, axis=1)
        for h in range(horizon):
            state = model(state, cand[:, :, h])
        bad = ~np.all(np.isfinite(state), axis=-1)
        score = cfg.target_weight * np.mean((state - yf[:, None]) ** 2, axis=-1)
        score = score + cfg.energy_weight * np.sum(cand**2, axis=(-1, -2)) * dt
        score = np.where(bad, np.inf, score)
        mean, std = cem_refit(cand, score, cfg.elite_fraction)
    return mean


def mpc_control(model, spec: SystemSpec, y0, yf, cfg: MPCConfig, control_std, rng=None):
    """Receding-horizon control of a batch of tasks in the true simulator.

    Returns ``(controls (B, T, M), executed states (B, T+1, N), seconds per task)``.
    """
    rng = rng or make_rng(cfg.seed)
    y0, yf = np.atleast_2d(y0), np.atleast_2d(yf)
    B, T, M = y0.shape[0], spec.T, spec.M
    t0 = time.perf_counter()
    y = y0.copy()
    controls = np.zeros((B, T, M))
    std0 = cfg.init_std * np.broadcast_to(control_std, (M,))
    mean = np.zeros((B, min(cfg.horizon, T), M))
    for t in range(T):
        H = min(cfg.horizon, T - t)
        mean = mean[:, :H]
        mean = plan_cem(model, y, yf, H, cfg, mean, np.broadcast_to(std0, mean.shape).copy(), rng, spec.dt)
        controls[:, t] = mean[:, 0]
        y = step(spec, y, controls[:, t])
        # warm start: shift the plan by one step
        mean = np.concatenate([mean[:, 1:], mean[:, -1:]], axis=1)
    executed, _ = simulate(spec, y0, controls)
    return controls, executed, (time.perf_counter() - t0) / B


def mpc_baseline(cfg: MPCConfig, dataset: TrajectoryDataset, tasks: TrajectoryDataset, model=None):
    """Fit (unless ``model`` is given) and run MPC on every task; returns Metrics."""
    from .evaluation import metrics_from_rollout

    if model is None:
        model = fit_forward_model(dataset, cfg)
    y0, yf = tasks.endpoints()
    controls, executed, secs = mpc_control(model, dataset.spec, y0, yf, cfg, dataset.stats.control_std)
    return metrics_from_rollout(executed, controls, yf, dataset.spec.dt, secs)
