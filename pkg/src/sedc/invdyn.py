"""Autoregressive inverse dynamics: recover a control from a state pair.

One shared MLP predicts control dimension ``m`` from
``(y_t, scaled(y_{t+1} - y_t), u_{<m} zero-padded to M, onehot(m))``.
The mask on ``u`` zeroes slots ``>= m`` multiplicatively, so the output for
dimension ``m`` has a structurally zero gradient w.r.t. ``u_{m'}``,
``m' >= m``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, dense, init_module_, mse


@dataclass
class InvDynConfig:
    state_dim: int
    control_dim: int
    hidden: int = 64

    def to_dict(self):
        return asdict(self)


class InverseDynamics(nn.Module):
    def __init__(self, cfg: InvDynConfig):
        super().__init__()
        self.cfg = cfg
        N, M, H = cfg.state_dim, cfg.control_dim, cfg.hidden
        self.fc1 = nn.Linear(2 * N + 2 * M, H)
        self.fc2 = nn.Linear(H, H)
        self.fc3 = nn.Linear(H, 1)
        self.register_buffer("delta_scale", torch.ones(N, dtype=DTYPE))
        self.register_buffer("mask", torch.tril(torch.ones(M, M, dtype=DTYPE), diagonal=-1))
        self.register_buffer("onehot", torch.eye(M, dtype=DTYPE))

    def set_delta_scale(self, states: np.ndarray) -> None:
        """Scale state increments to unit spread, from (P, T+1, N) normalised states."""
        d = np.diff(states, axis=1).reshape(-1, states.shape[-1])
        self.delta_scale.copy_(torch.as_tensor(1.0 / np.maximum(d.std(0), 1e-6)))

    def _features(self, y, y_next):
        return torch.cat([y, (y_next - y) * self.delta_scale], dim=-1)

    def _mlp(self, h):
        h = torch.relu(dense(h, self.fc1.weight, self.fc1.bias))
        h = torch.relu(dense(h, self.fc2.weight, self.fc2.bias))
        return dense(h, self.fc3.weight, self.fc3.bias)[..., 0]

    def teacher_forced(self, y, y_next, u):
        """All M outputs at once using ground-truth ``u_{<m}``; shapes (..., N), (..., M)."""
        M = self.cfg.control_dim
        feat = self._features(y, y_next)
        lead = feat.shape[:-1]
        masked = u[..., None, :] * self.mask  # (..., M, M): row m keeps u_{<m}
        inp = torch.cat([feat[..., None, :].expand(*lead, M, feat.shape[-1]), masked,
                         self.onehot.expand(*lead, M, M)], dim=-1)
        return self._mlp(inp)

    def forward(self, y, y_next):
        """Greedy autoregressive decoding; differentiable in both states."""
        M = self.cfg.control_dim
        feat = self._features(y, y_next)
        lead = feat.shape[:-1]
        outs = []
        prev = torch.zeros(*lead, M, dtype=feat.dtype)
        for m in range(M):
            inp = torch.cat([feat, prev * self.mask[m], self.onehot[m].expand(*lead, M)], dim=-1)
            um = self._mlp(inp)
            outs.append(um)
            if m + 1 < M:
                prev = torch.cat([torch.stack(outs, dim=-1), prev[..., m + 1:]], dim=-1)
        return torch.stack(outs, dim=-1)

    predict_control = forward


def build_invdyn(cfg: InvDynConfig, rng: np.random.Generator) -> InverseDynamics:
    model = InverseDynamics(cfg).to(DTYPE)
    return init_module_(model, rng)


def invdyn_loss(model: InverseDynamics, y, u, y_next) -> torch.Tensor:
    """Teacher-forced MSE over control dimensions and the batch of transitions."""
    return mse(model.teacher_forced(y, y_next, u), u)
