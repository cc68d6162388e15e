"""x0-parameterised DDPM with cost guidance and endpoint inpainting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import NormStats
from .dynamics import SystemSpec
from .invdyn import InverseDynamics, invdyn_loss
from .numerics import DTYPE, ConfigError, as_tensor, mse, randn

log = logging.getLogger(__name__)

X0_CLIP = 3.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by ``k - 1`` for diffusion step ``k`` in ``1..K``."""

    K: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    post_var: np.ndarray

    def coef_x0(self, k: int) -> float:
        i = k - 1
        return math.sqrt(self.alpha_bar_prev[i]) * self.betas[i] / (1.0 - self.alpha_bar[i])

    def coef_xk(self, k: int) -> float:
        i = k - 1
        return math.sqrt(self.alphas[i]) * (1.0 - self.alpha_bar_prev[i]) / (1.0 - self.alpha_bar[i])

    def sigma2(self, k: int) -> float:
        return float(self.post_var[k - 1])


def _from_betas(K, kind, betas) -> DiffusionSchedule:
    alphas = 1.0 - betas
    abar = np.cumprod(alphas)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    post = betas * (1.0 - abar_prev) / (1.0 - abar)
    return DiffusionSchedule(K, kind, betas, alphas, abar, abar_prev, post)


def build_schedule(K: int = 128, kind: str = "cosine") -> DiffusionSchedule:
    if K < 2:
        raise ConfigError(f"need at least 2 diffusion steps, got {K}")
    if kind == "cosine":
        s = 0.008
        k = np.arange(K + 1) / K
        f = np.cos((k + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    elif kind == "linear":
        # endpoints 1e-4 .. 2e-2 are the K=1000 values; rescale so the chain still reaches noise
        scale = 1000.0 / K
        betas = np.clip(np.linspace(1e-4 * scale, 2e-2 * scale, K), 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return _from_betas(K, kind, betas)


def forward_noise(schedule: DiffusionSchedule, x0, k, eps):
    """``sqrt(abar_k) x0 + sqrt(1 - abar_k) eps``; ``k`` scalar or one per batch row."""
    x0 = as_tensor(x0)
    eps = as_tensor(eps)
    if eps.shape != x0.shape:
        raise ConfigError("noise must match the clean tensor's shape")
    abar = as_tensor(schedule.alpha_bar[np.asarray(k) - 1])
    abar = abar.reshape(abar.shape + (1,) * (x0.ndim - abar.ndim))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


@dataclass
class GuidanceSpec:
    lam: float = 0.01
    cost: str = "energy"
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("guidance strength must be non-negative")
        if self.cost != "energy":
            raise ConfigError(f"unsupported guidance cost {self.cost!r}")


@dataclass
class Controller:
    """Everything needed to plan for one system.

    With ``invdyn`` set the diffusion runs over states only and controls are
    recovered from consecutive state pairs.  With ``invdyn=None`` the channel
    layout is ``[states (N), controls (M)]`` with the control slot at index
    ``T`` zero-padded (joint state-control diffusion).
    """

    spec: SystemSpec
    stats: NormStats
    denoiser: torch.nn.Module
    invdyn: InverseDynamics | None
    schedule: DiffusionSchedule
    linear_only: bool = False
    x0_clip: float = X0_CLIP

    @property
    def joint(self) -> bool:
        return self.invdyn is None

    @property
    def channels(self) -> int:
        return self.spec.N + (self.spec.M if self.joint else 0)

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"denoiser": self.denoiser}
        if self.invdyn is not None:
            mods["invdyn"] = self.invdyn
        return mods

    def x0(self, x, k, y0, yf):
        out = self.denoiser(x, k, y0, yf, linear_only=self.linear_only)
        return out

    def controls_from(self, x):
        """Normalised controls (B, T, M) implied by a normalised trajectory."""
        N = self.spec.N
        if self.joint:
            return x[:, :-1, N:]
        return self.invdyn(x[:, :-1, :N], x[:, 1:, :N])

    def energy(self, x):
        """Per-sample energy ``sum_t |u_t|^2 dt`` in raw units; differentiable."""
        u = self.controls_from(x)
        u_raw = u * as_tensor(self.stats.control_std) + as_tensor(self.stats.control_mean)
        return (u_raw**2).sum(dim=(-1, -2)) * self.spec.dt

    def norm_states(self, y):
        return as_tensor(self.stats.norm_states(y))

    def pack(self, states_n, controls_n=None):
        """Stack normalised states (and controls for joint models) into x0."""
        if not self.joint:
            return states_n
        B, L, _ = states_n.shape
        pad = torch.zeros(B, 1, self.spec.M, dtype=DTYPE)
        return torch.cat([states_n, torch.cat([controls_n, pad], dim=1)], dim=-1)


def training_loss(ctrl: Controller, states_n, controls_n, rng: np.random.Generator):
    """Joint objective: x0 reconstruction plus teacher-forced inverse dynamics.

    Returns ``(total, diffusion_term, invdyn_term)``.
    """
    states_n = as_tensor(states_n)
    controls_n = as_tensor(controls_n)
    B = states_n.shape[0]
    K = ctrl.schedule.K
    N = ctrl.spec.N
    x0 = ctrl.pack(states_n, controls_n)
    y0, yf = states_n[:, 0, :N], states_n[:, -1, :N]
    k = rng.integers(1, K + 1, size=B)
    eps = randn(rng, *x0.shape)
    # endpoints are clean at sampling time, so they are clean here too
    xk = inpaint(forward_noise(ctrl.schedule, x0, k, eps), y0, yf, N)
    xhat = inpaint(ctrl.x0(xk, as_tensor(k), y0, yf), y0, yf, N)
    diff = mse(xhat, x0)
    if not torch.isfinite(diff):
        raise FloatingPointError("diffusion reconstruction term is not finite")
    if ctrl.joint:
        inv = torch.zeros((), dtype=DTYPE)
    else:
        inv = invdyn_loss(ctrl.invdyn, states_n[:, :-1], controls_n, states_n[:, 1:])
        if not torch.isfinite(inv):
            raise FloatingPointError("inverse-dynamics term is not finite")
    return diff + inv, diff, inv


def guided_posterior_mean(schedule: DiffusionSchedule, ctrl: Controller, xk, k: int, y0, yf,
                          guidance: GuidanceSpec | None = None):
    """Posterior mean of ``x^{k-1}`` shifted by ``-lam * Sigma_k * grad J``.

    ``y0``/``yf`` are normalised conditions.  Returns ``(mean, x0_hat)``.
    """
    lam = 0.0 if guidance is None else guidance.lam
    sig = schedule.sigma2(k)
    guide = lam > 0 and sig > 0
    xk = as_tensor(xk).detach().requires_grad_(guide)
    with torch.set_grad_enabled(guide):
        xhat = ctrl.x0(xk, k, y0, yf).clamp(-ctrl.x0_clip, ctrl.x0_clip)
        mean = schedule.coef_x0(k) * xhat.detach() + schedule.coef_xk(k) * xk.detach()
        if guide:
            J = ctrl.energy(xhat).sum()
            (g,) = torch.autograd.grad(J, xk, allow_unused=True)
            if g is None:  # denoiser output does not depend on x^k
                g = torch.zeros_like(xk)
            if not torch.all(torch.isfinite(g)):
                log.warning("non-finite guidance gradient at k=%d; skipping guidance", k)
            else:
                norms = g.flatten(1).norm(dim=1).clamp_min(1e-12)
                g = g * (guidance.clip_norm / norms).clamp(max=1.0).reshape(-1, *([1] * (g.ndim - 1)))
                mean = mean - lam * sig * g
    return mean.detach(), xhat.detach()


def inpaint(x, y0, yf, N: int):
    x = x.clone()
    x[:, 0, :N] = y0
    x[:, -1, :N] = yf
    return x


def guided_sample(schedule: DiffusionSchedule, ctrl: Controller, y0, yf, guidance: GuidanceSpec | None,
                  rng: np.random.Generator, zero_noise: bool = False, trace: list | None = None):
    """Reverse chain with endpoint inpainting; inputs and outputs in raw units.

    Returns ``(states (B, T+1, N), controls (B, T, M))``.  ``trace``, if
    given, receives every intermediate ``x^{k-1}`` (normalised).
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    yf = np.atleast_2d(np.asarray(yf, dtype=float))
    N, T = ctrl.spec.N, ctrl.spec.T
    B = y0.shape[0]
    y0n, yfn = ctrl.norm_states(y0), ctrl.norm_states(yf)
    x = inpaint(randn(rng, B, T + 1, ctrl.channels), y0n, yfn, N)
    for k in range(schedule.K, 0, -1):
        mean, _ = guided_posterior_mean(schedule, ctrl, x, k, y0n, yfn, guidance)
        if k > 1 and not zero_noise:
            x = mean + math.sqrt(schedule.sigma2(k)) * randn(rng, *mean.shape)
        else:
            x = mean
        x = inpaint(x, y0n, yfn, N)
        if trace is not None:
            trace.append(x)
    with torch.no_grad():
        u_n = ctrl.controls_from(x).numpy()
    states = ctrl.stats.denorm_states(x[..., :N].numpy())
    states[:, 0] = y0
    states[:, -1] = yf
    return states, ctrl.stats.denorm_controls(u_n)
