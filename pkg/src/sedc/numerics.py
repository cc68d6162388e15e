"""Differentiable array primitives, parameter storage and Adam.

Gradients come from ``torch.autograd``; everything here runs in float64 on
the CPU.  The functional primitives below are the only operations the
denoiser and inverse-dynamics networks are built from, so each of them is
covered by :func:`grad_check` in the test-suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float64


class ConfigError(ValueError):
    """Invalid hyperparameter or shape configuration."""


class GradCheckError(RuntimeError):
    pass


def as_tensor(x, dtype=DTYPE) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) seeded from a single 64-bit integer."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; used where work is split per item."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [make_rng(int(s)) for s in seeds]


def randn(rng: np.random.Generator, *shape: int) -> Tensor:
    return torch.from_numpy(rng.standard_normal(shape)).to(DTYPE)


# ---------------------------------------------------------------------------
# primitives


def mish(x: Tensor) -> Tensor:
    return x * torch.tanh(F.softplus(x))


def sinusoidal_embed(k, dim: int = 32) -> Tensor:
    """Interleaved sin/cos encoding of diffusion step(s) ``k``.

    Slot ``2i`` holds ``sin(k / 10000**(2i/dim))`` and slot ``2i+1`` the
    matching cosine.  Accepts a scalar or a 1-D batch of steps and returns
    shape ``(dim,)`` or ``(B, dim)``.
    """
    if dim % 2:
        raise ConfigError(f"embedding width must be even, got {dim}")
    k = as_tensor(k)
    scalar = k.ndim == 0
    k = k.reshape(-1, 1)
    freqs = 10000.0 ** (-torch.arange(0, dim, 2, dtype=DTYPE) / dim)
    ang = k * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(k.shape[0], dim)
    return out[0] if scalar else out


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    return F.linear(x, w, b)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Temporal convolution on (B, C, L) with length-preserving padding."""
    return F.conv1d(x, w, b, stride=stride, padding=w.shape[-1] // 2)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return F.group_norm(x, groups, gamma, beta, eps)


def downsample(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 convolution halving the time axis (length must be even)."""
    return conv1d(x, w, b, stride=2)


def upsample(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Nearest-neighbour doubling of the time axis followed by a convolution."""
    return conv1d(torch.repeat_interleave(x, 2, dim=-1), w, b)


def concat_channels(*xs: Tensor) -> Tensor:
    return torch.cat(xs, dim=1)


def batched_matvec(mat: Tensor, vec: Tensor) -> Tensor:
    """(..., P, Q) x (..., Q) -> (..., P)."""
    return torch.einsum("...pq,...q->...p", mat, vec)


def batched_bilinear(vec: Tensor, mat: Tensor) -> Tensor:
    """``v^T A_p v`` for every output index p: (..., Q), (..., Q, P, Q) -> (..., P)."""
    return torch.einsum("...i,...ipj,...j->...p", vec, mat, vec)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean()


def pad_time(x: Tensor, multiple: int) -> tuple[Tensor, int]:
    """Right-pad (B, C, L) by edge replication so L divides ``multiple``."""
    L = x.shape[-1]
    extra = (-L) % multiple
    if extra:
        x = torch.cat([x, x[..., -1:].expand(*x.shape[:-1], extra)], dim=-1)
    return x, L


def fan_in_uniform_(t: Tensor, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        t.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(t.shape))))
    return t


def init_module_(module: torch.nn.Module, rng: np.random.Generator) -> torch.nn.Module:
    """Fan-in scaled uniform init for every conv / linear weight and bias."""
    for mod in module.modules():
        if isinstance(mod, (torch.nn.Conv1d, torch.nn.Linear)):
            fan_in = mod.weight[0].numel()
            fan_in_uniform_(mod.weight, fan_in, rng)
            if mod.bias is not None:
                fan_in_uniform_(mod.bias, fan_in, rng)
    return module


# ---------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        if not self.decay_every:
            return self.lr
        return self.lr * self.decay_factor ** (step // self.decay_every)


@dataclass
class ParamStore:
    params: dict[str, Tensor]
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p))
            self.v.setdefault(name, torch.zeros_like(p))

    @classmethod
    def from_modules(cls, **modules: torch.nn.Module) -> "ParamStore":
        params = {}
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                params[f"{prefix}.{name}"] = p
        return cls(params)

    def grads(self, loss: Tensor) -> dict[str, Tensor]:
        names = list(self.params)
        gs = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        return {n: (torch.zeros_like(self.params[n]) if g is None else g) for n, g in zip(names, gs)}

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params.values())


def adam_step(store: ParamStore, grads: Mapping[str, Tensor], cfg: AdamConfig) -> ParamStore:
    """Bias-corrected Adam update applied in place; returns ``store``."""
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ConfigError(
                f"gradient for {name!r} has shape {tuple(g.shape)}, "
                f"parameter has {tuple(store.params[name].shape)}"
            )
    store.step += 1
    t = store.step
    lr = cfg.lr_at(t - 1)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            m = store.m[name].mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v = store.v[name].mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            store.params[name].sub_(lr * (m / c1) / (torch.sqrt(v / c2) + cfg.eps))
    return store


def clip_grads(grads: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


def grad_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    perturbation: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    For each parameter tensor the error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``
    over the checked entries; the maximum over tensors is returned.  With
    ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed.
    """
    if not 1e-6 <= perturbation <= 1e-4:
        raise ConfigError(f"perturbation {perturbation} outside [1e-6, 1e-4]")
    rng = rng or make_rng(0)
    loss = f()
    if not torch.isfinite(loss):
        raise GradCheckError("loss is not finite at the current parameters")
    analytic = store.grads(loss)
    worst = 0.0
    for name, p in store.params.items():
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        a = analytic[name].reshape(-1)[torch.as_tensor(idx)]
        num = torch.empty(len(idx), dtype=DTYPE)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + perturbation
                fp = f().item()
                flat[i] = orig - perturbation
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
                num[j] = (fp - fm) / (2 * perturbation)
        scale = max(a.abs().max().item(), num.abs().max().item(), 1e-8)
        worst = max(worst, (a - num).abs().max().item() / scale)
    return worst
