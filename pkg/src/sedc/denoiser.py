"""Clean-trajectory predictors.

``DMDDenoiser`` splits the prediction into a part linear in the condition
vector ``y_c`` and a part quadratic in it::

    C1 = UNet1(x, k)            O1[b, t] = C1[b, t] (D x C)  @ y_c
    C2 = UNet2([x, C1], k)      O2[b, t, p] = y_c^T C2[b, t, :, p, :] y_c

``y_c`` is a bias-free linear map of ``[y0; yf]`` so ``y0 = yf = 0`` forces
a zero prediction.  ``SingleUNetDenoiser`` is the conventional baseline in
which ``y_c`` is projected and added to the step embedding.

Trajectories enter as ``(B, L, D)`` with ``L = T + 1``; the U-Nets work on
``(B, channels, L')`` where ``L'`` is ``L`` right-padded to a multiple of 4.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .numerics import (
    DTYPE,
    ConfigError,
    as_tensor,
    batched_bilinear,
    batched_matvec,
    concat_channels,
    conv1d,
    downsample,
    group_norm,
    init_module_,
    mish,
    pad_time,
    sinusoidal_embed,
    upsample,
)

VARIANTS = ("dmd", "single_unet", "dmd_linear_only")


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class Conv(nn.Conv1d):
    def forward(self, x):
        return conv1d(x, self.weight, self.bias)


class Norm(nn.GroupNorm):
    def forward(self, x):
        return group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class Down(nn.Conv1d):
    def __init__(self, ch):
        super().__init__(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return downsample(x, self.weight, self.bias)


class Up(nn.Conv1d):
    def __init__(self, ch):
        super().__init__(ch, ch, 3, padding=1)

    def forward(self, x):
        return upsample(x, self.weight, self.bias)


class ConvBlock(nn.Module):
    """conv -> group norm -> Mish."""

    def __init__(self, cin, cout, kernel=5):
        super().__init__()
        self.conv = Conv(cin, cout, kernel, padding=kernel // 2)
        self.norm = Norm(_groups(cout), cout)

    def forward(self, x):
        return mish(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, kernel=5):
        super().__init__()
        self.block1 = ConvBlock(cin, cout, kernel)
        self.block2 = ConvBlock(cout, cout, kernel)
        self.emb = nn.Linear(emb_dim, cout)
        self.skip = Conv(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.block1(x) + self.emb(mish(emb))[:, :, None]
        return self.block2(h) + self.skip(x)


class TemporalUNet(nn.Module):
    """Three-resolution temporal U-Net; each level holds two residual blocks
    on the way down and two on the way up."""

    def __init__(self, cin, cout, base, mults=(1, 2, 4), emb_dim=32, kernel=5):
        super().__init__()
        dims = [base * m for m in mults]
        self.downs = nn.ModuleList()
        prev = cin
        for i, d in enumerate(dims):
            self.downs.append(nn.ModuleList([
                ResidualBlock(prev, d, emb_dim, kernel),
                ResidualBlock(d, d, emb_dim, kernel),
                Down(d) if i < len(dims) - 1 else nn.Identity(),
            ]))
            prev = d
        self.mid = nn.ModuleList([ResidualBlock(prev, prev, emb_dim, kernel), ResidualBlock(prev, prev, emb_dim, kernel)])
        self.ups = nn.ModuleList()
        for i in reversed(range(len(dims))):
            d = dims[i]
            nxt = dims[i - 1] if i > 0 else d
            self.ups.append(nn.ModuleList([
                ResidualBlock(2 * d, d, emb_dim, kernel),
                ResidualBlock(d, nxt, emb_dim, kernel),
                Up(nxt) if i > 0 else nn.Identity(),
            ]))
        self.final = ConvBlock(dims[0], dims[0], kernel)
        self.out = Conv(dims[0], cout, 1)
        self.factor = 2 ** (len(dims) - 1)

    def forward(self, x, emb):
        skips = []
        h = x
        for r1, r2, down in self.downs:
            h = r2(r1(h, emb), emb)
            skips.append(h)
            h = down(h)
        for r in self.mid:
            h = r(h, emb)
        for r1, r2, up in self.ups:
            h = concat_channels(h, skips.pop())
            h = up(r2(r1(h, emb), emb))
        return self.out(self.final(h))


class StepEmbedding(nn.Module):
    """Sinusoidal encoding of the diffusion step followed by a 2-layer MLP."""

    def __init__(self, dim=32, hidden=64):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, k, batch):
        k = as_tensor(k)
        if k.ndim == 0:
            k = k.expand(batch)
        return self.fc2(mish(self.fc1(sinusoidal_embed(k, self.dim))))


@dataclass
class DenoiserConfig:
    variant: str = "dmd"
    state_dim: int = 2  # N: width of y0 / yf
    channels: int = 2  # D: trajectory channels (N, or N + M for joint diffusion)
    cond_width: int | None = None  # C; defaults to state_dim
    base_width: int = 16
    mults: tuple = (1, 2, 4)
    emb_dim: int = 32
    kernel: int = 5
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown denoiser variant {self.variant!r}")
        if self.cond_width is None:
            self.cond_width = self.state_dim
        self.mults = tuple(self.mults)

    def to_dict(self):
        return asdict(self)


class ConditionEncoder(nn.Module):
    """y_c = W [y0; yf], with no bias term."""

    def __init__(self, state_dim, width):
        super().__init__()
        self.linear = nn.Linear(2 * state_dim, width, bias=False)

    def forward(self, y0, yf):
        return self.linear(torch.cat([y0, yf], dim=-1))


class _Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg

    def _prep(self, x, y0, yf):
        B, L, D = x.shape
        if D != self.cfg.channels or y0.shape != (B, self.cfg.state_dim) or yf.shape != y0.shape:
            raise ConfigError(
                f"denoiser expects x (B, L, {self.cfg.channels}) and conditions (B, {self.cfg.state_dim}); "
                f"got {tuple(x.shape)}, {tuple(y0.shape)}, {tuple(yf.shape)}"
            )
        xp, _ = pad_time(x.transpose(1, 2), 4)
        return xp, L

    def encode_condition(self, y0, yf):
        return self.cond(y0, yf)


class DMDDenoiser(_Denoiser):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__(cfg)
        D, C = cfg.channels, cfg.cond_width
        self.cond = ConditionEncoder(cfg.state_dim, C)
        self.embed = StepEmbedding(cfg.emb_dim)
        self.unet1 = TemporalUNet(D, D * C, cfg.base_width, cfg.mults, cfg.emb_dim, cfg.kernel)
        self.unet2 = TemporalUNet(D + D * C, C * D * C, cfg.base_width, cfg.mults, cfg.emb_dim, cfg.kernel)
        self.linear_only = cfg.variant == "dmd_linear_only"

    def components(self, x, k, y0, yf):
        """Return ``(O1, O2)``, each ``(B, L, D)``."""
        xp, L = self._prep(x, y0, yf)
        B, D, C = x.shape[0], self.cfg.channels, self.cfg.cond_width
        emb = self.embed(k, B)
        yc = self.cond(y0, yf)[:, None, :]  # (B, 1, C)
        c1 = self.unet1(xp, emb)
        c2 = self.unet2(concat_channels(xp, c1), emb)
        c1 = c1[..., :L].transpose(1, 2).reshape(B, L, D, C)
        c2 = c2[..., :L].transpose(1, 2).reshape(B, L, C, D, C)
        o1 = batched_matvec(c1, yc.expand(B, L, C))
        o2 = batched_bilinear(yc.expand(B, L, C), c2)
        return o1, o2

    def forward(self, x, k, y0, yf, linear_only: bool | None = None):
        o1, o2 = self.components(x, k, y0, yf)
        lin = self.linear_only if linear_only is None else linear_only
        return o1 if lin else o1 + o2


class SingleUNetDenoiser(_Denoiser):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__(cfg)
        self.cond = ConditionEncoder(cfg.state_dim, cfg.cond_width)
        self.cond_proj = nn.Linear(cfg.cond_width, cfg.emb_dim)
        self.embed = StepEmbedding(cfg.emb_dim)
        self.unet = TemporalUNet(cfg.channels, cfg.channels, cfg.base_width, cfg.mults, cfg.emb_dim, cfg.kernel)

    def forward(self, x, k, y0, yf, linear_only=None):
        xp, L = self._prep(x, y0, yf)
        emb = self.embed(k, x.shape[0]) + self.cond_proj(self.cond(y0, yf))
        return self.unet(xp, emb)[..., :L].transpose(1, 2)


def build_denoiser(cfg: DenoiserConfig, rng: np.random.Generator) -> _Denoiser:
    """Construct and initialise a denoiser (fan-in uniform, zero output convs)."""
    model = (SingleUNetDenoiser if cfg.variant == "single_unet" else DMDDenoiser)(cfg).to(DTYPE)
    init_module_(model, rng)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, TemporalUNet):
                mod.out.weight.zero_()
                mod.out.bias.zero_()
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def matched_base_width(cfg: DenoiserConfig, target: int, widths=range(2, 129)) -> int:
    """Base width whose parameter count is closest (in ratio) to ``target``."""
    best, best_err = None, np.inf
    for w in widths:
        c = DenoiserConfig(**{**cfg.to_dict(), "base_width": w})
        n = count_params((SingleUNetDenoiser if c.variant == "single_unet" else DMDDenoiser)(c))
        err = abs(np.log(n / target))
        if err < best_err:
            best, best_err = w, err
        elif n > target:
            break
    return best
