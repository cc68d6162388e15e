"""Initial training, guided self-finetuning rounds and control queries."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .checkpoint import tensor_hash
from .dataset import TrajectoryDataset, split_validation
from .denoiser import DenoiserConfig, build_denoiser, count_params, matched_base_width
from .diffusion import Controller, GuidanceSpec, build_schedule, guided_sample, training_loss, X0_CLIP
from .dynamics import simulate
from .invdyn import InvDynConfig, build_invdyn
from .numerics import AdamConfig, ConfigError, ParamStore, adam_step, as_tensor, make_rng

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "no_dsd", "no_dmd", "no_gsf", "linear_only")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class TrainConfig:
    variant: str = "full"
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay_at: float = 0.7  # fraction of ``steps`` after which lr *= 0.1
    K: int = 128
    schedule: str = "cosine"
    lam: float = 0.01
    guidance_clip: float = 10.0
    gsf_rounds: int = 2
    gsf_fraction: float = 0.1
    val_fraction: float = 0.05
    eval_every: int = 100
    patience: int = 5
    finetune_patience: int = 3
    finetune_tol: float = 1e-4
    finetune_steps: int = 1500
    finetune_lr: float = 1e-4
    base_width: int | None = None  # None: the state dimension
    cond_width: int | None = None
    invdyn_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {ABLATION_VARIANTS}")
        if self.batch_size < 1 or self.gsf_rounds < 0 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1, gsf_rounds >= 0")
        if self.base_width is not None and self.base_width < 1:
            raise ConfigError("base_width must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def guidance(self) -> GuidanceSpec:
        return GuidanceSpec(self.lam, "energy", self.guidance_clip)

    @property
    def rounds(self) -> int:
        return 0 if self.variant == "no_gsf" else self.gsf_rounds


@dataclass
class RunManifest:
    config: dict
    dataset_hash: str
    losses: list = field(default_factory=list)
    gsf: list = field(default_factory=list)
    decisions: dict = field(default_factory=lambda: {"x0_clip": X0_CLIP, "posterior_variance": "beta_tilde",
                                                     "guidance_clip": "per-sample norm"})
    checkpoint_hash: str | None = None
    seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# model construction


def build_controller(train: TrajectoryDataset, cfg: TrainConfig, rng: np.random.Generator) -> Controller:
    spec = train.spec
    N, M = spec.N, spec.M
    C = cfg.cond_width or N
    width = cfg.base_width or N
    dmd = DenoiserConfig("dmd", N, N, C, width)
    inv_cfg = InvDynConfig(N, M, cfg.invdyn_hidden)
    if cfg.variant in ("full", "no_gsf", "linear_only"):
        dcfg, use_inv = dmd, True
    elif cfg.variant == "no_dmd":
        target = count_params(build_denoiser(dmd, make_rng(0)))
        base = DenoiserConfig("single_unet", N, N, C, width)
        dcfg, use_inv = DenoiserConfig("single_unet", N, N, C, matched_base_width(base, target)), True
    else:  # no_dsd: joint state-control channels, budget matched to denoiser + invdyn
        target = count_params(build_denoiser(dmd, make_rng(0))) + count_params(build_invdyn(inv_cfg, make_rng(0)))
        base = DenoiserConfig("dmd", N, N + M, C, width)
        dcfg, use_inv = DenoiserConfig("dmd", N, N + M, C, matched_base_width(base, target)), False
    den = build_denoiser(dcfg, rng)
    inv = build_invdyn(inv_cfg, rng) if use_inv else None
    return Controller(spec, train.stats, den, inv, build_schedule(cfg.K, cfg.schedule),
                      linear_only=cfg.variant == "linear_only", x0_clip=x0_clip_for(train))


def x0_clip_for(ds: TrajectoryDataset) -> float:
    """The default clip of 3, widened when normalised data legitimately exceeds it."""
    z = max(np.abs(ds.stats.norm_states(ds.states)).max(), np.abs(ds.stats.norm_controls(ds.controls)).max())
    return float(max(X0_CLIP, 1.2 * z))


# ---------------------------------------------------------------------------
# optimisation loop


def _normalised(ctrl: Controller, ds: TrajectoryDataset):
    return as_tensor(ctrl.stats.norm_states(ds.states)), as_tensor(ctrl.stats.norm_controls(ds.controls))


def _val_terms(ctrl, ys, us, seed, batch=256):
    """Validation (diffusion term, invdyn term) under a fixed noise seed."""
    rng = make_rng(seed)
    dsum, vsum, n = 0.0, 0.0, 0
    with torch.no_grad():
        for i in range(0, ys.shape[0], batch):
            _, d, v = training_loss(ctrl, ys[i:i + batch], us[i:i + batch], rng)
            b = ys[i:i + batch].shape[0]
            dsum, vsum, n = dsum + d.item() * b, vsum + v.item() * b, n + b
    return dsum / n, vsum / n


def _fit(ctrl, train_ds, val_ds, rng, *, steps, batch_size, adam, eval_every, patience, tol, manifest, phase, val_seed):
    ys, us = _normalised(ctrl, train_ds)
    vys, vus = _normalised(ctrl, val_ds)
    store = ParamStore.from_modules(**ctrl.modules())
    P = ys.shape[0]
    vd, vi = _val_terms(ctrl, vys, vus, val_seed)
    best = vd + vi
    best_state = {k: v.detach().clone() for k, v in store.params.items()}
    manifest.losses.append({"phase": phase, "step": 0, "val": best, "val_diff": vd, "val_inv": vi})
    initial = None
    stale = 0
    for it in range(1, steps + 1):
        idx = rng.integers(0, P, size=min(batch_size, P))
        loss, d, v = training_loss(ctrl, ys[idx], us[idx], rng)
        if initial is None:
            initial = loss.item()
        if loss.item() > 1e3 * max(initial, 1e-8):
            raise TrainingDiverged(f"{phase}: loss {loss.item():.3g} exceeds 1e3 x initial {initial:.3g}", manifest)
        adam_step(store, store.grads(loss), adam)
        if it % eval_every == 0 or it == steps:
            vd, vi = _val_terms(ctrl, vys, vus, val_seed)
            val = vd + vi
            manifest.losses.append({"phase": phase, "step": it, "train": loss.item(), "diff": d.item(),
                                    "inv": v.item(), "val": val, "val_diff": vd, "val_inv": vi})
            if val < best * (1 - tol):
                best, stale = val, 0
                best_state = {k: p.detach().clone() for k, p in store.params.items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    with torch.no_grad():
        for k, p in store.params.items():
            p.copy_(best_state[k])
    return best, it


def train(dataset: TrajectoryDataset, config: TrainConfig, rng: np.random.Generator | None = None):
    """Joint denoiser + inverse-dynamics training on raw-unit ``dataset``.

    Returns ``(controller, manifest)``.  Normalisation statistics are fitted
    on ``dataset`` and stored in the controller.
    """
    t0 = time.perf_counter()
    rng = rng or make_rng(config.seed)
    manifest = RunManifest(config.to_dict(), dataset.content_hash())
    train_ds, val_ds = split_validation(dataset, config.val_fraction, config.seed)
    ctrl = build_controller(dataset, config, rng)
    manifest.decisions["x0_clip"] = ctrl.x0_clip
    if ctrl.invdyn is not None:
        ctrl.invdyn.set_delta_scale(ctrl.stats.norm_states(train_ds.states))
    adam = AdamConfig(lr=config.lr, decay_every=max(1, int(config.lr_decay_at * config.steps)))
    _fit(ctrl, train_ds, val_ds, rng, steps=config.steps, batch_size=config.batch_size, adam=adam,
         eval_every=config.eval_every, patience=config.patience, tol=0.0, manifest=manifest,
         phase="initial", val_seed=config.seed + 1)
    manifest.checkpoint_hash = tensor_hash(ctrl)
    manifest.seconds = time.perf_counter() - t0
    return ctrl, manifest


# ---------------------------------------------------------------------------
# control queries and GSF


@dataclass
class PlanResult:
    controls: np.ndarray  # (B, T, M) raw
    predicted: np.ndarray  # (B, T+1, N) sampled states, raw
    executed: np.ndarray  # (B, T+1, N) simulator rollout of ``controls``
    finite: np.ndarray  # (B,) rollout stayed finite
    seconds: float


def plan(ctrl: Controller, y0, yf, guidance: GuidanceSpec | None, rng: np.random.Generator) -> PlanResult:
    """Sample plans for a batch of tasks and execute them in the true simulator."""
    t0 = time.perf_counter()
    states, controls = guided_sample(ctrl.schedule, ctrl, y0, yf, guidance, rng)
    executed, ok = simulate(ctrl.spec, np.atleast_2d(y0), controls)
    return PlanResult(controls, states, executed, ok, time.perf_counter() - t0)


def control(ctrl: Controller, y0, yf, guidance: GuidanceSpec | None, rng: np.random.Generator):
    """Single control query; metrics are computed on the executed rollout."""
    from .evaluation import energy, target_loss

    res = plan(ctrl, np.asarray(y0)[None], np.asarray(yf)[None], guidance, rng)
    metrics = {"target_loss": float(target_loss(res.executed[0, -1], yf)),
               "energy": float(energy(res.controls[0], ctrl.spec.dt)), "seconds": res.seconds}
    return res.controls[0], res.predicted[0], res.executed[0], metrics


def gsf_round(ctrl: Controller, pool: TrajectoryDataset, config: TrainConfig, round_idx: int,
              rng: np.random.Generator, manifest: RunManifest):
    """One round: guided generation, simulator interaction, append, fine-tune.

    Returns ``(augmented pool, report)``; ``ctrl`` is updated in place.
    """
    t0 = time.perf_counter()
    n_gen = max(1, math.ceil(config.gsf_fraction * len(pool)))
    pick = rng.integers(0, len(pool), size=n_gen)
    y0, yf = pool.states[pick, 0], pool.states[pick, -1]
    res = plan(ctrl, y0, yf, config.guidance, rng)
    keep = res.finite
    tag = f"gsf_round_{round_idx}"
    new_pool = pool.append(res.executed[keep], res.controls[keep], tag)
    from .evaluation import energy, target_loss

    report = {
        "round": round_idx,
        "generated": int(n_gen),
        "dropped": int((~keep).sum()),
        "pool_size": len(new_pool),
        "gen_energy": float(np.mean(energy(res.controls[keep], ctrl.spec.dt))) if keep.any() else float("nan"),
        "gen_target_loss": float(np.mean(target_loss(res.executed[keep, -1], yf[keep]))) if keep.any() else float("nan"),
    }
    ctrl.stats = new_pool.stats
    train_ds, val_ds = split_validation(new_pool, config.val_fraction, config.seed + round_idx)
    best, steps = _fit(ctrl, train_ds, val_ds, rng, steps=config.finetune_steps, batch_size=config.batch_size,
                       adam=AdamConfig(lr=config.finetune_lr), eval_every=config.eval_every,
                       patience=config.finetune_patience, tol=config.finetune_tol, manifest=manifest,
                       phase=tag, val_seed=config.seed + 1 + round_idx)
    report.update(finetune_steps=steps, val_loss=best, seconds=time.perf_counter() - t0)
    manifest.gsf.append(report)
    return new_pool, report


def run(dataset: TrajectoryDataset, config: TrainConfig, on_round=None):
    """Initial training followed by ``config.rounds`` GSF rounds.

    ``on_round(r, ctrl)`` is called after training (r=0) and after every
    round, e.g. to record test metrics.  Returns ``(ctrl, manifest, pool)``.
    """
    rng = make_rng(config.seed)
    ctrl, manifest = train(dataset, config, rng)
    if on_round:
        on_round(0, ctrl)
    pool = dataset
    for r in range(1, config.rounds + 1):
        pool, _ = gsf_round(ctrl, pool, config, r, rng, manifest)
        if on_round:
            on_round(r, ctrl)
    manifest.checkpoint_hash = tensor_hash(ctrl)
    return ctrl, manifest, pool
