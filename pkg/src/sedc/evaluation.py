"""Metrics on executed rollouts, ablation runs, consistency and noise studies."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import TrajectoryDataset, inject_noise, subset
from .diffusion import Controller, GuidanceSpec, guided_sample
from .dynamics import simulate
from .numerics import ConfigError, make_rng
from .pipeline import ABLATION_VARIANTS, TrainConfig, plan, run

log = logging.getLogger(__name__)

FRACTIONS = (0.01, 0.05, 0.1, 0.2, 1.0)
NOISE_LEVELS = (0.0, 0.001, 0.01, 0.1)
RESULT_COLUMNS = ("system", "variant", "fraction", "sigma", "seed", "task", "target_loss", "energy", "seconds")


def target_loss(y_T, y_f):
    """Mean squared error over the state dimension; batched over leading axes."""
    y_T, y_f = np.asarray(y_T, dtype=float), np.asarray(y_f, dtype=float)
    if y_T.shape != y_f.shape:
        raise ValueError(f"state shapes differ: {y_T.shape} vs {y_f.shape}")
    return np.mean((y_T - y_f) ** 2, axis=-1)


def energy(controls, dt: float):
    """``sum_t |u_t|^2 dt`` over the last two axes (T, M)."""
    u = np.asarray(controls, dtype=float)
    return np.sum(u**2, axis=(-1, -2)) * dt


@dataclass
class Metrics:
    target_loss: float
    energy: float
    per_task_loss: np.ndarray
    per_task_energy: np.ndarray
    seconds: float  # wall-clock per task
    blowups: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target_loss < 0 or self.energy < 0:
            raise ValueError("metrics must be non-negative")

    def rows(self, **labels):
        return [{**labels, "task": i, "target_loss": float(l), "energy": float(e), "seconds": self.seconds}
                for i, (l, e) in enumerate(zip(self.per_task_loss, self.per_task_energy))]


def metrics_from_rollout(executed, controls, y_f, dt, seconds=0.0) -> Metrics:
    """Build metrics from simulator output (never from sampled states)."""
    tl = target_loss(executed[:, -1], y_f)
    tl = np.where(np.isfinite(tl), tl, np.inf)
    e = energy(controls, dt)
    return Metrics(float(np.mean(tl)), float(np.mean(e)), tl, e, seconds, int(np.sum(~np.isfinite(tl))))


def evaluate(ctrl: Controller, tasks: TrajectoryDataset, guidance: GuidanceSpec | None, seed: int = 0,
             batch: int = 50) -> Metrics:
    """Plan for every task in ``tasks`` (endpoints only are used) and score the executed rollouts."""
    rng = make_rng(seed)
    y0, yf = tasks.endpoints()
    ex, us, secs = [], [], 0.0
    for i in range(0, len(y0), batch):
        res = plan(ctrl, y0[i:i + batch], yf[i:i + batch], guidance, rng)
        ex.append(res.executed)
        us.append(res.controls)
        secs += res.seconds
    return metrics_from_rollout(np.concatenate(ex), np.concatenate(us), yf, ctrl.spec.dt, secs / len(y0))


# ---------------------------------------------------------------------------
# ablations


@dataclass
class CellResult:
    system: str
    variant: str
    fraction: float
    sigma: float
    seed: int
    metrics: Metrics
    manifest: dict
    rounds: list = field(default_factory=list)  # Metrics after each GSF round (index 0 = initial)

    def rows(self):
        return self.metrics.rows(system=self.system, variant=self.variant, fraction=self.fraction,
                                 sigma=self.sigma, seed=self.seed)


def run_cell(train_ds: TrajectoryDataset, test_ds: TrajectoryDataset, config: TrainConfig, *,
             fraction: float = 1.0, sigma: float = 0.0, eval_rounds: bool = False, eval_seed: int = 12345) -> CellResult:
    """Train one (variant, fraction, sigma, seed) cell and score it on the clean test tasks."""
    data = train_ds if fraction >= 1.0 else subset(train_ds, fraction, seed=0)
    if sigma > 0:
        data = inject_noise(data, sigma, seed=config.seed)
    rounds = []

    def hook(r, ctrl):
        if eval_rounds:
            rounds.append(evaluate(ctrl, test_ds, config.guidance, seed=eval_seed))

    try:
        ctrl, manifest, _ = run(data, config, on_round=hook)
    except Exception as exc:  # keep the variant context
        raise RuntimeError(f"variant {config.variant} on {train_ds.spec.system} failed: {exc}") from exc
    m = rounds[-1] if rounds else evaluate(ctrl, test_ds, config.guidance, seed=eval_seed)
    cell = CellResult(train_ds.spec.system, config.variant, fraction, sigma, config.seed, m, manifest.to_dict(), rounds)
    cell.controller = ctrl
    return cell


def run_ablation(variant: str, train_ds, test_ds, fraction: float, seeds, base: TrainConfig | None = None,
                 **kw) -> list[CellResult]:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if fraction not in FRACTIONS:
        raise ConfigError(f"fraction must be one of {FRACTIONS}")
    base = base or TrainConfig()
    return [run_cell(train_ds, test_ds, replace(base, variant=variant, seed=s), fraction=fraction, **kw)
            for s in seeds]


def summarize(cells: list[CellResult]) -> dict:
    """Mean and standard error of per-seed mean target loss and energy."""
    tl = np.array([c.metrics.target_loss for c in cells])
    en = np.array([c.metrics.energy for c in cells])
    se = lambda a: float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return {"target_loss": float(tl.mean()), "target_loss_se": se(tl), "energy": float(en.mean()),
            "energy_se": se(en), "seeds": [c.seed for c in cells]}


def noise_grid(train_ds, test_ds, sigmas, seeds, base: TrainConfig | None = None, variants=("full",)):
    bad = [s for s in sigmas if s not in NOISE_LEVELS]
    if bad:
        raise ConfigError(f"noise levels must come from {NOISE_LEVELS}, got {bad}")
    base = base or TrainConfig()
    out = []
    for v in variants:
        for s in sigmas:
            for seed in seeds:
                out.append(run_cell(train_ds, test_ds, replace(base, variant=v, seed=seed), sigma=s))
    return out


def write_results(path, cells: list[CellResult]) -> Path:
    """One row per (cell, task) plus a trailing summary row with the grand means."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r for c in cells for r in c.rows()]
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
        if rows:
            w.writerow({"system": rows[0]["system"], "variant": "summary", "task": "mean",
                        "target_loss": float(np.mean([r["target_loss"] for r in rows])),
                        "energy": float(np.mean([r["energy"] for r in rows])),
                        "seconds": float(np.mean([r["seconds"] for r in rows]))})
    return path


# ---------------------------------------------------------------------------
# state/control consistency


def consistency_report(ctrl: Controller, tasks: TrajectoryDataset, seed: int = 0, guidance=None):
    """Compare sampled states with the rollout of the recovered controls.

    Returns ``(rows, per_task_max)``; rows are dicts with one entry per
    (task, t, n) cell.
    """
    rng = make_rng(seed)
    y0, yf = tasks.endpoints()
    sampled, controls = guided_sample(ctrl.schedule, ctrl, y0, yf, guidance, rng)
    induced, _ = simulate(ctrl.spec, y0, controls)
    diff = np.abs(induced - sampled)
    rows = []
    P, L, N = diff.shape
    for i in range(P):
        for t in range(L):
            for n in range(N):
                rows.append({"task": i, "t": t, "dim": n, "induced": float(induced[i, t, n]),
                             "sampled": float(sampled[i, t, n]), "abs_diff": float(diff[i, t, n])})
    return rows, diff.reshape(P, -1).max(axis=1)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def transition_residual(ctrl: Controller, states, controls) -> np.ndarray:
    """Max normalised residual between the simulator step under ``controls`` and the sampled next state.

    Used for the rank-deficient check: a recovered control must realise the
    transition it was decoded from.
    """
    from .dynamics import step

    y = np.asarray(states)
    nxt = step(ctrl.spec, y[:, :-1], np.asarray(controls))
    std = ctrl.stats.state_std
    return np.max(np.abs(nxt - y[:, 1:]) / std, axis=(-1, -2))
