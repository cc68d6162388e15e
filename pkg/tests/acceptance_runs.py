"""Shared, memoised training runs for the acceptance suite.

Several criteria read the same trained model (the pendulum run feeds the
end-to-end, GSF and MPC checks; the Kuramoto N=4 run feeds four criteria),
so every run is computed once per session.
"""
from __future__ import annotations

import os
import time
from dataclasses import replace
from functools import lru_cache

from sedc.dataset import generate, split_test
from sedc.dynamics import make_system
from sedc.evaluation import evaluate, run_cell
from sedc.pipeline import TrainConfig

N_DATA = 2000
N_TEST = 50
DATA_SEED = 0
EVAL_SEED = 12345
# invdyn-only example: steps and lr (decay x0.1 at 70%)
INVDYN_STEPS = 96000
INVDYN_LR = 5e-3

# per-system training budgets (lr 1e-3, batch 32, K 128; base width = N unless set)
BUDGET = {
    "inverted_pendulum": dict(steps=5000, base_width=8, gsf_rounds=2, finetune_steps=600, eval_every=250),
    "kuramoto": dict(steps=6000, gsf_rounds=2, finetune_steps=600, eval_every=250),
    "rank_deficient_linear": dict(steps=2000, gsf_rounds=1, finetune_steps=400, eval_every=250),
    "non_affine_mimo": dict(steps=2000, gsf_rounds=1, finetune_steps=400, eval_every=250),
}
# reduced budgets for the multi-seed grids
GRID_BUDGET = {
    "inverted_pendulum": dict(steps=2000, gsf_rounds=1, finetune_steps=300),
    "kuramoto": dict(steps=3000, gsf_rounds=1, finetune_steps=300),
}

SYSTEM_KW = {
    "inverted_pendulum": {},
    "kuramoto": {"N": 4, "gamma": 1.0},
}


# SEDC_ACCEPT_SMOKE=1 shrinks every budget to exercise the plumbing only
SMOKE = os.environ.get("SEDC_ACCEPT_SMOKE") == "1"
if SMOKE:
    N_DATA = 200


def config(system: str, grid: bool = False, **kw) -> TrainConfig:
    base = dict(BUDGET[system], patience=1000)
    if grid:
        base.update(GRID_BUDGET.get(system, {}))
    base.update(kw)
    if SMOKE:
        base.update(steps=20, finetune_steps=10, eval_every=10, K=8)
    return TrainConfig(**base)


def _canon(system, skw):
    return tuple(sorted({**SYSTEM_KW.get(system, {}), **dict(skw)}.items()))


def data(system: str, **skw):
    return _data(system, _canon(system, skw))


@lru_cache(maxsize=None)
def _data(system, skw):
    ds = generate(make_system(system, **dict(skw)), N_DATA + N_TEST, seed=DATA_SEED)
    return split_test(ds, N_TEST)


def cell(system: str, skw=(), fraction: float = 1.0, sigma: float = 0.0, grid: bool = False,
         variant: str = "full", seed: int = 0, eval_rounds: bool = True):
    """One trained cell; ``rounds`` holds test metrics after training and after every GSF round."""
    return _cell(system, _canon(system, skw), fraction, sigma, grid, variant, seed, eval_rounds)


@lru_cache(maxsize=None)
def _cell(system, skw, fraction, sigma, grid, variant, seed, eval_rounds):
    train_ds, test_ds = _data(system, skw)
    cfg = config(system, grid=grid, variant=variant, seed=seed)
    t0 = time.perf_counter()
    res = run_cell(train_ds, test_ds, cfg, fraction=fraction, sigma=sigma,
                   eval_rounds=eval_rounds and variant == "full", eval_seed=EVAL_SEED)
    res.wall = time.perf_counter() - t0
    res.test_ds, res.config = test_ds, cfg
    return res


def linear_only_metrics(res):
    """Test metrics of the same trained weights with only the linear output term."""
    ctrl = replace(res.controller, linear_only=True)
    return evaluate(ctrl, res.test_ds, res.config.guidance, seed=EVAL_SEED)


def mpc_config():
    from sedc.mpc import MPCConfig

    return MPCConfig(train_steps=20, iterations=1, candidates=8) if SMOKE else MPCConfig()
