"""Compare state-only diffusion with joint state-control diffusion on Kuramoto.

``python3 demos/kuramoto_ablation.py [steps]``.  Both variants get the same
step budget and a matched parameter count; the linear-only readout of the
full model comes for free since it reuses the same weights.
"""
import sys
from dataclasses import replace

from sedc.dataset import generate, split_test
from sedc.dynamics import make_system
from sedc.evaluation import evaluate, run_cell
from sedc.pipeline import TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 800
spec = make_system("kuramoto", N=4, gamma=1.0)
train_ds, test_ds = split_test(generate(spec, 650, seed=0), 50)
base = TrainConfig(steps=steps, eval_every=100, gsf_rounds=1, finetune_steps=100)

rows = []
for variant in ("full", "no_dsd"):
    cell = run_cell(train_ds, test_ds, replace(base, variant=variant))
    rows.append((variant, cell.metrics))
    if variant == "full":
        lin = evaluate(replace(cell.controller, linear_only=True), test_ds, base.guidance, seed=12345)
        rows.append(("full, linear term only", lin))

print(f"{'model':24s} {'target loss':>12s} {'energy':>8s}")
for name, m in rows:
    print(f"{name:24s} {m.target_loss:12.3e} {m.energy:8.3f}")
