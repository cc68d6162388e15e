"""Walk through one control query on the inverted pendulum.

Run with ``python3 demos/pendulum_walkthrough.py``.  The budget is small so
the script finishes in a few minutes on one core; expect rough controls.
Raise ``STEPS`` for a better model.
"""
import numpy as np

from sedc.dataset import generate, split_test
from sedc.dynamics import make_system
from sedc.evaluation import consistency_report, evaluate
from sedc.numerics import make_rng
from sedc.pipeline import TrainConfig, control, run

STEPS = 600

spec = make_system("inverted_pendulum")
print(f"system: N={spec.N} states, M={spec.M} control, T={spec.T} steps of {spec.dt}s")

# 1. simulate random-control trajectories and hold out 50 tasks
data = generate(spec, 450, seed=0)
train_ds, test_ds = split_test(data, 50)
print(f"train {len(train_ds)} trajectories, test {len(test_ds)} tasks")

# 2. train the state denoiser and the inverse dynamics jointly, then one GSF round
cfg = TrainConfig(steps=STEPS, base_width=8, eval_every=100, gsf_rounds=1, finetune_steps=100)
ctrl, manifest, pool = run(train_ds, cfg)
last = manifest.losses[-1]
print(f"validation loss {last['val']:.4f}; pool grew to {len(pool)} after GSF")

# 3. one query: hold the pendulum near upright, from a tilted start
y0, yf = np.array([0.3, 0.0]), np.array([0.0, 0.0])
u, predicted, executed, metrics = control(ctrl, y0, yf, cfg.guidance, make_rng(1))
print(f"query: target loss {metrics['target_loss']:.3e}, energy {metrics['energy']:.3g}")
print(f"final state {executed[-1].round(4)} vs target {yf}")

# 4. how far the sampled plan and the executed rollout drift apart
_, worst = consistency_report(ctrl, test_ds, seed=0)
print(f"max |executed - sampled| per task: median {np.median(worst):.3f}, worst {worst.max():.3f}")

# 5. held-out tasks
m = evaluate(ctrl, test_ds, cfg.guidance)
print(f"50 tasks: mean target loss {m.target_loss:.3e}, mean energy {m.energy:.3g}, {m.seconds:.2f}s per task")
