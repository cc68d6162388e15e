import numpy as np
import pytest

from sedc.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, tensor_hash
from sedc.dataset import generate, split_test, subset
from sedc.diffusion import GuidanceSpec
from sedc.dynamics import make_system, rollout
from sedc.evaluation import run_cell, target_loss
from sedc.numerics import ConfigError, make_rng
from sedc.pipeline import RunManifest, TrainConfig, TrainingDiverged, build_controller, control, gsf_round, run, train

TINY = dict(steps=12, eval_every=4, base_width=2, invdyn_hidden=8, K=8, finetune_steps=8, gsf_rounds=1)


@pytest.fixture(scope="module")
def small():
    ds = generate(make_system("rank_deficient_linear"), 90, seed=1)
    return split_test(ds, 50)


def test_training_is_bit_reproducible(small):
    train_ds, _ = small
    cfg = TrainConfig(**TINY)
    a, ma = train(train_ds, cfg)
    b, mb = train(train_ds, cfg)
    assert tensor_hash(a) == tensor_hash(b)
    assert ma.losses == mb.losses


def test_divergence_aborts_with_manifest(small):
    train_ds, _ = small
    with pytest.raises(TrainingDiverged) as err:
        train(train_ds, TrainConfig(**{**TINY, "lr": 1e4, "steps": 60}))
    assert isinstance(err.value.manifest, RunManifest) and err.value.manifest.losses


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stepz": 3})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(gsf_rounds=-1)
    with pytest.raises(ConfigError):
        TrainConfig(variant="no_everything")


def test_gsf_round_bookkeeping(small):
    train_ds, _ = small
    cfg = TrainConfig(**TINY)
    ctrl, manifest = train(train_ds, cfg)
    pool, report = gsf_round(ctrl, train_ds, cfg, 1, make_rng(0), manifest)
    assert len(pool) == len(train_ds) + report["generated"] - report["dropped"]
    new = [i for i, t in enumerate(pool.tags) if t == "gsf_round_1"]
    assert len(new) == report["generated"] - report["dropped"]
    re = rollout(pool.spec, pool.states[new, 0], pool.controls[new])
    assert np.max(np.abs(re - pool.states[new])) < 1e-12
    assert np.allclose(ctrl.stats.state_mean, pool.stats.state_mean)
    assert manifest.gsf[-1] is report


def test_control_metrics_come_from_the_executed_rollout(small):
    train_ds, test_ds = small
    ctrl, _ = train(train_ds, TrainConfig(**TINY))
    y0, yf = test_ds.states[0, 0], test_ds.states[0, -1]
    u, pred, executed, metrics = control(ctrl, y0, yf, GuidanceSpec(0.01), make_rng(0))
    assert metrics["target_loss"] == float(target_loss(rollout(ctrl.spec, y0, u)[-1], yf))
    assert np.array_equal(pred[0], y0) and np.array_equal(pred[-1], yf)


def test_subset_run_uses_the_nested_subset(small):
    train_ds, test_ds = small
    cell = run_cell(train_ds, test_ds.take(np.arange(3)), TrainConfig(**{**TINY, "gsf_rounds": 0}), fraction=0.2)
    assert cell.manifest["dataset_hash"] == subset(train_ds, 0.2, seed=0).content_hash()


def test_variant_parameter_budgets_are_matched(small):
    from sedc.denoiser import count_params

    train_ds, _ = small
    rng = make_rng(0)

    def total(v):
        c = build_controller(train_ds, TrainConfig(variant=v, base_width=8), rng)
        return sum(count_params(m) for m in c.modules().values())

    full = total("full")
    for v in ("no_dsd", "no_dmd"):
        assert abs(total(v) / full - 1) < 0.2


def test_run_skips_rounds_for_no_gsf(small):
    train_ds, _ = small
    _, manifest, pool = run(train_ds, TrainConfig(**{**TINY, "variant": "no_gsf"}))
    assert manifest.gsf == [] and len(pool) == len(train_ds)


def test_checkpoint_roundtrip(small, tmp_path):
    train_ds, test_ds = small
    ctrl, manifest = train(train_ds, TrainConfig(**TINY))
    save_checkpoint(ctrl, tmp_path / "ck", manifest.to_dict())
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert tensor_hash(loaded) == tensor_hash(ctrl) == meta["checkpoint_hash"]
    save_checkpoint(loaded, tmp_path / "ck2")
    again, _ = load_checkpoint(tmp_path / "ck2")
    y0, yf = test_ds.endpoints()
    a = control(loaded, y0[0], yf[0], None, make_rng(1))[0]
    b = control(again, y0[0], yf[0], None, make_rng(1))[0]
    assert np.array_equal(a, b)
    (tmp_path / "ck2" / "tensors" / "denoiser.cond.linear.weight.bin").write_bytes(b"\0" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck2")
