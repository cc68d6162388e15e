import numpy as np
import pytest
import torch

from sedc.dataset import generate
from sedc.dynamics import make_system
from sedc.invdyn import InvDynConfig, build_invdyn, invdyn_loss
from sedc.numerics import AdamConfig, ParamStore, adam_step, as_tensor, make_rng, randn


def test_zero_parameters_give_zero_controls():
    inv = build_invdyn(InvDynConfig(3, 2), make_rng(0))
    with torch.no_grad():
        for p in inv.parameters():
            p.zero_()
    rng = make_rng(1)
    assert torch.count_nonzero(inv(randn(rng, 5, 3), randn(rng, 5, 3))) == 0


def test_autoregressive_mask_is_causal():
    rng = make_rng(2)
    inv = build_invdyn(InvDynConfig(2, 3), rng)
    y, yn = randn(rng, 1, 2), randn(rng, 1, 2)
    u = randn(rng, 1, 3).requires_grad_(True)
    out = inv.teacher_forced(y, yn, u)
    for m in range(3):
        (g,) = torch.autograd.grad(out[0, m], u, retain_graph=True)
        assert torch.all(g[0, m:] == 0)
        if m > 0:
            assert torch.any(g[0, :m] != 0)


def test_greedy_decoding_equals_teacher_forcing_on_own_outputs():
    rng = make_rng(3)
    inv = build_invdyn(InvDynConfig(2, 3), rng)
    y, yn = randn(rng, 4, 2), randn(rng, 4, 2)
    greedy = inv(y, yn)
    assert torch.allclose(inv.teacher_forced(y, yn, greedy), greedy, atol=1e-14)


def test_euler_inversion_oracle_recovers_controls():
    # u = m L^2 (dtheta_dot/dt - (g/L) sin(theta) + (mu/L) theta_dot) is exact for single-step euler data
    spec = make_system("inverted_pendulum")
    ds = generate(spec, 20, seed=3, method="euler")
    th, om = ds.states[:, :-1, 0], ds.states[:, :-1, 1]
    p = spec.params
    u = p["m"] * p["L"] ** 2 * (np.diff(ds.states[..., 1], axis=1) / spec.dt - p["g"] / p["L"] * np.sin(th)
                                + p["mu"] / p["L"] * om)
    assert np.max(np.abs(u - ds.controls[..., 0])) < 1e-10


@pytest.fixture(scope="module")
def pendulum():
    ds = generate(make_system("inverted_pendulum"), 100, seed=0)
    st = ds.stats
    return as_tensor(st.norm_states(ds.states)), as_tensor(st.norm_controls(ds.controls)), st


def test_zero_predictor_loss_is_control_second_moment(pendulum):
    ys, us, _ = pendulum
    inv = build_invdyn(InvDynConfig(2, 1), make_rng(0))
    with torch.no_grad():
        for p in inv.parameters():
            p.zero_()
    assert np.isclose(invdyn_loss(inv, ys[:, :-1], us, ys[:, 1:]).item(), (us**2).mean().item(), rtol=1e-12)


def test_loss_decreases_under_adam(pendulum):
    ys, us, st = pendulum
    rng = make_rng(0)
    inv = build_invdyn(InvDynConfig(2, 1), rng)
    inv.set_delta_scale(ys.numpy())
    store = ParamStore.from_modules(invdyn=inv)
    cfg = AdamConfig(lr=3e-3)
    losses = []
    for _ in range(1000):
        idx = rng.integers(0, len(ys), 32)
        loss = invdyn_loss(inv, ys[idx, :-1], us[idx], ys[idx, 1:])
        losses.append(loss.item())
        adam_step(store, store.grads(loss), cfg)
    assert np.mean(losses[-10:]) < 0.2 * losses[0]
