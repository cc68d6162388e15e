import numpy as np
import pytest
import torch

from sedc.denoiser import DenoiserConfig, TemporalUNet, build_denoiser, count_params, matched_base_width
from sedc.diffusion import Controller, build_schedule, training_loss
from sedc.dynamics import make_system
from sedc.invdyn import InvDynConfig, build_invdyn
from sedc.numerics import ParamStore, grad_check, make_rng, randn
from sedc.dataset import NormStats


def _randomise_outputs(model, rng):
    # build_denoiser zeroes the output convs; structural tests need non-trivial outputs
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, TemporalUNet):
                m.out.weight.copy_(0.3 * randn(rng, *m.out.weight.shape))
                m.out.bias.copy_(0.3 * randn(rng, *m.out.bias.shape))
    return model


@pytest.fixture(scope="module")
def dmd():
    rng = make_rng(0)
    return _randomise_outputs(build_denoiser(DenoiserConfig("dmd", 3, 3, 3, base_width=4), rng), rng)


def _inputs(rng, B=2, L=9, N=3):
    return randn(rng, B, L, N), torch.tensor([3.0, 40.0]), randn(rng, B, N), randn(rng, B, N)


def test_zero_condition_gives_zero_output(dmd):
    x, k, y0, yf = _inputs(make_rng(1))
    out = dmd(x, k, torch.zeros_like(y0), torch.zeros_like(yf))
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("s", [-2.0, 0.5, 3.0])
def test_components_are_homogeneous_in_the_condition(dmd, s):
    x, k, y0, yf = _inputs(make_rng(2))
    o1, o2 = dmd.components(x, k, y0, yf)
    s1, s2 = dmd.components(x, k, s * y0, s * yf)
    assert torch.allclose(s1, s * o1, atol=1e-10, rtol=0)
    assert torch.allclose(s2, s * s * o2, atol=1e-10, rtol=0)
    assert o2.abs().max() > 1e-3  # the check is not vacuous


def test_linear_only_equals_full_with_second_unet_zeroed(dmd):
    x, k, y0, yf = _inputs(make_rng(3))
    lin = dmd(x, k, y0, yf, linear_only=True)
    clone = build_denoiser(dmd.cfg, make_rng(9))
    clone.load_state_dict(dmd.state_dict())
    with torch.no_grad():
        for p in clone.unet2.parameters():
            p.zero_()
    assert torch.equal(clone(x, k, y0, yf), lin)


@pytest.mark.parametrize("L", [2, 9, 16, 129])
def test_output_length_matches_input_for_any_length(dmd, L):
    x, k, y0, yf = _inputs(make_rng(4), L=L)
    assert dmd(x, k, y0, yf).shape == (2, L, 3)


def test_single_unet_and_joint_shapes():
    rng = make_rng(5)
    single = build_denoiser(DenoiserConfig("single_unet", 3, 3, base_width=4), rng)
    joint = build_denoiser(DenoiserConfig("dmd", 3, 5, base_width=4), rng)
    x, k, y0, yf = _inputs(rng)
    assert single(x, k, y0, yf).shape == (2, 9, 3)
    assert joint(randn(rng, 2, 9, 5), k, y0, yf).shape == (2, 9, 5)


def test_zero_initialised_outputs():
    m = build_denoiser(DenoiserConfig("dmd", 2, 2, base_width=4), make_rng(0))
    x, k, y0, yf = _inputs(make_rng(1), N=2)
    assert torch.count_nonzero(m(x, k, y0, yf)) == 0


def test_rejects_wrong_widths(dmd):
    from sedc.numerics import ConfigError

    x, k, y0, yf = _inputs(make_rng(1), N=2)
    with pytest.raises(ConfigError):
        dmd(x, k, y0, yf)


def test_matched_width_is_within_twenty_percent():
    ref = count_params(build_denoiser(DenoiserConfig("dmd", 4, 4, base_width=8), make_rng(0)))
    w = matched_base_width(DenoiserConfig("single_unet", 4, 4), ref)
    n = count_params(build_denoiser(DenoiserConfig("single_unet", 4, 4, base_width=w), make_rng(0)))
    assert abs(n / ref - 1) < 0.2


def test_full_training_loss_passes_grad_check():
    # DMD + inverse dynamics at N=3, T'=8, batch 2 (a few entries per tensor)
    rng = make_rng(11)
    spec = make_system("kuramoto", N=3, T=7)
    den = _randomise_outputs(build_denoiser(DenoiserConfig("dmd", 3, 3, base_width=2), rng), rng)
    inv = build_invdyn(InvDynConfig(3, 3, hidden=8), rng)
    stats = NormStats(np.zeros(3), np.ones(3), np.zeros(3), np.ones(3))
    ctrl = Controller(spec, stats, den, inv, build_schedule(16))
    ys, us = randn(rng, 2, 8, 3), randn(rng, 2, 7, 3)
    store = ParamStore.from_modules(**ctrl.modules())

    def loss():
        return training_loss(ctrl, ys, us, make_rng(5))[0]

    assert grad_check(loss, store, max_entries=3, rng=make_rng(0)) < 1e-4
