import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedc import dataset as dsm
from sedc.dataset import DatasetError, DatasetFormatError
from sedc.dynamics import make_system, rollout


@pytest.fixture(scope="module")
def kura():
    return dsm.generate(make_system("kuramoto", N=4), 60, seed=7)


def test_generation_is_deterministic_and_consistent(kura):
    again = dsm.generate(kura.spec, 60, seed=7)
    assert again.content_hash() == kura.content_hash()
    re = rollout(kura.spec, kura.states[:, 0], kura.controls)
    assert np.max(np.abs(re - kura.states)) < 1e-12


def test_prefix_stability(kura):
    # trajectory i depends only on (seed, i)
    short = dsm.generate(kura.spec, 10, seed=7)
    assert np.array_equal(short.states, kura.states[:10])


def test_split_test_holds_out_last_fifty(kura):
    train, test = dsm.split_test(kura, 50)
    assert len(train) == 10 and len(test) == 50
    assert np.array_equal(test.states, kura.states[10:])
    with pytest.raises(DatasetError):
        dsm.split_test(kura.take(np.arange(50)), 50)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.integers(0, 100))
def test_subsets_are_nested(kura, a, b, seed):
    lo, hi = sorted((a, b))
    small, big = dsm.subset(kura, lo, seed), dsm.subset(kura, hi, seed)
    rows = {s.tobytes() for s in big.states}
    assert all(s.tobytes() in rows for s in small.states)
    assert len(small) == int(np.ceil(lo * len(kura) - 1e-9))


def test_normalisation_roundtrip(kura):
    normed, stats = dsm.normalize(kura)
    flat = normed.states.reshape(-1, kura.spec.N)
    assert np.allclose(flat.mean(0), 0, atol=1e-10) and np.allclose(flat.std(0), 1, atol=1e-10)
    back = dsm.denormalize(normed, stats)
    assert np.allclose(back.states, kura.states, atol=1e-12)
    with pytest.raises(DatasetError):
        dsm.normalize(kura.take([0]))


def test_constant_dimension_has_floored_std():
    spec = make_system("rank_deficient_linear")
    states = np.zeros((3, spec.T + 1, 2))
    ds = dsm.TrajectoryDataset(spec, states, np.zeros((3, spec.T, 2)))
    assert np.all(ds.stats.state_std == 1e-8)


def test_noise_touches_states_only(kura):
    noisy = dsm.inject_noise(kura, 0.1, seed=1)
    assert np.array_equal(noisy.controls, kura.controls)
    assert 0.08 < np.std(noisy.states - kura.states) < 0.12
    assert noisy.tags[0] == "noisy_0.1"
    assert dsm.inject_noise(kura, 0.0, seed=1) is kura


def test_append_tags_rounds(kura):
    grown = kura.append(kura.states[:3], kura.controls[:3], "gsf_round_1")
    assert len(grown) == len(kura) + 3
    assert grown.tags[-3:] == ("gsf_round_1",) * 3 and grown.tags[0] == "generated"


def test_file_roundtrip(kura, tmp_path):
    p = dsm.save(kura, tmp_path / "k.sedc")
    back = dsm.load(p)
    assert back.spec == kura.spec and back.tags == kura.tags
    assert np.allclose(back.states, kura.states, atol=1e-6 * np.abs(kura.states).max())


def test_truncated_file_reports_sizes(kura, tmp_path):
    p = dsm.save(kura, tmp_path / "k.sedc")
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(DatasetFormatError) as err:
        dsm.load(p)
    assert str(len(raw)) in str(err.value) and str(len(raw) - 4) in str(err.value)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError):
        dsm.load(p)


def test_csv_export_has_blank_final_control(kura, tmp_path):
    p = dsm.export_csv(kura.take([0, 1]), tmp_path / "k.csv")
    lines = p.read_text().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["traj_id", "t"] and "u_0" in header
    assert len(lines) == 1 + 2 * (kura.spec.T + 1)
    last = lines[kura.spec.T + 1].split(",")
    assert last[header.index("u_0")] == ""


def test_pendulum_sampling_ranges():
    ds = dsm.generate(make_system("inverted_pendulum"), 20, seed=0)
    assert np.all(np.abs(ds.states[:, 0]) <= 1) and np.all(np.abs(ds.controls) <= 0.5)
