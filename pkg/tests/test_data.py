import numpy as np
import pytest
from hypothesis import given, strategies as st

from dloadapt import data, sim
from dloadapt.errors import DatasetError, SimulationDiverged


@pytest.fixture(scope="module")
def short(rest_state, cfg):
    return data.collect_dataset(rest_state, cfg, 6.0, seed=3)


def test_shapes_and_layout(short):
    n = len(short)
    assert short.phi.shape == (n, 30)
    assert short.rdot.shape == (n, 3)
    assert short.xdot.shape == (n, 10, 3)
    assert short.gripper.shape == (n, 3)
    np.testing.assert_allclose(np.diff(short.t), 0.02)
    # 6 s at 50 Hz gives 301 positions; differencing and smoothing trim 3 at each end
    assert n == 301 - 6
    sample = short[0]
    assert sample.xdot.shape == (10, 3) and sample.timestamp == short.t[0]


def test_deterministic(rest_state, cfg, short):
    again = data.collect_dataset(rest_state, cfg, 6.0, seed=3)
    for a, b in [(short.phi, again.phi), (short.rdot, again.rdot), (short.xdot, again.xdot)]:
        assert np.array_equal(a, b)
    other = data.collect_dataset(rest_state, cfg, 6.0, seed=4)
    assert not np.array_equal(short.phi, other.phi)


def test_gripper_velocity_integrates_by_trapezoid(short):
    disp = np.diff(short.gripper, axis=0)
    trap = 0.5 * (short.rdot[1:] + short.rdot[:-1]) * 0.02
    assert np.abs(disp - trap).max() < 1e-6


def test_gripper_stays_in_workspace(rest_state, cfg, short):
    lo, hi = data.default_workspace(rest_state)
    assert np.all(short.gripper >= lo - 1e-9) and np.all(short.gripper <= hi + 1e-9)


def test_smoothed_gripper_derivative_tracks_input(short):
    vel, trim = data.differentiate(short.gripper, 50.0)
    err = np.abs(vel - short.rdot[trim:-trim]).max()
    assert err < 0.02 * np.abs(short.rdot).max()


def test_input_does_not_mutate_state(rest_state, cfg):
    before = rest_state.positions.copy()
    data.collect_dataset(rest_state, cfg, 1.0, seed=0)
    assert np.array_equal(rest_state.positions, before)


def test_rejects_incommensurate_rates(rest_state, cfg):
    with pytest.raises(ValueError):
        data.collect_dataset(rest_state, cfg, 1.0, rate=30.0)
    with pytest.raises(ValueError):
        data.collect_dataset(rest_state, cfg, 1.0, window=0.011)


@given(st.integers(1, 4), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
def test_differentiate_exact_on_quadratics(window, a, b, c):
    rate = 50.0
    t = np.arange(40) / rate
    pos = (a + b * t + c * t * t)[:, None]
    vel, trim = data.differentiate(pos, rate, window)
    assert trim == 1 + (window - 1) // 2
    assert len(vel) == len(t) - 2 - (window - 1)
    centre = t[trim:trim + len(vel)]
    if window % 2 == 0:
        centre = centre + 0.5 / rate
    np.testing.assert_allclose(vel[:, 0], b + 2 * c * centre, atol=1e-9)


def test_minimum_jerk_profile_integrates_to_goal():
    tau = np.linspace(0, 2.0, 20001)
    v = data.minimum_jerk_velocity([0, 0, 0], [0.1, -0.2, 0.3], 2.0, tau)
    np.testing.assert_allclose(v[[0, -1]], 0)
    np.testing.assert_allclose(np.trapezoid(v, tau, axis=0), [0.1, -0.2, 0.3], atol=1e-9)


def test_holdout_and_first(short):
    train, test = short.split_holdout(1.0)
    assert len(train) + len(test) == len(short)
    assert train.t.max() < test.t.min()
    assert test.t.max() - test.t.min() == pytest.approx(1.0 - 0.02)
    head = short.first(2.0)
    assert head.t.max() - head.t[0] < 2.0


def test_csv_roundtrip(short, tmp_path):
    path = tmp_path / "d.csv"
    data.write_csv(short, path)
    back = data.read_csv(path)
    for a, b in [(short.t, back.t), (short.phi, back.phi), (short.rdot, back.rdot), (short.xdot, back.xdot)]:
        assert np.array_equal(a, b)
    assert back.meta["seed"] == "3"
    assert back.meta["sim.dt"] == repr(0.005)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["t", "phi_0"] and header[-1] == "xdot_9_2"


def test_csv_bytes_deterministic(short, tmp_path):
    data.write_csv(short, tmp_path / "a.csv")
    data.write_csv(short, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,foo\n0,1\n")
    with pytest.raises(DatasetError):
        data.read_csv(path)


def test_divergence_returns_partial_dataset(rest_state, cfg, monkeypatch):
    real = sim._advance_inplace
    calls = {"n": 0}

    def flaky(state, u, c, steps=1):
        calls["n"] += 1
        if calls["n"] > 4 * 100:  # four simulator steps per sample, fail after 2 s
            raise SimulationDiverged(7)
        real(state, u, c, steps)

    monkeypatch.setattr(sim, "_advance_inplace", flaky)
    with pytest.raises(DatasetError) as info:
        data.collect_dataset(rest_state, cfg, 5.0, seed=1)
    part = info.value.partial
    assert part is not None
    assert len(part) == 101 - 6
    assert "2.00 s" in str(info.value)
