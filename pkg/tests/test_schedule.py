import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from i2vtoy.schedule import (
    NoiseSchedule,
    TimestepError,
    build_linear_schedule,
    enforce_zero_terminal_snr,
    eps_from_v,
    leading_timesteps,
    q_sample,
    trailing_timesteps,
    v_from,
    x0_from_v,
)
from i2vtoy.tensor import ConfigError


def _reference_zsnr_table(T, b0, b1, digits=40):
    """High-precision recomputation of the rescaled signal/noise tables."""
    mpmath.mp.dps = digits
    b0, b1 = mpmath.mpf(b0), mpmath.mpf(b1)
    prod = mpmath.mpf(1)
    a = []
    for i in range(T):
        beta = b0 + (b1 - b0) * i / (T - 1)
        prod *= 1 - beta
        a.append(mpmath.sqrt(prod))
    a1, aT = a[0], a[-1]
    a_new = [(x - aT) * a1 / (a1 - aT) for x in a]
    s_new = [mpmath.sqrt(1 - x * x) for x in a_new]
    return np.array([float(x) for x in a_new]), np.array([float(x) for x in s_new]), float(aT)


def test_linear_schedule_terminal_snr_is_nonzero():
    sched = build_linear_schedule(1000, 1e-4, 0.02)
    _, _, aT = _reference_zsnr_table(1000, 1e-4, 0.02)
    assert sched.a[-1] > 0
    assert sched.a[-1] == pytest.approx(aT, rel=1e-9)


def test_two_step_hand_arithmetic():
    sched = build_linear_schedule(2, 0.1, 0.2)
    assert sched.a[1] == pytest.approx(np.sqrt(0.72), abs=1e-15)
    assert sched.alpha(2) == pytest.approx(np.sqrt(0.9 * 0.8))


def test_construction_identity():
    sched = build_linear_schedule(200, 1e-4, 0.02)
    np.testing.assert_allclose(sched.a**2 + sched.s**2, 1.0, atol=1e-12)
    assert np.all(np.diff(sched.a) < 0) and np.all(np.diff(sched.s) > 0)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.02), (10, 1e-4, 1.0)])
def test_invalid_linear_schedule(args):
    with pytest.raises(ConfigError):
        build_linear_schedule(*args)


def test_zero_terminal_snr_rescale():
    base = build_linear_schedule(1000, 1e-4, 0.02)
    z = enforce_zero_terminal_snr(base)
    assert z.zsnr_applied
    assert z.a[-1] == 0.0
    assert z.s[-1] == 1.0
    assert abs(z.a[0] - base.a[0]) < 1e-7
    a_ref, s_ref, _ = _reference_zsnr_table(1000, 1e-4, 0.02)
    assert np.max(np.abs(z.a - a_ref)) < 1e-9
    assert np.max(np.abs(z.s - s_ref)) < 1e-9


def test_zsnr_monotone_and_snr_properties():
    z = enforce_zero_terminal_snr(build_linear_schedule(1000, 1e-4, 0.02))
    np.testing.assert_allclose(z.a**2 + z.s**2, 1.0, atol=1e-12)
    assert np.all(np.diff(z.a) < 0) and np.all(np.diff(z.s) > 0)
    snr = z.snr()
    assert np.all(np.isfinite(snr[:-1])) and snr[-1] == 0.0
    assert np.all(np.diff(snr[:-1]) < 0)


def test_zsnr_degenerate_rejected():
    flat = NoiseSchedule(T=3, a=np.full(3, 0.5), s=np.full(3, np.sqrt(0.75)))
    with pytest.raises(ConfigError):
        enforce_zero_terminal_snr(flat)


@pytest.fixture(scope="module")
def zsched():
    return enforce_zero_terminal_snr(build_linear_schedule(1000, 1e-4, 0.02))


def test_q_sample_limits(zsched, np_rng):
    x0 = np_rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    eps = np_rng.normal(size=x0.shape).astype(np.float32)
    assert np.array_equal(q_sample(x0, 1000, eps, zsched), eps)
    clean = NoiseSchedule(T=2, a=np.array([1.0, 0.5]), s=np.array([0.0, np.sqrt(0.75)]))
    assert np.array_equal(q_sample(x0, 1, eps, clean), x0)


def test_q_sample_linearity(zsched, np_rng):
    x1, x2, e1, e2 = np_rng.normal(size=(4, 3, 4, 2, 2))
    t = 437
    alpha, beta = 2.0, -0.5
    lhs = q_sample(alpha * x1 + beta * x2, t, alpha * e1 + beta * e2, zsched)
    rhs = alpha * q_sample(x1, t, e1, zsched) + beta * q_sample(x2, t, e2, zsched)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_timestep_range(zsched):
    x = np.zeros((1, 4, 2, 2))
    for bad in (0, 1001):
        with pytest.raises(TimestepError):
            q_sample(x, bad, x, zsched)
        with pytest.raises(TimestepError):
            v_from(x, x, bad, zsched)


def test_terminal_v_identities(zsched, np_rng):
    x0 = np_rng.normal(size=(3, 4, 2, 2)).astype(np.float32)
    eps = np_rng.normal(size=x0.shape).astype(np.float32)
    v = v_from(x0, eps, 1000, zsched)
    assert v.kind == "v"
    assert np.array_equal(v.value, -x0)
    x_t = q_sample(x0, 1000, eps, zsched)
    assert np.array_equal(x0_from_v(x_t, v, 1000, zsched).value, -v.value)
    assert np.array_equal(eps_from_v(x_t, v, 1000, zsched).value, x_t)


def test_v_clean_limit(np_rng):
    clean = NoiseSchedule(T=2, a=np.array([1.0, 0.5]), s=np.array([0.0, np.sqrt(0.75)]))
    x0, eps = np_rng.normal(size=(2, 5))
    assert np.array_equal(v_from(x0, eps, 1, clean).value, eps)


@given(st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_conversion_round_trip(t, seed):
    sched = enforce_zero_terminal_snr(build_linear_schedule(1000, 1e-4, 0.02))
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    eps = rng.normal(size=x0.shape).astype(np.float32)
    x_t = q_sample(x0, t, eps, sched)
    v = v_from(x0, eps, t, sched)
    assert np.max(np.abs(x0_from_v(x_t, v, t, sched).value - x0)) < 1e-5
    assert np.max(np.abs(eps_from_v(x_t, v, t, sched).value - eps)) < 1e-5


def test_eps_form_cross_check(zsched, np_rng):
    # for a_t > 0.1 the epsilon-form reconstruction must agree with the v-form one
    for t in (10, 300, 600):
        assert zsched.alpha(t) > 0.1
        x_t = np_rng.normal(size=(4, 3, 3))
        v = np_rng.normal(size=(4, 3, 3))
        eps_hat = eps_from_v(x_t, v, t, zsched).value
        x0_v = x0_from_v(x_t, v, t, zsched).value
        x0_eps = (x_t - zsched.sigma(t) * eps_hat) / zsched.alpha(t)
        np.testing.assert_allclose(x0_v, x0_eps, atol=1e-9)


def test_per_sample_timesteps(zsched, np_rng):
    x0 = np_rng.normal(size=(3, 4, 2, 2))
    eps = np_rng.normal(size=x0.shape)
    ts = np.array([1, 500, 1000])
    batched = q_sample(x0, ts, eps, zsched)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(batched[i], q_sample(x0[i], int(t), eps[i], zsched))


def test_trailing_timesteps():
    assert trailing_timesteps(1000, 4) == [1000, 750, 500, 250]
    assert trailing_timesteps(7, 7) == [7, 6, 5, 4, 3, 2, 1]
    assert trailing_timesteps(1000, 1) == [1000]
    for K in (3, 50, 999):
        ts = trailing_timesteps(1000, K)
        assert ts[0] == 1000 and len(ts) == K and all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ConfigError):
        trailing_timesteps(10, 11)
    with pytest.raises(ConfigError):
        trailing_timesteps(10, 0)


def test_leading_spacing_misses_terminal_step():
    assert 1000 not in leading_timesteps(1000, 50)
