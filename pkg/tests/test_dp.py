import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from sefl import dp

# sqrt(2 ln 125000), evaluated with mpmath at 50 digits
SIGMA_EPS1_DELTA1E5 = 4.844805262605389


def test_clip_scales_down():
    np.testing.assert_allclose(dp.clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-15)


def test_clip_leaves_short_vectors():
    v = np.array([0.3, -0.4])
    assert np.array_equal(dp.clip(v, 1.0), v)
    assert np.array_equal(dp.clip(np.zeros(3), 1.0), np.zeros(3))


def test_clip_rejects_nonpositive_bound():
    with pytest.raises(ValueError):
        dp.clip(np.ones(2), 0.0)


def test_clip_100_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.normal(scale=rng.uniform(0.01, 100), size=int(rng.integers(1, 50)))
        c = dp.clip(v, 1.0)
        assert np.linalg.norm(c) <= 1.0 + 1e-12
        if np.linalg.norm(v) > 1.0:
            # direction is preserved
            np.testing.assert_allclose(c / np.linalg.norm(c), v / np.linalg.norm(v), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    hnp.arrays(float, st.integers(1, 30), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 1e3),
)
def test_clip_property(v, C):
    c = dp.clip(v, C)
    assert np.linalg.norm(c) <= C * (1 + 1e-12)
    np.testing.assert_allclose(dp.clip(c, C), c, rtol=1e-12, atol=0)


def test_sigma_known_points():
    assert dp.derive_sigma(1.0, 1.25 / math.e**2) == pytest.approx(2.0, abs=1e-15)
    assert dp.derive_sigma(2.0, 1.25 / math.e**2) == pytest.approx(1.0, abs=1e-15)
    assert dp.derive_sigma(1.0, 1e-5) == pytest.approx(SIGMA_EPS1_DELTA1E5, rel=1e-15)


def test_sigma_against_mpmath():
    rng = np.random.default_rng(1)
    with mpmath.workdps(50):
        for _ in range(50):
            eps = float(rng.uniform(0.05, 10))
            delta = float(10 ** rng.uniform(-12, -1))
            ref = mpmath.sqrt(2 * mpmath.log(mpmath.mpf(1.25) / mpmath.mpf(delta))) / mpmath.mpf(eps)
            assert abs(dp.derive_sigma(eps, delta) - float(ref)) <= 1e-12 * float(ref)


def test_sigma_monotone():
    assert dp.derive_sigma(0.5, 1e-5) > dp.derive_sigma(1.0, 1e-5)
    assert dp.derive_sigma(1.0, 1e-8) > dp.derive_sigma(1.0, 1e-5)


@pytest.mark.parametrize("eps,delta", [(0.0, 1e-5), (-1.0, 1e-5), (1.0, 0.0), (1.0, 1.0), (1.0, 2.0)])
def test_sigma_rejects_bad_inputs(eps, delta):
    with pytest.raises(ValueError):
        dp.derive_sigma(eps, delta)


def test_sigma_infinite_epsilon_is_zero():
    assert dp.derive_sigma(math.inf, 1e-5) == 0.0
    assert dp.DpParams(math.inf, 1e-5, 1.0).noise_std(3) == 0.0


def test_sensitivity():
    assert dp.sensitivity(dp.DpParams(1, 1e-5, 2.0, scaling_factor=3.0)) == 6.0
    p = dp.DpParams(1, 1e-5, 2.0, scaling_factor=3.0, divide_by_L=True)
    assert dp.sensitivity(p, 4) == 1.5
    with pytest.raises(ValueError):
        dp.sensitivity(p, 0)


def test_noise_std_combines_sigma_and_sensitivity():
    p = dp.DpParams(1.0, 1e-5, 0.5, scaling_factor=2.0)
    assert p.noise_std() == pytest.approx(SIGMA_EPS1_DELTA1E5 * 1.0)


def test_dpparams_validation():
    with pytest.raises(ValueError):
        dp.DpParams(1.0, 1e-5, 0.0)
    with pytest.raises(ValueError):
        dp.DpParams(1.0, 1e-5, 1.0, scaling_factor=0.0)


# --- sampling --------------------------------------------------------------


def test_box_muller_extremes_are_finite():
    raw = np.array([[0, 0], [2**64 - 1, 2**64 - 1]], dtype=np.uint64)
    z = dp.box_muller(raw)
    assert np.all(np.isfinite(z))
    # smallest u1 = 2^-53 bounds |z| by sqrt(2*53*ln 2)
    assert np.max(np.abs(z)) <= math.sqrt(2 * 53 * math.log(2)) + 1e-12


def test_gaussian_moments_1e5():
    x = dp.sample_gaussian_vector(100_000, 2.0, seed=42)
    se_mean = 2.0 / math.sqrt(x.size)
    assert abs(x.mean()) <= 3 * se_mean
    assert abs(x.std() - 2.0) <= 0.02
    assert stats.kstest(x / 2.0, "norm").pvalue > 0.001


def test_gaussian_from_bits_matches_moments():
    bits = np.random.default_rng(3).bytes(16 * 50_000)
    x = dp.gaussian_from_bits(bits, 50_000, 1.5)
    assert abs(x.mean()) <= 3 * 1.5 / math.sqrt(x.size)
    assert abs(x.std() / 1.5 - 1) <= 0.02


def test_gaussian_from_bits_too_short():
    with pytest.raises(ValueError):
        dp.gaussian_from_bits(b"\x00" * 31, 2, 1.0)


def test_sampler_deterministic_and_zero_std():
    a = dp.sample_gaussian_vector(10, 1.0, seed=9)
    assert np.array_equal(a, dp.sample_gaussian_vector(10, 1.0, seed=9))
    assert not np.array_equal(a, dp.sample_gaussian_vector(10, 1.0, seed=10))
    assert np.array_equal(dp.sample_gaussian_vector(4, 0.0, seed=1), np.zeros(4))
    with pytest.raises(ValueError):
        dp.sample_gaussian_vector(4, -1.0, seed=1)


# --- accounting ------------------------------------------------------------


def test_ledger_empty():
    assert dp.PrivacyLedger().total() == (0.0, 0.0)


def test_ledger_three_rounds():
    led = dp.PrivacyLedger()
    for _ in range(3):
        led = dp.ledger_record(led, 1.0, 1e-5)
    eps, delta = dp.ledger_total(led)
    assert eps == 3.0 and delta == pytest.approx(3e-5, rel=1e-12)


def test_ledger_is_immutable():
    a = dp.PrivacyLedger()
    b = a.record(1.0, 1e-5)
    assert a.total() == (0.0, 0.0) and b.total() == (1.0, 1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(1e-9, 1e-3)), max_size=30))
def test_ledger_sums(steps):
    led = dp.PrivacyLedger()
    for e, d in steps:
        led = led.record(e, d)
    eps, delta = led.total()
    assert eps == pytest.approx(math.fsum(e for e, _ in steps), rel=1e-12, abs=0)
    assert delta == pytest.approx(math.fsum(d for _, d in steps), rel=1e-12, abs=0)


def test_ledger_csv():
    led = dp.PrivacyLedger().record(1.0, 1e-5, round=0).record(1.0, 1e-5, round=2)
    lines = led.to_csv().splitlines()
    assert lines[0] == "round,epsilon,delta,epsilon_total,delta_total"
    assert lines[2].startswith("2,1.0,1e-05,2.0,")
