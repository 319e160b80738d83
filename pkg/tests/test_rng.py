import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdinterp.errors import ParameterError
from kdinterp.rng import MASK64, Rng64, kaiming_uniform_init, splitmix64, splitmix64_next

seeds = st.integers(0, MASK64)


def test_reference_first_output_for_seed_zero():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_reference_sequence_continues():
    # published reference stream for seed 0
    r = Rng64(0)
    assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@settings(max_examples=50)
@given(seed=seeds, n=st.integers(0, 40))
def test_vectorized_block_matches_scalar_stream(seed, n):
    a, b = Rng64(seed), Rng64(seed)
    block = a.u64_array(n)
    assert [int(v) for v in block] == [b.next_u64() for _ in range(n)]
    assert a.state == b.state


@settings(max_examples=50)
@given(seed=seeds)
def test_uniform_in_unit_interval(seed):
    r = Rng64(seed)
    u = r.uniform_array(257)
    assert u.dtype == np.float32
    assert u.min() >= 0.0 and u.max() < 1.0
    assert 0.0 <= r.uniform_f32() < 1.0


def test_next_returns_new_state():
    out, state = splitmix64_next(0)
    assert out == 0xE220A8397B1DCDAF
    assert state == 0x9E3779B97F4A7C15


@settings(max_examples=30)
@given(seed=seeds, n=st.integers(1, 60))
def test_permutation_is_bijection(seed, n):
    assert sorted(Rng64(seed).permutation(n).tolist()) == list(range(n))


def test_kaiming_bounds_and_determinism():
    w1 = kaiming_uniform_init(Rng64(5), 6, (4, 6))
    w2 = kaiming_uniform_init(Rng64(5), 6, (4, 6))
    assert w1.dtype == np.float32 and w1.shape == (4, 6)
    np.testing.assert_array_equal(w1, w2)
    assert np.abs(w1).max() <= 1.0
    big = kaiming_uniform_init(Rng64(1), 24, (10000,))
    bound = np.sqrt(6 / 24)
    assert np.abs(big).max() <= bound
    assert np.abs(big).max() > 0.95 * bound


def test_kaiming_rejects_zero_fan_in():
    with pytest.raises(ParameterError):
        kaiming_uniform_init(Rng64(0), 0, (2,))
