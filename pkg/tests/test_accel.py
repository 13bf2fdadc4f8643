import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from vpr import _accel
from vpr.optimizer import draw_minibatch, floyd_sample

pytestmark = pytest.mark.skipif(not _accel.ENABLED, reason="numba not installed")


@given(st.floats(min_value=1e-3, max_value=1e4))
def test_trigamma_matches_scipy(x):
    assert _accel.trigamma(x) == pytest.approx(float(special.polygamma(1, x)), rel=1e-13)


def test_trigamma_small_and_half_integer_arguments():
    for x in (0.5, 1.0, 1.5, 2.0, 9.999, 10.0, 10.5):
        assert _accel.trigamma(x) == pytest.approx(float(special.polygamma(1, x)), rel=1e-13)


@given(st.integers(1, 40), st.data())
def test_compiled_floyd_equals_numpy_floyd(population, data):
    k = data.draw(st.integers(1, population))
    u = np.array(data.draw(st.lists(st.floats(0, 1, exclude_max=True), min_size=k, max_size=k)))
    out = np.empty(k, np.int64)
    mark = np.zeros(population, np.int8)
    _accel._floyd(u, population, k, out, mark)
    assert np.array_equal(out, floyd_sample(u, population))
    assert not mark.any()  # scratch space is cleared for the next call


@pytest.mark.parametrize("M, b, newest", [(10, 4, True), (10, 4, False), (5, 9, True), (30, 30, False)])
def test_compiled_selection_equals_numpy(M, b, newest):
    rng = np.random.default_rng(M * b)
    for _ in range(20):
        u = rng.random(b)
        cap = max(b, M)
        sel, w, nm = np.empty(cap, np.int64), np.empty(cap), np.empty(cap, np.bool_)
        used = _accel._select(u, M, b, newest, sel, w, nm, np.zeros(M, np.int8))
        ref_sel, ref_w, ref_nm = draw_minibatch(u, M, b, newest)
        assert used == len(ref_sel)
        assert np.array_equal(sel[:used], ref_sel)
        assert np.array_equal(w[:used], ref_w)
        assert np.array_equal(nm[:used], ref_nm)
