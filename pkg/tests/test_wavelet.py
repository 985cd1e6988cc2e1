import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavedense import network as N
from wavedense.tensor import ShapeError
from wavedense.wavelet import HAAR_FILTERS, dwt, dwt_backward, haar_bank, idwt, idwt_backward


def test_bank_values():
    assert HAAR_FILTERS["A"].tolist() == [[1, 1], [1, 1]]
    assert HAAR_FILTERS["H"].tolist() == [[-1, 1], [-1, 1]]
    assert HAAR_FILTERS["V"].tolist() == [[-1, -1], [1, 1]]
    assert HAAR_FILTERS["D"].tolist() == [[1, -1], [-1, 1]]


def test_bank_orthogonal():
    for a, b in itertools.product("AHVD", repeat=2):
        ip = np.sum(HAAR_FILTERS[a] * HAAR_FILTERS[b])
        assert ip == (4 if a == b else 0)


def test_bank_is_frozen():
    bank = haar_bank()
    assert not bank.trainable
    with pytest.raises(ValueError):
        bank.weight[0, 0, 0, 0] = 2.0


def test_worked_example():
    s = dwt(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
    assert s.ravel().tolist() == [10.0, 2.0, 4.0, 0.0]
    assert idwt(s).ravel().tolist() == [1.0, 2.0, 3.0, 4.0]


def test_constant_image():
    s = dwt(np.full((1, 1, 2, 2), 0.7))
    np.testing.assert_allclose(s.ravel(), [2.8, 0, 0, 0])


def test_block_channel_layout():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 8, 8))
    s = dwt(x)
    assert s.shape == (2, 12, 4, 4)
    # channel q*c + ch holds subband q of input channel ch
    for ch in range(3):
        single = dwt(x[:, ch:ch + 1])
        for q in range(4):
            np.testing.assert_array_equal(s[:, q * 3 + ch], single[:, q])


def test_idwt_examples():
    assert idwt(np.zeros((1, 4, 3, 3))).shape == (1, 1, 6, 6)
    assert not idwt(np.zeros((1, 4, 3, 3))).any()
    s = np.array([4.0, 0, 0, 0]).reshape(1, 4, 1, 1)
    assert idwt(s).ravel().tolist() == [1.0, 1.0, 1.0, 1.0]


def test_errors():
    with pytest.raises(ShapeError, match="pad"):
        dwt(np.ones((1, 1, 5, 4)))
    with pytest.raises(ShapeError, match="divisible by 4"):
        idwt(np.ones((1, 6, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 8), w=st.integers(1, 8),
       seed=st.integers(0, 2 ** 16))
def test_perfect_reconstruction_and_energy(n, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, 2 * h, 2 * w))
    s = dwt(x)
    assert np.max(np.abs(idwt(s) - x)) < 1e-12
    assert abs(np.sum(s ** 2) - 4 * np.sum(x ** 2)) < 1e-10 * max(1.0, np.sum(x ** 2))
    x32 = x.astype(np.float32)
    assert np.max(np.abs(idwt(dwt(x32)) - x32)) < 1e-5


def test_linearity():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 1, 2, 6, 6))
    np.testing.assert_allclose(dwt(2.5 * x - 0.5 * y), 2.5 * dwt(x) - 0.5 * dwt(y), atol=1e-12)


def test_backward_maps_are_adjoints():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 4))
    s = rng.standard_normal((2, 12, 3, 2))
    assert np.isclose(np.sum(dwt(x) * s), np.sum(x * dwt_backward(s)), atol=1e-12)
    y = rng.standard_normal((2, 3, 6, 4))
    assert np.isclose(np.sum(idwt(s) * y), np.sum(s * idwt_backward(y)), atol=1e-12)


def test_wavelet_layers_add_no_parameters():
    cfg = N.ModelConfig(levels=2, channels=(4, 8), rdb_depth=1)
    names = N.build(cfg).names()
    assert not any("dwt" in n or "haar" in n for n in names)
    shapes = N.network_for(cfg).param_shapes()
    assert all(s[-1] == 3 for k, s in shapes.items() if k.endswith(".weight"))
