# src/tests/test_wavelet.py

import numpy as np
import pytest
import pywt

from src.models import ops
from src.models.tensor import Tensor, tensor
from src.models.wavelet import (
    SubbandSet,
    WaveletDecodeParams,
    WaveletEncodeParams,
    dwt2_haar,
    idwt2_haar,
    init_wavelet_decode_params,
    init_wavelet_encode_params,
    merge_subbands,
    split_subbands,
    wavelet_decode,
    wavelet_encode,
)
from src.utils.context import default_dtype
from src.utils.exceptions import DimensionError
from src.utils.grad_check import grad_check


def _random_even_shape(rng):
    h, w = (2 * rng.integers(1, 33) for _ in range(2))
    return int(h), int(w), int(rng.choice([1, 4, 16]))


def test_matches_pywavelets_haar():
    """与 PyWavelets 对照：ll=cA, lh=cV, hl=cH, hh=cD"""
    x = np.random.default_rng(0).normal(size=(8, 6, 3))
    s = dwt2_haar(tensor(x, dtype=np.float64))
    c_a, (c_h, c_v, c_d) = pywt.dwt2(x, "haar", axes=(0, 1))
    np.testing.assert_allclose(s.ll.data, c_a, atol=1e-12)
    np.testing.assert_allclose(s.lh.data, c_v, atol=1e-12)
    np.testing.assert_allclose(s.hl.data, c_h, atol=1e-12)
    np.testing.assert_allclose(s.hh.data, c_d, atol=1e-12)
    back = pywt.idwt2((s.ll.data, (s.hl.data, s.lh.data, s.hh.data)), "haar", axes=(0, 1))
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_hand_computed_block():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    s = dwt2_haar(tensor(x, dtype=np.float64))
    assert s.ll.data.item() == pytest.approx(5.0)
    assert s.lh.data.item() == pytest.approx(-1.0)
    assert s.hl.data.item() == pytest.approx(-2.0)
    assert s.hh.data.item() == pytest.approx(0.0)


def test_round_trip_float64():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        x = rng.normal(size=_random_even_shape(rng))
        back = idwt2_haar(dwt2_haar(tensor(x, dtype=np.float64))).data
        assert np.max(np.abs(back - x)) < 1e-12


def test_round_trip_float32():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        x = rng.normal(size=_random_even_shape(rng)).astype(np.float32)
        back = idwt2_haar(dwt2_haar(tensor(x))).data
        assert np.max(np.abs(back - x)) < 1e-5


def test_energy_preserved():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(size=_random_even_shape(rng))
        s = dwt2_haar(tensor(x, dtype=np.float64))
        energy = float(np.sum(x * x))
        assert abs(s.energy() - energy) <= 1e-6 * energy


def test_constant_input_has_only_ll():
    s = dwt2_haar(tensor(np.full((4, 4, 2), 3.0), dtype=np.float64))
    np.testing.assert_allclose(s.ll.data, 6.0)
    for band in (s.lh, s.hl, s.hh):
        np.testing.assert_allclose(band.data, 0.0, atol=1e-15)


@pytest.mark.parametrize("shape", [(3, 4, 1), (4, 5, 2), (4, 4)])
def test_odd_or_flat_input_rejected(shape):
    with pytest.raises(DimensionError):
        dwt2_haar(tensor(np.zeros(shape)))


def test_subband_shapes_must_agree():
    a = tensor(np.zeros((2, 2, 1)))
    with pytest.raises(DimensionError):
        SubbandSet(a, a, a, tensor(np.zeros((2, 3, 1))))


def test_merge_split_order():
    s = dwt2_haar(tensor(np.random.default_rng(4).normal(size=(4, 4, 2)), dtype=np.float64))
    merged = merge_subbands(s)
    assert merged.shape == (2, 2, 8)
    np.testing.assert_array_equal(merged.data[..., 2:4], s.lh.data)
    again = split_subbands(merged)
    for x, y in zip(again.bands(), s.bands()):
        np.testing.assert_array_equal(x.data, y.data)


def test_dwt_idwt_gradients():
    x0 = np.random.default_rng(5).normal(size=(4, 6, 2))
    with default_dtype(np.float64):
        w_bands = Tensor(np.random.default_rng(6).normal(size=(2, 3, 8)))
        w_image = Tensor(np.random.default_rng(7).normal(size=(4, 6, 2)))
    err = grad_check(lambda x: ops.sum(ops.mul(merge_subbands(dwt2_haar(x)), w_bands)), x0)
    assert err < 1e-6
    bands0 = np.random.default_rng(8).normal(size=(2, 3, 8))
    err = grad_check(lambda x: ops.sum(ops.mul(idwt2_haar(split_subbands(x)), w_image)), bands0)
    assert err < 1e-6


# ============ 编码 / 解码块 ============

def test_encode_decode_shapes():
    rng = np.random.default_rng(8)
    f0 = tensor(rng.normal(size=(8, 8, 8)))
    enc = init_wavelet_encode_params(8, rng)
    dec = init_wavelet_decode_params(8, rng)
    f2 = wavelet_encode(f0, enc)
    assert f2.shape == (4, 4, 8)
    f5 = wavelet_decode(f2, f2, f0, dec)
    assert f5.shape == f0.shape


def test_encode_rejects_bad_channels():
    rng = np.random.default_rng(9)
    enc = init_wavelet_encode_params(8, rng)
    with pytest.raises(DimensionError):
        wavelet_encode(tensor(np.zeros((4, 4, 6))), enc)
    with pytest.raises(DimensionError):
        wavelet_encode(tensor(np.zeros((4, 4, 4))), enc)


def test_decode_rejects_mismatched_resolution():
    rng = np.random.default_rng(10)
    dec = init_wavelet_decode_params(8, rng)
    f2 = tensor(np.zeros((4, 4, 8)))
    with pytest.raises(DimensionError):
        wavelet_decode(f2, f2, tensor(np.zeros((6, 6, 8))), dec)
    with pytest.raises(DimensionError):
        wavelet_decode(f2, tensor(np.zeros((2, 2, 8))), tensor(np.zeros((8, 8, 8))), dec)


def test_inverse_of_pure_ll_block():
    zero = tensor(np.zeros((1, 1, 1)), dtype=np.float64)
    ll = tensor(np.full((1, 1, 1), 2.0), dtype=np.float64)
    out = idwt2_haar(SubbandSet(ll, zero, zero, zero)).data
    np.testing.assert_allclose(out[..., 0], [[1.0, 1.0], [1.0, 1.0]])


def test_dwt_is_linear():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(6, 8, 3)), rng.normal(size=(6, 8, 3))
    alpha, beta = 1.7, -0.4
    lhs = merge_subbands(dwt2_haar(tensor(alpha * x + beta * y, dtype=np.float64))).data
    rhs = (
        alpha * merge_subbands(dwt2_haar(tensor(x, dtype=np.float64))).data
        + beta * merge_subbands(dwt2_haar(tensor(y, dtype=np.float64))).data
    )
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_encode_with_summing_reduce_gives_raw_subbands_of_channel_sum():
    x = np.random.default_rng(8).normal(size=(6, 4, 4))
    p = WaveletEncodeParams(reduce_kernel=tensor(np.ones((1, 1, 4, 1)), dtype=np.float64))
    out = wavelet_encode(tensor(x, dtype=np.float64), p).data
    c_a, (c_h, c_v, c_d) = pywt.dwt2(x.sum(axis=-1), "haar")
    np.testing.assert_allclose(out, np.stack([c_a, c_v, c_h, c_d], axis=-1), atol=1e-12)


def test_encode_zero_input_is_zero():
    p = init_wavelet_encode_params(8, np.random.default_rng(9))
    out = wavelet_encode(tensor(np.zeros((4, 4, 8))), p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_decode_of_zeros_with_zero_params_is_zero():
    c = 4
    with default_dtype(np.float64):
        p = WaveletDecodeParams(
            fw_kernel=Tensor(np.zeros((1, 1, c // 2, c))),
            depth_kernels=[Tensor(np.zeros((3, 3, c, c))), Tensor(np.zeros((3, 3, c, c)))],
            decode_kernel=Tensor(np.zeros((1, 1, 2 * c, c))),
            fp_projection=Tensor(np.zeros((1, 1, c, c))),
        )
        f2, f3, f0 = Tensor(np.zeros((2, 2, c))), Tensor(np.zeros((2, 2, c))), Tensor(np.zeros((4, 4, c)))
        out = wavelet_decode(f2, f3, f0, p)
    assert out.shape == (4, 4, c)
    np.testing.assert_array_equal(out.data, 0.0)


def test_decode_gradient_through_all_inputs():
    rng = np.random.default_rng(12)
    p = init_wavelet_decode_params(8, rng)
    with default_dtype(np.float64):
        f2 = Tensor(rng.normal(size=(2, 2, 8)))
        f3 = Tensor(rng.normal(size=(2, 2, 8)))
        w = Tensor(rng.normal(size=(4, 4, 8)))
    x0 = rng.normal(size=(4, 4, 8))
    assert grad_check(lambda x: ops.sum(ops.mul(wavelet_decode(f2, f3, x, p), w)), x0) < 1e-5
