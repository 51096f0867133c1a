# src/tests/test_lge.py

import numpy as np
import pytest

from src.models import ops
from src.models.lge import (
    LgeBlockParams,
    LgeParams,
    LgeVariant,
    build_variant,
    init_lge_params,
    lge_forward,
)
from src.models.tensor import Tensor, tensor
from src.utils.context import default_dtype
from src.utils.exceptions import DimensionError
from src.utils.grad_check import grad_check


def _input(shape, seed=0):
    return tensor(np.random.default_rng(seed).normal(size=shape), dtype=np.float64)


def _lge(channels, variant, iterations=1, seed=0, num_heads=2):
    with default_dtype(np.float64):
        return init_lge_params(channels, variant, iterations, np.random.default_rng(seed), num_heads=num_heads)


# ============ 接线 ============

def test_variant_g_is_two_parallel_branches_with_concat():
    w = build_variant("G")
    assert w.num_branches == 2
    assert w.num_merges == 1
    assert w.merge == "concat"
    assert w.is_parallel


def test_variant_a_single_branch_no_merge():
    w = build_variant(LgeVariant.A)
    assert (w.num_branches, w.num_merges) == (1, 0)


def test_variant_d_serial_chain_of_three():
    w = build_variant(LgeVariant.D)
    assert w.chain_length == 3
    assert not w.is_parallel


def test_only_e_is_flagged_unstable():
    flagged = [v for v in LgeVariant if build_variant(v).unstable]
    assert flagged == [LgeVariant.E]


def test_baseline_has_no_nodes():
    w = build_variant(LgeVariant.A0)
    assert w.nodes == []
    assert w.edges == [("input", "output")]


def test_g_edges():
    assert set(build_variant("G").edges) == {
        ("input", "wavelet_encode"),
        ("input", "hybrid_encode"),
        ("wavelet_encode", "concat"),
        ("hybrid_encode", "concat"),
        ("concat", "wavelet_decode"),
        ("wavelet_decode", "output"),
    }


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        build_variant("H")


# ============ 前向 ============

@pytest.mark.parametrize("variant", ["A", "B", "C", "D", "E", "F", "G"])
def test_every_variant_preserves_shape(variant):
    x = _input((8, 8, 8))
    assert lge_forward(x, _lge(8, variant)).shape == x.shape


def test_default_configuration_shape():
    x = _input((8, 8, 16))
    params = _lge(16, "G", iterations=4, num_heads=4)
    assert params.iterations == 4
    assert lge_forward(x, params).shape == (8, 8, 16)


def test_baseline_is_identity():
    x = _input((4, 4, 8))
    assert lge_forward(x, _lge(8, "A0")) is x


def test_g_with_silent_attention_equals_a():
    """注意力分支输出为 0 时 G 与只有小波的 A 相同"""
    g = _lge(8, "G")
    block = g.blocks[0]
    block.attention.downsample_kernel.assign(np.zeros(block.attention.downsample_kernel.shape))
    a = LgeParams(variant=LgeVariant.A, blocks=[LgeBlockParams(encode=block.encode, decode=block.decode)])
    x = _input((8, 8, 8), seed=3)
    np.testing.assert_allclose(lge_forward(x, g).data, lge_forward(x, a).data, atol=1e-12)


def test_forward_is_deterministic():
    x = _input((8, 8, 8))
    params = _lge(8, "G", iterations=2)
    np.testing.assert_array_equal(lge_forward(x, params).data, lge_forward(x, params).data)


def test_parameter_count_linear_in_iterations():
    one = _lge(8, "G", iterations=1).num_parameters()
    four = _lge(8, "G", iterations=4).num_parameters()
    assert four == 4 * one


def test_iterations_must_be_positive():
    with pytest.raises(DimensionError):
        init_lge_params(8, "G", iterations=0)


@pytest.mark.parametrize("shape", [(8, 8, 6), (7, 8, 8)])
def test_contract_errors(shape):
    params = _lge(8, "G")
    with pytest.raises(DimensionError):
        lge_forward(tensor(np.zeros(shape)), params)


def test_variant_e_needs_extents_divisible_by_four():
    with pytest.raises(DimensionError):
        lge_forward(_input((6, 6, 8)), _lge(8, "E"))


def test_variant_must_match_params():
    with pytest.raises(ValueError):
        lge_forward(_input((4, 4, 8)), _lge(8, "G"), variant="A")


def test_composed_block_gradient():
    params = _lge(8, "G", iterations=1)
    with default_dtype(np.float64):
        w = Tensor(np.random.default_rng(1).normal(size=(4, 4, 8)))
    x0 = np.random.default_rng(2).normal(size=(4, 4, 8))
    assert grad_check(lambda x: ops.sum(ops.mul(lge_forward(x, params), w)), x0) < 1e-5
