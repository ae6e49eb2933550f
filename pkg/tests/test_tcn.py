"""Causal TCN: residual identity, strict causality, receptive field arithmetic."""

import numpy as np
import pytest

from eegencoder import gradcheck
from eegencoder.tcn import TcnBlock, TcnStack, causal_conv1d, tcn_forward
from eegencoder.tensor import ContractError, DimensionError, Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_zero_weights_make_block_identity():
    block = TcnBlock(6, 4, 1, _rng(1))
    block.conv1_w = Tensor(np.zeros((6, 6, 4)), requires_grad=True)
    block.conv2_w = Tensor(np.zeros((6, 6, 4)), requires_grad=True)
    x = Tensor(_rng(2).standard_normal((2, 9, 6)))
    assert np.array_equal(block(x).data, x.data)


def test_causal_conv1d_matches_direct_convolution():
    rng = _rng(3)
    x = rng.standard_normal((1, 8, 2))
    w = rng.standard_normal((3, 2, 4))
    dilation = 2
    out = causal_conv1d(Tensor(x), Tensor(w), dilation).data
    expected = np.zeros((1, 8, 3))
    for t in range(8):
        for o in range(3):
            acc = 0.0
            for u in range(4):
                src = t - (3 - u) * dilation
                if src >= 0:
                    acc += x[0, src] @ w[o, :, u]
            expected[0, t, o] = acc
    assert np.allclose(out, expected, atol=1e-12)


def test_strict_causality_exact():
    rng = _rng(4)
    stack = TcnStack(8, 2, 4, rng)
    x = rng.standard_normal((2, 12, 8))
    base = tcn_forward(Tensor(x), stack).data
    for t in (3, 7, 11):
        perturbed = x.copy()
        perturbed[:, t, :] += rng.standard_normal(8)
        shifted = tcn_forward(Tensor(perturbed), stack).data
        assert np.array_equal(base[:, :t], shifted[:, :t])
        assert not np.array_equal(base[:, t], shifted[:, t])


@pytest.mark.parametrize("kernel,blocks,length", [(2, 1, 1), (3, 2, 5), (4, 3, 11), (5, 1, 2)])
def test_output_length_matches_input(kernel, blocks, length):
    stack = TcnStack(4, blocks, kernel, _rng(5))
    out = tcn_forward(Tensor(_rng(6).standard_normal((1, length, 4))), stack)
    assert out.shape == (1, length, 4)


def test_receptive_field_formula():
    stack = TcnStack(8, 2, 4, _rng(7))
    assert stack.receptive_field == 19  # 1 + 2*(4-1)*(2^2-1)
    assert TcnStack(8, 3, 2, _rng(7)).receptive_field == 1 + 2 * 1 * 7
    assert [b.dilation for b in TcnStack(8, 3, 4, _rng(7)).blocks] == [1, 2, 4]


def test_receptive_field_coverage_at_last_step():
    rng = _rng(8)
    stack = TcnStack(8, 2, 4, rng)
    rf = stack.receptive_field
    t_len = rf + 6
    x = rng.standard_normal((1, t_len, 8))
    base = tcn_forward(Tensor(x), stack).data[:, -1, :]

    inside = x.copy()
    inside[:, t_len - rf, :] += 1.0  # oldest input still inside the field
    assert not np.array_equal(tcn_forward(Tensor(inside), stack).data[:, -1, :], base)

    outside = x.copy()
    outside[:, t_len - rf - 1, :] += 1.0  # one step beyond the field
    assert np.array_equal(tcn_forward(Tensor(outside), stack).data[:, -1, :], base)


def test_default_config_field_fits_window():
    # k=4, two blocks -> field 19 covers most of the projector's 22 steps
    stack = TcnStack(32, 2, 4, _rng(9))
    assert stack.receptive_field == 19 <= 22


def test_shape_validation():
    with pytest.raises(DimensionError):
        causal_conv1d(Tensor(np.zeros((1, 5, 3))), Tensor(np.zeros((2, 4, 3))))
    with pytest.raises(ContractError):
        TcnStack(4, 0, 3, _rng(10))


def test_tcn_gradient_check():
    assert gradcheck.run(["tcn_forward"])["tcn_forward"] < gradcheck.TOLERANCE
