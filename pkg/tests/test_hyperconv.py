import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import contract_bank, direct_conv2d, finite_difference_grad, relative_error
from seq2seq_mri.errors import ShapeError
from seq2seq_mri.generator.hyperconv import HyperConv, HyperConvSpec, hyperconv_param_count, one_hot


def test_hand_contraction_example():
    layer = HyperConv(code_dim=1, in_channels=1, out_channels=1, kernel_size=1, bias=False, bank_dim=2).double()
    with torch.no_grad():
        layer.bank.copy_(torch.tensor([2.0, 3.0], dtype=torch.float64).view(1, 1, 1, 1, 2))
        layer.mlp.weight.zero_()
        layer.mlp.bias.copy_(torch.tensor([0.5, 0.5], dtype=torch.float64))
    s = torch.ones(1, dtype=torch.float64)
    assert layer.kernel(s).item() == pytest.approx(2.5)
    x = torch.full((1, 1, 1, 1), 4.0, dtype=torch.float64)
    assert layer(x, s).item() == pytest.approx(10.0)


def test_zero_bank_annihilates():
    layer = HyperConv(3, 2, 4)
    with torch.no_grad():
        layer.bank.zero_()
    y = layer(torch.randn(2, 2, 6, 6), one_hot(1, 3))
    assert torch.count_nonzero(y) == 0


def test_param_count_formula():
    assert hyperconv_param_count(HyperConvSpec((64, 64, 3, 3), 4, 64)) == (2_359_296, 320, 2_359_616)
    assert hyperconv_param_count(HyperConvSpec((1, 1, 1, 1), 1, 1)) == (1, 2, 3)
    layer = HyperConv(4, 8, 5, bank_dim=6, bias=True)
    assert sum(p.numel() for p in layer.parameters()) == hyperconv_param_count(layer.spec)[2]
    with pytest.raises(ShapeError):
        HyperConvSpec((0, 1, 3, 3), 1, 1)


def test_shape_errors():
    layer = HyperConv(3, 2, 4)
    with pytest.raises(ShapeError):
        layer(torch.zeros(1, 3, 4, 4), one_hot(0, 3))
    with pytest.raises(ShapeError):
        layer(torch.zeros(1, 2, 4, 4), torch.zeros(4))
    with pytest.raises(ValueError):
        one_hot(3, 3)


specs = st.tuples(
    st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3]),
    st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1),
)


@settings(max_examples=100, deadline=None)
@given(specs)
def test_slice_selection_identity(spec):
    """With f = e_k the layer is an ordinary conv with kernel bank[..., k]."""
    out_c, in_c, k, code_dim, bank_dim, seed = spec
    torch.manual_seed(seed)
    layer = HyperConv(code_dim, in_c, out_c, k, bias=False, bank_dim=bank_dim).double()
    sel = seed % bank_dim
    with torch.no_grad():  # mlp designed to emit e_sel for any code
        layer.mlp.weight.zero_()
        layer.mlp.bias.zero_()
        layer.mlp.bias[sel] = 1.0
    x = torch.randn(1, in_c, 5, 5, dtype=torch.float64)
    s = one_hot(seed % code_dim, code_dim, torch.float64)
    got = layer(x, s)[0].detach().numpy()
    ref = direct_conv2d(x[0].numpy(), layer.bank[..., sel].detach().numpy(), padding=(k - 1) // 2)
    np.testing.assert_allclose(got, ref, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(specs, st.floats(-3, 3), st.floats(-3, 3))
def test_kernel_linearity(spec, alpha, beta):
    out_c, in_c, k, code_dim, bank_dim, seed = spec
    torch.manual_seed(seed)
    layer = HyperConv(code_dim, in_c, out_c, k, bank_dim=bank_dim).double()
    f1 = torch.randn(bank_dim, dtype=torch.float64)
    f2 = torch.randn(bank_dim, dtype=torch.float64)
    with torch.no_grad():
        lhs = layer.kernel_from_embedding(alpha * f1 + beta * f2)
        rhs = alpha * layer.kernel_from_embedding(f1) + beta * layer.kernel_from_embedding(f2)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-6)
        ref = contract_bank(layer.bank.numpy(), f1.numpy())
        np.testing.assert_allclose(layer.kernel_from_embedding(f1).numpy(), ref, atol=1e-12)


def test_batched_codes_match_per_sample():
    torch.manual_seed(0)
    layer = HyperConv(3, 2, 3, bank_dim=4, padding_mode="reflect").double()
    x = torch.randn(4, 2, 7, 7, dtype=torch.float64)
    codes = torch.stack([one_hot(k % 3, 3, torch.float64) for k in range(4)])
    y = layer(x, codes)
    for b in range(4):
        torch.testing.assert_close(y[b], layer(x[b:b + 1], codes[b])[0])


def test_output_linear_in_embedding():
    torch.manual_seed(1)
    layer = HyperConv(2, 2, 2, bias=False, bank_dim=3).double()
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    f1, f2 = torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)

    def out(f):
        return torch.nn.functional.conv2d(x, layer.kernel_from_embedding(f), padding=1)

    with torch.no_grad():
        torch.testing.assert_close(out(0.3 * f1 + 0.7 * f2), 0.3 * out(f1) + 0.7 * out(f2))


def test_gradients_match_finite_differences():
    torch.manual_seed(2)
    layer = HyperConv(3, 2, 3, bank_dim=4, bias=True).double()
    x = torch.randn(2, 2, 6, 6, dtype=torch.float64, requires_grad=True)
    s = one_hot(1, 3, torch.float64)
    w = torch.randn(2, 3, 6, 6, dtype=torch.float64)

    def loss():
        return (layer(x, s) * w).sum()

    loss().backward()
    for name, p in [*layer.named_parameters(), ("input", x)]:
        with torch.no_grad():
            numeric = finite_difference_grad(loss, p)
        err = relative_error(p.grad.reshape(-1).numpy(), numeric)
        assert err < 1e-4, (name, err)
