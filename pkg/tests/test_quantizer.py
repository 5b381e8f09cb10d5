import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nlcodec import tensor as T
from nlcodec.errors import DimensionError
from nlcodec.quantizer import (
    Quantizer,
    centers,
    dequantize,
    nearest_index,
    quant_loss,
    quantize,
    straight_through,
)


def test_centers_from_zero_sigma():
    assert centers(torch.zeros(4, dtype=T.DTYPE)).tolist() == [1.0, 2.0, 3.0, 4.0]


def test_centers_at_initialization():
    q = Quantizer(3, levels=8)
    omega = q.centers().detach().numpy()
    expected = np.tile(np.arange(1, 9) / 9.0, (3, 1))
    np.testing.assert_allclose(omega, expected, rtol=0, atol=1e-14)
    assert (omega > 0).all() and (omega < 1).all()


def test_nearest_center_example():
    omega = torch.tensor([[0.1, 0.2, 0.35, 0.7]], dtype=T.DTYPE)
    z = torch.tensor([0.30], dtype=T.DTYPE).reshape(1, 1, 1)
    idx, vals = quantize(z, omega)
    assert idx.item() == 2
    assert vals.item() == pytest.approx(0.35, abs=1e-15)
    # (0.35 - 0.30)^2 computed by hand
    assert quant_loss(vals, z).item() == pytest.approx(0.0025, abs=1e-12)


def test_quant_loss_at_init_centers():
    omega = Quantizer(1).centers()
    z = torch.tensor([0.3], dtype=T.DTYPE).reshape(1, 1, 1)
    idx, vals = quantize(z, omega)
    # nearest of i/9 to 0.3 is 3/9, distance 1/30
    assert idx.item() == 2
    assert quant_loss(vals, z).item() == pytest.approx((1 / 30) ** 2, abs=1e-14)


def test_ties_go_to_lower_index():
    omega = torch.tensor([[0.25, 0.75]], dtype=T.DTYPE)
    z = torch.full((1, 1, 1), 0.5, dtype=T.DTYPE)
    assert nearest_index(z, omega).item() == 0


def test_shape_errors():
    omega = torch.rand(2, 8, dtype=T.DTYPE)
    with pytest.raises(DimensionError):
        nearest_index(torch.zeros(3, 4, 4, dtype=T.DTYPE), omega)
    with pytest.raises(DimensionError):
        quant_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_straight_through_forward_and_backward():
    z = torch.tensor([0.3, 0.62], dtype=T.DTYPE, requires_grad=True)
    v = torch.tensor([0.35, 0.6], dtype=T.DTYPE)
    out = straight_through(z, v)
    assert torch.equal(out.detach(), v)
    (g,) = T.backward((out * torch.tensor([2.0, -3.0], dtype=T.DTYPE)).sum(), [z])
    assert g.tolist() == [2.0, -3.0]


def test_straight_through_composite_gradient():
    # the backward pass should match finite differences of the surrogate that
    # treats quantization as the identity shifted onto the chosen centers
    g = torch.Generator().manual_seed(0)
    z0 = torch.rand(2, 3, 3, generator=g, dtype=T.DTYPE)
    omega = Quantizer(2).centers().detach()
    _, v = quantize(z0, omega)
    w = torch.randn(2, 3, 3, generator=g, dtype=T.DTYPE)
    head = lambda y, z: (torch.tanh(y * w + z) ** 2).sum()
    z = z0.clone().requires_grad_(True)
    (analytic,) = T.backward(head(straight_through(z, v), z), [z])
    numeric = torch.empty_like(z0)
    eps = 1e-5
    for i in range(z0.numel()):
        d = torch.zeros_like(z0).flatten()
        d[i] = eps
        d = d.reshape(z0.shape)
        up = head(v + d, z0 + d).item()
        down = head(v - d, z0 - d).item()
        numeric.view(-1)[i] = (up - down) / (2 * eps)
    err = ((analytic - numeric).abs() / analytic.abs().clamp(min=1.0)).max().item()
    assert err < 1e-4


def test_qloss_reaches_sigma_only():
    q = Quantizer(2)
    z = torch.rand(1, 2, 4, 4, dtype=T.DTYPE, requires_grad=True)
    _, y, qloss = q(z)
    gz, gs = T.backward(qloss, [z, q.sigma])
    assert torch.count_nonzero(gz) == 0
    assert torch.count_nonzero(gs) > 0
    (gz,) = T.backward(y.sum(), [z])
    assert torch.equal(gz, torch.ones_like(z))


def test_eval_mode_returns_centers():
    q = Quantizer(2)
    z = torch.rand(1, 2, 3, 3, dtype=T.DTYPE)
    idx, y, _ = q(z, training=False)
    assert torch.equal(y, dequantize(idx, q.centers().detach()))
    assert np.array_equal(q.quantize(z), idx.numpy())


def test_centers_converge_to_data_modes():
    torch.manual_seed(0)
    q = Quantizer(1, levels=2)
    g = torch.Generator().manual_seed(1)
    data = torch.cat([0.2 + 0.01 * torch.randn(500, generator=g), 0.6 + 0.01 * torch.randn(500, generator=g)])
    z = data.to(T.DTYPE).reshape(1, 1, 1000)
    opt = torch.optim.Adam([q.sigma], lr=0.05)
    for _ in range(300):
        opt.zero_grad()
        _, _, loss = q(z)
        loss.backward()
        opt.step()
    np.testing.assert_allclose(q.centers().detach().numpy()[0], [0.2, 0.6], atol=0.01)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_centers_monotone_and_quantize_idempotent(seed):
    rng = np.random.default_rng(seed)
    sigma = torch.as_tensor(rng.normal(-2, 1.5, size=(3, 8)))
    omega = centers(sigma)
    assert (torch.diff(omega, dim=-1) > 0).all()
    z = torch.as_tensor(rng.uniform(0, omega.max().item() + 0.1, size=(3, 5, 5)))
    idx, vals = quantize(z, omega)
    idx2, vals2 = quantize(vals, omega)
    assert torch.equal(idx, idx2) and torch.equal(vals, vals2)


def test_dequantize_matches_loop():
    rng = np.random.default_rng(4)
    omega = torch.as_tensor(np.sort(rng.random((3, 8)), axis=1))
    idx = torch.as_tensor(rng.integers(0, 8, size=(2, 3, 4, 5)))
    out = dequantize(idx, omega)
    for b, r, p, q in np.ndindex(2, 3, 4, 5):
        assert out[b, r, p, q] == omega[r, idx[b, r, p, q]]


def test_init_is_interior_for_any_level_count():
    for levels in (1, 2, 8, 64):
        omega = Quantizer(1, levels).centers().detach().numpy()[0]
        assert omega[0] == pytest.approx(1 / (levels + 1))
        assert omega[-1] == pytest.approx(levels / (levels + 1))
        assert omega[-1] < 1.0
        assert np.allclose(np.diff(omega), 1 / (levels + 1), rtol=0, atol=1e-12)
