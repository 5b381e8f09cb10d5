import itertools

import numpy as np
import pytest
import torch

from nlcodec import tensor as T
from nlcodec.ccn import group_index
from nlcodec.errors import DimensionError
from nlcodec.nonlocal_block import (
    NonlocalAttention,
    ProxyWeights,
    confidence,
    nonlocal_context,
    nonlocal_rep,
    nonlocal_weight_plane,
    nonlocal_weights,
    proxy_distance,
    spatial_mask,
)


def brute(y, wd):
    """Loop oracle: rep, conf and valid for an (M, H, W) numpy block."""
    m, h, w = y.shape
    rep, conf, valid = np.zeros(y.shape), np.zeros(y.shape), np.zeros(y.shape, dtype=bool)
    for r, p, q in np.ndindex(m, h, w):
        cands = [(u, v) for u, v in itertools.product(range(h), range(w)) if u + v < p + q]
        if not cands:
            continue
        d = np.array([sum(wd[r, j] * (y[j, p, q] - y[j, u, v]) ** 2 for j in range(r)) for u, v in cands])
        e = np.exp(-d)
        ws = e / e.sum()
        rep[r, p, q] = sum(wi * y[r, u, v] for wi, (u, v) in zip(ws, cands))
        conf[r, p, q] = float(ws @ d)
        valid[r, p, q] = True
    return rep, conf, valid


def lower(m, rng):
    return np.tril(rng.uniform(0.1, 1.0, size=(m, m)), -1)


def test_proxy_distance_examples():
    wd = torch.zeros(3, 3, dtype=T.DTYPE)
    wd[2, :2] = 0.5
    y = torch.zeros(3, 1, 2, dtype=T.DTYPE)
    y[:2, 0, 0] = torch.tensor([1.0, 2.0])
    y[:2, 0, 1] = torch.tensor([3.0, 0.0])
    assert proxy_distance(y, 2, (0, 0), (0, 1), wd).item() == 4.0
    assert proxy_distance(y, 2, (0, 1), (0, 1), wd).item() == 0.0
    assert proxy_distance(y, 0, (0, 0), (0, 1), wd).item() == 0.0


def test_spatial_mask_examples():
    assert all(spatial_mask(0, 0, u, v) == 0 for u in range(3) for v in range(3))
    assert spatial_mask(1, 1, 1, 1) == 0
    assert spatial_mask(1, 1, 0, 1) == 1
    plane = [[spatial_mask(1, 1, u, v) for v in range(3)] for u in range(3)]
    assert plane == [[1, 1, 0], [1, 0, 0], [0, 0, 0]]


def test_weights_examples():
    ctx = torch.tensor([[True, True, False]])
    w, valid = nonlocal_weights(torch.tensor([[1.0, 2.0, 0.0]], dtype=T.DTYPE), ctx)
    expected = np.exp([-1.0, -2.0]) / np.exp([-1.0, -2.0]).sum()
    np.testing.assert_allclose(w[0, :2].numpy(), expected, atol=1e-15)
    np.testing.assert_allclose(w[0, :2].numpy(), [0.7311, 0.2689], atol=5e-5)
    assert w[0, 2].item() == 0.0 and valid.item()
    w, _ = nonlocal_weights(torch.tensor([[3.0, 3.0, 9.0]], dtype=T.DTYPE), ctx)
    assert w[0].tolist() == [0.5, 0.5, 0.0]
    w, valid = nonlocal_weights(torch.ones(1, 3, dtype=T.DTYPE), torch.zeros(1, 3, dtype=torch.bool))
    assert not valid.item() and torch.all(w == 0)


def test_large_distances_do_not_underflow():
    ctx = torch.ones(1, 2, dtype=torch.bool)
    w, _ = nonlocal_weights(torch.tensor([[2000.0, 2001.0]], dtype=T.DTYPE), ctx)
    assert torch.isfinite(w).all()
    assert w.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for dims in [(1, 2, 2), (3, 3, 4), (4, 2, 5)]:
        y = rng.random(dims)
        wd = lower(dims[0], rng)
        out = nonlocal_context(torch.as_tensor(y)[None], torch.as_tensor(wd))
        rep, conf, valid = brute(y, wd)
        np.testing.assert_allclose(out.rep[0].numpy(), rep, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.conf[0].numpy(), conf, rtol=0, atol=1e-12)
        assert np.array_equal(out.valid[0].numpy(), valid)


def test_two_by_two_plane_rep_at_corner():
    # channel 0 sets the proxy distances: 0 to (0,0), 1 to (0,1), 4 to (1,0)
    y = torch.zeros(2, 2, 2, dtype=T.DTYPE)
    y[0] = torch.tensor([[0.0, 1.0], [2.0, 0.0]], dtype=T.DTYPE)
    y[1] = torch.tensor([[0.2, 0.4], [0.8, 0.0]], dtype=T.DTYPE)
    wd = torch.zeros(2, 2, dtype=T.DTYPE)
    wd[1, 0] = 1.0
    e = np.exp([-0.0, -1.0, -4.0])
    want_rep = (e @ [0.2, 0.4, 0.8]) / e.sum()
    want_conf = (e @ [0.0, 1.0, 4.0]) / e.sum()
    assert nonlocal_rep(y, 1, wd)[1, 1].item() == pytest.approx(want_rep, abs=1e-14)
    assert confidence(y, 1, wd)[1, 1].item() == pytest.approx(want_conf, abs=1e-14)


def test_first_position_and_first_channel():
    rng = np.random.default_rng(1)
    y = torch.as_tensor(rng.random((3, 4, 4)))
    wd = torch.as_tensor(lower(3, rng))
    out = nonlocal_context(y[None], wd)
    assert torch.all(out.rep[0, :, 0, 0] == 0) and torch.all(out.conf[0, :, 0, 0] == 0)
    assert not out.valid[0, :, 0, 0].any()
    # r = 0 has no proxy channels: uniform weights and zero confidence
    assert torch.all(out.conf[0, 0] == 0)
    assert out.rep[0, 0, 1, 1].item() == pytest.approx(y[0, :2, :2].flatten()[:3].mean().item())


def test_constant_plane_and_identical_proxies():
    rng = np.random.default_rng(2)
    y = torch.as_tensor(rng.random((3, 4, 5)))
    y[2] = 0.37
    wd = torch.as_tensor(lower(3, rng))
    out = nonlocal_context(y[None], wd)
    v = out.valid[0, 2]
    assert torch.allclose(out.rep[0, 2][v], torch.full_like(out.rep[0, 2][v], 0.37), rtol=0, atol=1e-15)
    z = torch.as_tensor(rng.random((3, 4, 5)))
    z[:2] = torch.as_tensor(rng.random((2, 1, 1)))
    assert torch.all(confidence(z, 2, wd) == 0)


def test_single_candidate_confidence():
    y = torch.tensor([[[1.0, 3.0]], [[0.5, 0.9]]], dtype=T.DTYPE)
    wd = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=T.DTYPE)
    assert confidence(y, 1, wd)[0, 1].item() == 4.0
    assert nonlocal_rep(y, 1, wd)[0, 1].item() == 0.5


def test_weight_planes_sum_to_one_and_respect_mask():
    rng = np.random.default_rng(3)
    y = torch.as_tensor(rng.random((3, 4, 4)))
    wd = torch.as_tensor(lower(3, rng))
    for r, p, q in np.ndindex(3, 4, 4):
        plane = nonlocal_weight_plane(y, r, (p, q), wd)
        mask = torch.tensor([[spatial_mask(p, q, u, v) for v in range(4)] for u in range(4)], dtype=torch.bool)
        assert torch.all(plane[~mask] == 0)
        if mask.any():
            assert plane.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_convexity_and_translation_invariance():
    rng = np.random.default_rng(4)
    y = torch.as_tensor(rng.random((4, 5, 5)))
    wd = torch.as_tensor(lower(4, rng))
    out = nonlocal_context(y[None], wd)
    for r, p, q in np.ndindex(4, 5, 5):
        if p + q == 0:
            continue
        ctx = torch.stack([y[r, u, v] for u in range(5) for v in range(5) if u + v < p + q])
        assert ctx.min() - 1e-12 <= out.rep[0, r, p, q] <= ctx.max() + 1e-12
    shifted = nonlocal_context(y[None] + 2.5, wd)
    torch.testing.assert_close(shifted.conf, out.conf, rtol=0, atol=1e-12)
    torch.testing.assert_close(shifted.rep, out.rep + 2.5 * out.valid, rtol=0, atol=1e-12)


def test_block_shape_check():
    with pytest.raises(DimensionError):
        nonlocal_rep(torch.zeros(1, 2, 3, 3, dtype=T.DTYPE), 0, torch.zeros(2, 2, dtype=T.DTYPE))


def test_proxy_weights_init():
    w = ProxyWeights(4)().detach().numpy()
    for r in range(4):
        np.testing.assert_allclose(w[r, :r], 1 / (r + 1), rtol=1e-15)
        assert np.all(w[r, r:] == 0)


def test_attention_gradients_wrt_proxy_weights_and_codes():
    torch.manual_seed(0)
    att = NonlocalAttention(3, local_blocks=2, k_s=1)
    y = torch.rand(1, 3, 4, 4, dtype=T.DTYPE)
    probe = torch.randn(1, 9, 4, 4, dtype=T.DTYPE)
    log_w0 = att.proxy.log_w.detach().clone()
    f = lambda lw: (torch.func.functional_call(att, {"proxy.log_w": lw}, (y,)) * probe).sum()
    assert T.finite_diff_check(f, log_w0) < 1e-4
    assert T.finite_diff_check(lambda v: (att(v) * probe).sum(), y) < 1e-4


def test_attention_output_layout():
    torch.manual_seed(1)
    att = NonlocalAttention(2, local_blocks=3, k_s=1)
    y = torch.rand(1, 2, 3, 3, dtype=T.DTYPE)
    out = att(y)
    assert out.shape == (1, 8, 3, 3) and att.out_blocks == 4
    local = att.local(y)
    assert torch.equal(out[:, :6], local)
    # the first anti-diagonal carries no non-local estimate
    assert torch.all(out[0, 6:, 0, 0] == 0)
    att.force_alpha = 1.0
    rep = nonlocal_context(y, att.proxy()).rep
    assert torch.equal(att(y)[:, 6:], rep)
    att.use_nonlocal = False
    assert torch.all(att(y)[:, 6:] == 0)
    with pytest.raises(DimensionError):
        att(torch.rand(1, 3, 3, 3, dtype=T.DTYPE))


def test_attention_is_causal():
    torch.manual_seed(2)
    att = NonlocalAttention(3, local_blocks=2, k_s=1)
    rng = np.random.default_rng(5)
    dims = (3, 4, 5)
    y = torch.as_tensor(rng.random(dims))[None]
    base = att(y)
    g = torch.as_tensor(group_index(dims))
    for k in range(sum(dims) - 2):
        y2 = y.clone()
        y2[0][g >= k] = torch.as_tensor(rng.random(int((g >= k).sum())))
        diff = (att(y2) - base).reshape(3, 3, *dims[1:]).abs().amax(dim=0)
        assert diff[g <= k].max().item() <= 1e-12
