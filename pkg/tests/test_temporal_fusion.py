import numpy as np
import pytest
import torch
import torch.nn.functional as F

from stnet.errors import ShapeError
from stnet.temporal_fusion import TFF, coarse_difference, tff_backward_check, tff_forward


def randomize(module, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
    return module


def test_difference_basic():
    x = torch.randn(4, 5, 5)
    assert torch.equal(coarse_difference(x, x), torch.zeros_like(x))
    assert torch.equal(coarse_difference(torch.ones(2, 3, 3), torch.zeros(2, 3, 3)), torch.ones(2, 3, 3))


def test_difference_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    expected = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        expected[idx] = a[idx] - b[idx]
    got = coarse_difference(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    assert np.array_equal(got, expected)


def test_difference_is_signed():
    assert coarse_difference(torch.zeros(1), torch.ones(1)).item() == -1


def test_difference_shape_mismatch():
    with pytest.raises(ShapeError):
        coarse_difference(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


def test_zero_parameters_give_half_gates_and_zero_output():
    tff = TFF(4)
    with torch.no_grad():
        for p in tff.parameters():
            p.zero_()
    r1, r2 = torch.randn(1, 4, 6, 6), torch.randn(1, 4, 6, 6)
    w1, w2 = tff.gates(r1, r2)
    assert torch.all(w1 == 0.5) and torch.all(w2 == 0.5)
    assert torch.all(tff(r1, r2) == 0)


def test_equal_inputs_equal_gates():
    tff = randomize(TFF(4))
    tff.fuse2.load_state_dict(tff.fuse1.state_dict())
    tff.gate2.load_state_dict(tff.gate1.state_dict())
    r = torch.randn(2, 4, 5, 5)
    w1, w2 = tff.gates(r, r.clone())
    assert torch.equal(w1, w2)


def test_gates_strictly_inside_unit_interval():
    tff = randomize(TFF(8), seed=2)
    w1, w2 = tff.gates(torch.randn(2, 8, 6, 6), torch.randn(2, 8, 6, 6))
    for w in (w1, w2):
        assert torch.all(w > 0) and torch.all(w < 1)


def _dsconv_ref(x, m):
    """Straight-line depthwise -> pointwise -> batch-stat BN -> ReLU."""
    c = x.shape[1]
    y = F.conv2d(x, m.depthwise.weight, padding=1, groups=c)
    y = F.conv2d(y, m.pointwise.weight)
    mean = y.mean(dim=(0, 2, 3), keepdim=True)
    var = y.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    y = (y - mean) / torch.sqrt(var + m.bn.eps)
    y = y * m.bn.weight[None, :, None, None] + m.bn.bias[None, :, None, None]
    return torch.clamp(y, min=0)


def test_forward_matches_straight_line_reference():
    tff = randomize(TFF(6), seed=1).double().train()
    r1 = torch.randn(2, 6, 7, 7, dtype=torch.float64)
    r2 = torch.randn(2, 6, 7, 7, dtype=torch.float64)
    rc = r1 - r2
    rc1 = _dsconv_ref(torch.cat([r1, rc], 1), tff.fuse1)
    rc2 = _dsconv_ref(torch.cat([r2, rc], 1), tff.fuse2)
    w1 = 1 / (1 + torch.exp(-F.conv2d(rc1, tff.gate1.weight, tff.gate1.bias)))
    w2 = 1 / (1 + torch.exp(-F.conv2d(rc2, tff.gate2.weight, tff.gate2.bias)))
    expected = _dsconv_ref(torch.cat([w1 * r1, w2 * r2], 1), tff.fuse_out)
    got = tff(r1, r2)
    assert got.shape == r1.shape
    assert torch.allclose(got, expected, atol=1e-10)


def test_unbatched_forward_shape():
    tff = TFF(4).eval()
    out = tff_forward(torch.randn(4, 8, 8), torch.randn(4, 8, 8), tff)
    assert out.shape == (4, 8, 8)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        TFF(4)(torch.randn(1, 5, 4, 4), torch.randn(1, 5, 4, 4))


def test_backward_check_passes():
    tff = randomize(TFF(4), seed=5)
    gen = torch.Generator().manual_seed(0)
    r1, r2 = torch.randn(4, 4, 4, generator=gen), torch.randn(4, 4, 4, generator=gen)
    err = tff_backward_check(r1, r2, tff, 1e-5)
    assert err < 1e-4


def test_backward_check_zero_inputs_finite():
    tff = randomize(TFF(4), seed=5)
    err = tff_backward_check(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4), tff, 1e-5)
    assert np.isfinite(err)


def test_backward_check_deterministic():
    tff = randomize(TFF(4), seed=6)
    r1, r2 = torch.randn(4, 4, 4), torch.randn(4, 4, 4)
    assert tff_backward_check(r1, r2, tff) == tff_backward_check(r1, r2, tff)
