import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrg.config import LossConfig, desk_config
from cfrg.errors import NumericError
from cfrg.model import CFRG
from cfrg.seghead import SegHead, bce_loss, guide, total_loss
from oracles import bce_loop, central_difference

SHAPES = ((1, 4, 8, 8), (1, 6, 4, 4), (1, 8, 2, 2))


def _feats(rng):
    return [torch.tensor(rng.normal(size=s)) for s in SHAPES]


def _weights(value):
    return [torch.full((s[0], *s[2:]), float(value), dtype=torch.float64) for s in SHAPES]


def test_full_weights_nullify(rng):
    g = guide(_feats(rng), _weights(1), _weights(1))
    assert all(torch.all(t == 0) for t in g.in_s)


def test_zero_weights_pass_through(rng):
    f = _feats(rng)
    g = guide(f, _weights(0), _weights(0))
    assert all(torch.equal(a, b) for a, b in zip(g.in_s, f))


def test_half_weights_quarter_value():
    f = [torch.full(s, 4.0, dtype=torch.float64) for s in SHAPES]
    g = guide(f, _weights(0.5), _weights(0.5))
    assert all(torch.allclose(t, torch.ones_like(t)) for t in g.in_s)


def test_hint_disabled_uses_in_t(rng):
    f = _feats(rng)
    g = guide(f, _weights(0.3), _weights(0.9), hint_enabled=False)
    assert all(torch.equal(a, b) for a, b in zip(g.in_s, g.in_t))


def test_guide_shape_mismatch(rng):
    w = _weights(0)
    w[1] = torch.zeros(1, 3, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        guide(_feats(rng), w, None)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_guide_is_multiplicative(seed, scale):
    rng = np.random.default_rng(seed)
    f = _feats(rng)
    w_d = [torch.tensor(rng.random((s[0], *s[2:]))) for s in SHAPES]
    w_r = [torch.tensor(rng.random((s[0], *s[2:]))) for s in SHAPES]
    a = guide(f, w_d, w_r)
    b = guide([scale * t for t in f], w_d, w_r)
    for x, y in zip(a.in_t, b.in_t):
        assert torch.allclose(scale * x, y, atol=1e-12)


def test_seg_output_at_input_resolution():
    torch.manual_seed(0)
    head = SegHead((4, 6, 8), width=8).eval()
    f = [torch.rand(2, c, 256 // s, 256 // s) for c, s in zip((4, 6, 8), (4, 8, 16))]
    assert head(f).shape == (2, 1, 256, 256)


def test_zero_input_gives_constant_interior():
    torch.manual_seed(0)
    head = SegHead((4, 6, 8), width=8).eval()
    f = [torch.zeros(1, c, 64 // s, 64 // s) for c, s in zip((4, 6, 8), (4, 8, 16))]
    out = head(f)[0, 0]
    interior = out[16:-16, 16:-16]
    assert torch.allclose(interior, interior[0, 0].expand_as(interior), atol=1e-6)


def test_bce_symmetric_half():
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert bce_loss(torch.full((2, 2), 0.5), g).item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_saturated_match():
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert bce_loss(g.clone(), g).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_two_by_two():
    s = torch.tensor([[0.9, 0.1], [0.8, 0.2]], dtype=torch.float64)
    g = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    expected = -(2 * math.log(0.9) + 2 * math.log(0.8)) / 4
    assert bce_loss(s, g).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1643, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bce_matches_loop(seed):
    rng = np.random.default_rng(seed)
    s = rng.random((8, 8))
    s[rng.random((8, 8)) < 0.1] = 0.0
    g = (rng.random((8, 8)) > 0.5).astype(np.float64)
    assert bce_loss(torch.tensor(s), torch.tensor(g)).item() == pytest.approx(bce_loop(s, g), abs=1e-6)


def test_bce_gradient_matches_finite_differences(rng):
    s = rng.uniform(0.05, 0.95, (6, 6))
    g = torch.tensor((rng.random((6, 6)) > 0.5).astype(np.float64))
    p = torch.tensor(s, requires_grad=True)
    bce_loss(p, g).backward()
    numeric = central_difference(lambda x: bce_loss(torch.tensor(x), g).item(), s.copy())
    assert np.linalg.norm(p.grad.numpy() - numeric) / np.linalg.norm(numeric) < 1e-3


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_total_loss_sum_and_weights():
    parts = [torch.tensor(0.5), torch.tensor(0.3), torch.tensor(0.2)]
    assert total_loss(*parts).item() == pytest.approx(1.0)
    assert total_loss(*parts, LossConfig(1.0, 0.1, 1.0)).item() == pytest.approx(0.73)


def test_zero_weight_removes_gradient():
    parts = [torch.tensor(v, requires_grad=True) for v in (0.5, 0.3, 0.2)]
    total_loss(*parts, LossConfig(1.0, 0.0, 1.0)).backward()
    assert parts[1].grad.item() == 0.0
    assert parts[0].grad.item() == 1.0


def test_nan_component_raises():
    with pytest.raises(NumericError, match="L_rec"):
        total_loss(torch.tensor(0.5), torch.tensor(float("nan")), torch.tensor(0.2))


def _tiny_model():
    cfg = desk_config(**{"model.seg_width": 4})
    torch.manual_seed(0)
    model = CFRG(cfg).double()
    # BN in eval mode makes the loss a smooth function of each parameter
    model.eval()
    return model


def test_gradient_reaches_segmentation_and_student():
    model = _tiny_model()
    model.train()
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    mask = torch.zeros(2, 1, 64, 64, dtype=torch.float64)
    mask[..., 20:40, 20:40] = 1
    model.forward_train(x, x + mask * 0.5, mask)["l_bce"].backward()
    assert model.seg.head.weight.grad.abs().sum() > 0
    student_grads = [p.grad for p in model.student.parameters() if p.grad is not None]
    assert student_grads and any(g.abs().sum() > 0 for g in student_grads)


@pytest.mark.parametrize("param", ["student.proj.0.weight", "seg.head.weight", "recovery.stage3.up.0.weight"])
def test_end_to_end_gradient_matches_finite_differences(param):
    model = _tiny_model()
    rng = np.random.default_rng(1)
    x_n = torch.tensor(rng.random((2, 3, 64, 64)))
    mask = torch.zeros(2, 1, 64, 64, dtype=torch.float64)
    mask[0, :, 8:40, 16:48] = 1
    x_a = x_n + mask * torch.tensor(rng.random((2, 3, 64, 64)))
    p = dict(model.named_parameters())[param]
    model.zero_grad()
    model.forward_train(x_n, x_a, mask)["l_all"].backward()
    flat = p.detach().reshape(-1)
    picks = rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False)
    analytic = p.grad.reshape(-1)[picks].numpy()
    numeric = []
    for i in picks:
        orig = flat[i].item()
        vals = []
        for h in (1e-5, -1e-5):
            with torch.no_grad():
                flat[i] = orig + h
            vals.append(model.forward_train(x_n, x_a, mask)["l_all"].item())
        with torch.no_grad():
            flat[i] = orig
        numeric.append((vals[0] - vals[1]) / 2e-5)
    numeric = np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel < 1e-2
