import inspect

import numpy as np
import pytest
import torch

from waferqa import detection
from waferqa.detection import (DetectionHead, MaskProjector, binarize, detect, fuse_tokens, grid_side,
                               mask_from_logits, project_mask)
from waferqa.errors import ShapeError
from waferqa.objectives import dice_loss, focal_loss_from_probs


@pytest.fixture
def head():
    torch.manual_seed(0)
    return DetectionHead(8)


def test_output_shape_and_normalisation(head):
    t_img, t_txt = torch.randn(2, 4 + 16, 8), torch.randn(2, 4 + 5, 8)
    m = detect(t_img, t_txt, head, n_expert=4)
    assert m.probs.shape == (2, 2, 64, 64) and m.binary.shape == (2, 64, 64)
    assert torch.allclose(m.probs.sum(1), torch.ones(2, 64, 64), atol=1e-6)
    assert torch.equal(m.anomaly_map, m.probs[:, 1])


def test_equal_logits_tie_to_normal(head):
    with torch.no_grad():
        head.out.weight.zero_()
        head.out.bias.zero_()
    m = detect(torch.randn(16, 8), torch.randn(3, 8), head, n_expert=0)
    assert torch.all(m.probs == 0.5)
    assert not m.binary.any()


def test_binarize_rule():
    probs = torch.tensor([[[0.4, 0.5, 0.6]], [[0.6, 0.5, 0.4]]])
    assert binarize(probs).tolist() == [[1, 0, 0]]


def test_non_square_grid_rejected(head):
    with pytest.raises(ShapeError):
        head(torch.randn(15, 8), torch.randn(3, 8), 0)
    assert grid_side(20, 4) == 4


def test_expert_rows_do_not_reach_the_grid(head):
    t_img, t_txt = torch.randn(20, 8), torch.randn(9, 8)
    base = head(t_img, t_txt, 4)
    moved = t_img.clone()
    moved[:4] += 10.0  # expert rows change, and so does the fusion gate only through t_txt: none here
    assert torch.equal(head(moved, t_txt, 4), base)


def test_fusion_gate():
    t_img = torch.randn(5, 4)
    t_txt = torch.randn(3, 4)
    gate = torch.sigmoid((t_img @ t_txt.t()).mean(1) / 2.0)
    assert torch.allclose(fuse_tokens(t_img, t_txt), gate[:, None] * t_img)


def test_monotone_in_defect_logit():
    logits = torch.zeros(1, 2, 4, 4)
    last = 0.0
    for v in np.linspace(-3, 3, 13):
        logits[0, 1, 2, 2] = float(v)
        now = float(mask_from_logits(logits).anomaly_map[0, 2, 2])
        assert now >= last
        last = now


def test_no_threshold_knob():
    src = inspect.getsource(detection.binarize)
    assert "threshold" not in src
    assert list(inspect.signature(detection.binarize).parameters) == ["probs"]


def test_gradient_of_focal_plus_dice_wrt_logits():
    rng = np.random.default_rng(0)
    target = torch.tensor((rng.random((1, 8, 8)) > 0.6).astype(np.float64))

    def f(z):
        m = mask_from_logits(z)
        return focal_loss_from_probs(m.probs, target) + dice_loss(target, m.anomaly_map)

    z = torch.tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    f(z).backward()
    h = 1e-3
    num = torch.zeros_like(z)
    flat = z.detach().clone().view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f(flat.view_as(z)))
        flat[i] = old - h
        down = float(f(flat.view_as(z)))
        flat[i] = old
        num.view(-1)[i] = (up - down) / (2 * h)
    np.testing.assert_allclose(z.grad.numpy(), num.numpy(), rtol=1e-4, atol=1e-8)


def test_project_mask():
    torch.manual_seed(0)
    proj = MaskProjector(8, 4)
    zero = proj(torch.zeros(64, 64))
    assert zero.shape == (16, 8)
    assert torch.allclose(zero, proj.embed.bias.expand(16, 8))
    amap = torch.rand(64, 64)
    bias = proj.embed.bias
    assert torch.allclose(proj(2 * amap) - bias, 2 * (proj(amap) - bias), atol=1e-6)
    with pytest.raises(ShapeError):
        proj(torch.zeros(30, 30))
    m = mask_from_logits(torch.randn(2, 64, 64))
    assert torch.equal(project_mask(m, proj), proj(m.anomaly_map))
