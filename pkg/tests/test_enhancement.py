import numpy as np
import pytest
import torch

from waferqa.enhancement import (PredictionModule, apply_confidence, expert_branch_forward, init_expert, pm_predict,
                                 safe_cosine)
from waferqa.errors import InputError, ShapeError

from oracles import cosine_scalar, pm_scalar

LABELS4 = ["hole", "particle", "scratch", "pattern_deformation"]
LABELS5 = ["good"] + LABELS4


def identity_pm(dim):
    pm = PredictionModule(dim).double()
    with torch.no_grad():
        pm.proj.weight.copy_(torch.eye(dim))
        pm.proj.bias.zero_()
    return pm.requires_grad_(False)


def test_pm_picks_aligned_label():
    pm = identity_pm(5)
    labels = torch.eye(5, dtype=torch.float64)
    img = labels[2].expand(3, 5)  # every token points at "particle"
    out = pm(img, labels)
    assert torch.allclose(out.p, torch.tensor([0, 0, 1, 0, 0], dtype=torch.float64))
    assert pm_predict(img, labels, pm, LABELS5)[2] == "particle"


def test_pm_orthogonal_input_gives_uniform_softmax():
    pm = identity_pm(5)
    labels = torch.eye(5, dtype=torch.float64)[:4]
    img = torch.eye(5, dtype=torch.float64)[4:5]
    soft, p_n, _ = pm_predict(img, labels, pm)
    assert torch.allclose(soft, torch.full((4,), 0.25, dtype=torch.float64))
    assert float(p_n) == pytest.approx(0.25)


@pytest.mark.parametrize("seed", range(5))
def test_pm_matches_scalar_oracle(seed):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    pm = PredictionModule(6).double().requires_grad_(False)
    v_img, v_lab = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    out = pm(torch.tensor(v_img), torch.tensor(v_lab))
    p, soft = pm_scalar(v_img.tolist(), v_lab.tolist(), pm.proj.weight.tolist(), pm.proj.bias.tolist())
    np.testing.assert_allclose(out.p.numpy(), p, atol=1e-12)
    np.testing.assert_allclose(out.softmax_p.numpy(), soft, atol=1e-12)
    assert float(out.softmax_p.sum()) == pytest.approx(1.0, abs=1e-6)
    assert int(out.predicted) == int(np.argmax(soft))
    assert float(out.p_n) == pytest.approx(max(soft))
    assert out.p.abs().max() <= 1 + 1e-12


def test_pm_shape_errors():
    pm = PredictionModule(4)
    with pytest.raises(ShapeError):
        pm(torch.zeros(3, 4), torch.zeros(1, 4))
    with pytest.raises(ShapeError):
        pm(torch.zeros(3, 5), torch.zeros(3, 4))


def test_safe_cosine_zero_norm():
    assert float(safe_cosine(torch.zeros(3), torch.ones(3))) == 0.0
    u, v = torch.tensor([1.0, 2.0, 3.0]), torch.tensor([-1.0, 0.5, 2.0])
    assert float(safe_cosine(u, v)) == pytest.approx(cosine_scalar(u.tolist(), v.tolist()), abs=1e-6)


def test_apply_confidence():
    x = torch.randn(4, 3)
    y = torch.randn(2, 3)
    a, b = apply_confidence(1.0, x, y)
    assert torch.equal(a, x) and torch.equal(b, y)
    a, _ = apply_confidence(0.25, torch.ones(2, 2), torch.ones(2, 2))
    assert torch.equal(a, torch.full((2, 2), 0.25))
    a, _ = apply_confidence(0.3, x, y)
    assert torch.allclose(safe_cosine(a, x), torch.ones(4), atol=1e-6)
    with pytest.raises(InputError):
        apply_confidence(0.0, x, y)


def test_apply_confidence_batched():
    x = torch.ones(2, 3, 4)
    a, _ = apply_confidence(torch.tensor([0.5, 1.0]), x, x)
    assert torch.equal(a[0], torch.full((3, 4), 0.5)) and torch.equal(a[1], x[1])


def test_init_expert():
    v = torch.randn(16, 8)
    e1, e2, e3 = init_expert(v, 4, 0), init_expert(v, 4, 0), init_expert(v, 4, 1)
    assert torch.equal(e1.prompts.data, e1.guide_snapshot)
    assert torch.equal(e1.prompts.data, e2.prompts.data)
    assert not torch.equal(e1.prompts.data, e3.prompts.data)
    assert torch.allclose(e1.prompts.data, e1.z * v.mean(0))
    with pytest.raises(InputError):
        init_expert(v, 0, 0)


def test_expert_branch_concat_and_update():
    v = torch.randn(16, 8)
    e = init_expert(v, 4, 0)
    out = expert_branch_forward(e, v)
    assert out.shape == (20, 8) and torch.equal(out[4:], v)
    with torch.no_grad():
        e.prompts.zero_()
    assert not expert_branch_forward(e, v)[:4].any()

    e = init_expert(v, 4, 0)
    before = expert_branch_forward(e, v).detach().clone()
    opt = torch.optim.SGD(e.parameters(), lr=0.1)
    expert_branch_forward(e, v).sum().backward()
    opt.step()
    after = expert_branch_forward(e, v).detach()
    assert not torch.equal(after[:4], before[:4])
    assert torch.equal(after[4:], v)
    assert torch.equal(e.guide_snapshot, before[:4])
    with pytest.raises(ShapeError):
        expert_branch_forward(e, torch.randn(16, 7))
