"""Modal enhancement: label prediction with confidence injection, and the
prompt-expert branches that prepend trainable prompt rows to the scaled
frozen features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

ZERO_NORM = 1e-12


def safe_cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine along the last dim; 0 where either vector has norm < 1e-12."""
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    ok = (nu >= ZERO_NORM) & (nv >= ZERO_NORM)
    denom = torch.where(ok, nu * nv, torch.ones_like(nu * nv))
    return torch.where(ok, (u * v).sum(-1) / denom, torch.zeros_like(denom))


@dataclass
class PMOutput:
    f_img: torch.Tensor  # (..., D_pm)
    f_lab: torch.Tensor  # (C, D_pm)
    p: torch.Tensor  # (..., C) cosine similarities
    softmax_p: torch.Tensor
    p_n: torch.Tensor  # (...,) max probability
    predicted: torch.Tensor  # (...,) argmax index


class PredictionModule(nn.Module):
    """Shared Linear + ReLU projection of image and label features, scored by cosine."""

    def __init__(self, dim: int, pm_dim: int | None = None):
        super().__init__()
        self.proj = nn.Linear(dim, pm_dim or dim)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.proj(x))

    def forward(self, v_img_clip: torch.Tensor, v_lab_clip: torch.Tensor) -> PMOutput:
        if v_lab_clip.dim() != 2 or v_lab_clip.shape[0] < 2:
            raise ShapeError("label matrix must be (C, D) with C >= 2")
        if v_img_clip.shape[-1] != v_lab_clip.shape[-1]:
            raise ShapeError("image and label features differ in width")
        f_img = self.project(v_img_clip.mean(dim=-2))
        f_lab = self.project(v_lab_clip)
        p = safe_cosine(f_img.unsqueeze(-2), f_lab)
        softmax_p = p.softmax(dim=-1)
        p_n, predicted = softmax_p.max(dim=-1)
        return PMOutput(f_img, f_lab, p, softmax_p, p_n, predicted)


def pm_predict(v_img_clip: torch.Tensor, v_lab_clip: torch.Tensor, pm: PredictionModule,
               label_set: Sequence[str] | None = None):
    """Returns (softmax_p, P_n, predicted label); the label is a name when
    ``label_set`` is given, otherwise an index tensor."""
    out = pm(v_img_clip, v_lab_clip)
    if label_set is None:
        return out.softmax_p, out.p_n, out.predicted
    if out.predicted.dim() == 0:
        return out.softmax_p, out.p_n, label_set[int(out.predicted)]
    return out.softmax_p, out.p_n, [label_set[int(i)] for i in out.predicted]


def apply_confidence(p_n, v_img_clip: torch.Tensor, v_txt_clip: torch.Tensor):
    p_n = torch.as_tensor(p_n, dtype=v_img_clip.dtype)
    if torch.any(p_n <= 0) or torch.any(p_n > 1):
        raise InputError("confidence must lie in (0, 1]")
    scale = p_n.reshape(p_n.shape + (1, 1))
    return scale * v_img_clip, scale * v_txt_clip


class PromptExpert(nn.Module):
    def __init__(self, prompts: torch.Tensor, z: torch.Tensor):
        super().__init__()
        self.prompts = nn.Parameter(prompts.clone())
        self.register_buffer("guide_snapshot", prompts.clone())
        self.register_buffer("z", z.clone())

    @property
    def n_rows(self) -> int:
        return self.prompts.shape[0]


def init_expert(v_clip: torch.Tensor, n_e: int, seed: int) -> PromptExpert:
    """Prompt rows z_i * mean(v_clip), with z a seeded unit-variance draw.

    ``v_clip`` may carry leading batch dims; all token rows are pooled.
    """
    if n_e < 1:
        raise InputError("an expert needs at least one prompt row")
    v = torch.as_tensor(v_clip).detach()
    guide = v.reshape(-1, v.shape[-1]).mean(dim=0)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n_e, v.shape[-1], generator=gen, dtype=torch.float64).to(v.dtype)
    return PromptExpert(z * guide, z)


def expert_branch_forward(expert: PromptExpert | None, v: torch.Tensor) -> torch.Tensor:
    """[prompts; v] along the token axis (prompts broadcast over the batch)."""
    if expert is None:
        return v
    prompts = expert.prompts
    if prompts.shape[-1] != v.shape[-1]:
        raise ShapeError(f"prompt width {prompts.shape[-1]} != feature width {v.shape[-1]}")
    prompts = prompts.to(v.dtype).expand(v.shape[:-2] + prompts.shape)
    return torch.cat([prompts, v], dim=-2)
