"""Detection head: token fusion, four 2x upsampling stages, per-pixel
two-way softmax, argmax binarization, and projection of the anomaly map back
to tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class MaskTensor:
    probs: torch.Tensor  # (..., 2, H, W); channel 1 = defect
    binary: torch.Tensor  # (..., H, W) {0, 1}
    anomaly_map: torch.Tensor  # (..., H, W)

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(t.detach().cpu().numpy() for t in (self.probs, self.binary, self.anomaly_map))


def binarize(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over the two channels; an exact tie goes to normal (0)."""
    return (probs[..., 1, :, :] > probs[..., 0, :, :]).to(torch.uint8)


def mask_from_logits(logits: torch.Tensor) -> MaskTensor:
    probs = logits.softmax(dim=-3)
    return MaskTensor(probs=probs, binary=binarize(probs), anomaly_map=probs[..., 1, :, :])


def grid_side(n_rows: int, n_expert: int) -> int:
    n_grid = n_rows - n_expert
    g = math.isqrt(max(n_grid, 0))
    if n_grid <= 0 or g * g != n_grid:
        raise ShapeError(f"{n_rows} image tokens minus {n_expert} expert rows is not a square grid")
    return g


def fuse_tokens(t_img: torch.Tensor, t_txt: torch.Tensor) -> torch.Tensor:
    """Gate each image token by sigmoid(mean_j <t_img_i, t_txt_j> / sqrt(D))."""
    if t_img.shape[-1] != t_txt.shape[-1]:
        raise ShapeError("image and text tokens differ in width")
    scores = (t_img @ t_txt.transpose(-1, -2)).mean(dim=-1) / math.sqrt(t_img.shape[-1])
    return torch.sigmoid(scores).unsqueeze(-1) * t_img


class DetectionHead(nn.Module):
    def __init__(self, dim: int, widths=(32, 32, 16, 16)):
        super().__init__()
        stages = []
        c_in = dim
        for c_out in widths:
            stages.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.ReLU(),
            ))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(c_in, 2, 1)

    def forward(self, t_img: torch.Tensor, t_txt: torch.Tensor, n_expert: int) -> torch.Tensor:
        """Two-channel logits of shape (B, 2, 16g, 16g)."""
        squeeze = t_img.dim() == 2
        if squeeze:
            t_img, t_txt = t_img[None], t_txt[None]
        g = grid_side(t_img.shape[-2], n_expert)
        fused = fuse_tokens(t_img, t_txt)[:, n_expert:]  # expert rows have no grid position
        x = fused.transpose(1, 2).reshape(t_img.shape[0], t_img.shape[-1], g, g)
        logits = self.out(self.stages(x))
        return logits[0] if squeeze else logits


def detect(t_img: torch.Tensor, t_txt: torch.Tensor, head: DetectionHead, n_expert: int) -> MaskTensor:
    return mask_from_logits(head(t_img, t_txt, n_expert))


class MaskProjector(nn.Module):
    """Average-pool the anomaly map to the token grid and embed each cell."""

    def __init__(self, dim: int, grid: int):
        super().__init__()
        self.grid = grid
        self.embed = nn.Linear(1, dim)

    def forward(self, anomaly_map: torch.Tensor) -> torch.Tensor:
        squeeze = anomaly_map.dim() == 2
        x = anomaly_map[None] if squeeze else anomaly_map
        h, w = x.shape[-2:]
        if h % self.grid or w % self.grid:
            raise ShapeError(f"map {h}x{w} does not tile a {self.grid}x{self.grid} grid")
        pooled = F.adaptive_avg_pool2d(x[:, None], self.grid).flatten(1)  # (B, g*g)
        out = self.embed(pooled.unsqueeze(-1))
        return out[0] if squeeze else out


def project_mask(mask: MaskTensor, projector: MaskProjector) -> torch.Tensor:
    return projector(mask.anomaly_map)
