"""Alignment of visual, mask and text tokens into gated prompt instructions.

Self-attention matrices are built separately from the image and mask tokens
and averaged before being applied to the image tokens; a cross-attention step
then reads from the text tokens, and a two-layer FFN lifts the result to the
language model width. The relevance gate is the clamped cosine between a
corrector vector generated from the visual tokens and the pooled question.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .enhancement import safe_cosine
from .errors import InputError, ShapeError

FORMATS = ("eq9_gated", "eq5_baseline")


def attention_matrix(a: torch.Tensor, b: torch.Tensor, k1: torch.Tensor, k2: torch.Tensor,
                     d_k: int | None = None) -> torch.Tensor:
    """Row-softmax of (a k1)(b k2)^T / sqrt(d_k); k1, k2 are (D, d_k) kernels."""
    if a.shape[-1] != k1.shape[0] or b.shape[-1] != k2.shape[0]:
        raise ShapeError("token width does not match the projection kernels")
    d_k = d_k or k1.shape[1]
    scores = (a @ k1) @ (b @ k2).transpose(-1, -2) / math.sqrt(d_k)
    return scores.softmax(dim=-1)


def pad_tokens(t: torch.Tensor, n_rows: int) -> torch.Tensor:
    """Zero rows prepended (or leading rows dropped) to reach ``n_rows``."""
    n = t.shape[-2]
    if n == n_rows:
        return t
    if n > n_rows:
        return t[..., n - n_rows:, :]
    pad = t.new_zeros(t.shape[:-2] + (n_rows - n, t.shape[-1]))
    return torch.cat([pad, t], dim=-2)


def bidirectional_self_attention(t_img, t_mas, k1, k2, d_k=None, return_maps=False):
    if t_img.shape[-1] != t_mas.shape[-1]:
        raise ShapeError("image and mask tokens differ in width")
    t_mas = pad_tokens(t_mas, t_img.shape[-2])
    m_img = attention_matrix(t_img, t_img, k1, k2, d_k)
    m_mak = attention_matrix(t_mas, t_mas, k1, k2, d_k)
    f_im = (0.5 * (m_img + m_mak)) @ t_img
    if return_maps:
        return f_im, m_img, m_mak
    return f_im


def cross_attention(f_im, t_txt, k1, k2, d_k=None, return_maps=False):
    if f_im.shape[-1] != t_txt.shape[-1]:
        raise ShapeError("visual and text tokens differ in width")
    m = attention_matrix(f_im, t_txt, k1, k2, d_k)
    f_imt = m @ t_txt
    if return_maps:
        return f_imt, m
    return f_imt


def masked_mean(t: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is None:
        return t.mean(dim=-2)
    m = mask.to(t.dtype).unsqueeze(-1)
    return (t * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)


class Modulation(nn.Module):
    def __init__(self, dim: int, llm_dim: int, d_k: int | None = None):
        super().__init__()
        self.d_k = d_k or dim
        self.k1 = nn.Parameter(torch.randn(dim, self.d_k) / math.sqrt(dim))
        self.k2 = nn.Parameter(torch.randn(dim, self.d_k) / math.sqrt(dim))
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, llm_dim))

    def forward(self, t_img, t_mas, t_txt, use_stack: bool = True) -> torch.Tensor:
        if not use_stack:
            return ffn_project(t_img, self.ffn)
        f_im = bidirectional_self_attention(t_img, t_mas, self.k1, self.k2, self.d_k)
        f_imt = cross_attention(f_im, t_txt, self.k1, self.k2, self.d_k)
        return ffn_project(f_imt, self.ffn)


def ffn_project(f_imt: torch.Tensor, ffn: nn.Module) -> torch.Tensor:
    return ffn(f_imt)


class Corrector(nn.Module):
    """Generates the corrector vector from pooled visual instruction tokens."""

    def __init__(self, llm_dim: int):
        super().__init__()
        self.affine = nn.Linear(llm_dim, llm_dim)

    def forward(self, t_vis: torch.Tensor) -> torch.Tensor:
        return self.affine(t_vis.mean(dim=-2))


def compute_gate(t_vis, t_que, corrector: Corrector, que_mask=None, return_raw=False):
    """a = max(cos(corrector(t_vis), mean(t_que)), 0)."""
    if t_que.shape[-2] == 0 or (que_mask is not None and not bool(que_mask.any(dim=-1).all())):
        raise InputError("question must contain at least one token")
    f_c = corrector(t_vis)
    q_bar = masked_mean(t_que, que_mask)
    a_raw = safe_cosine(f_c, q_bar)
    a = a_raw.clamp_min(0.0)
    if return_raw:
        return a, a_raw
    return a


@dataclass
class PromptInstruction:
    tokens: torch.Tensor  # (..., N, D_llm)
    block_spans: dict[str, tuple[int, int]]
    format_tag: str
    key_mask: torch.Tensor | None = None  # (..., N) True for real rows

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[-2]


def assemble_instruction(a, t_vis, t_mas, t_que, format_tag: str = "eq9_gated", *,
                         x_tokens=None, img_tokens=None, que_mask=None) -> PromptInstruction:
    """Concatenate instruction blocks along the token axis.

    ``eq9_gated``: [a * t_vis; t_mas; t_que].
    ``eq5_baseline``: [x_tokens; img_tokens; t_que] with no gate and no mask block.
    """
    if format_tag not in FORMATS:
        raise InputError(f"unknown instruction format {format_tag!r}")
    if format_tag == "eq9_gated":
        a = torch.as_tensor(a, dtype=t_vis.dtype)
        blocks = [("visual", a.reshape(a.shape + (1, 1)) * t_vis), ("mask", t_mas), ("question", t_que)]
    else:
        if x_tokens is None or img_tokens is None:
            raise InputError("eq5_baseline needs x_tokens and img_tokens")
        blocks = [("image", x_tokens), ("visual", img_tokens), ("question", t_que)]
    width = blocks[0][1].shape[-1]
    for name, blk in blocks:
        if blk.shape[-1] != width:
            raise ShapeError(f"block {name} has width {blk.shape[-1]}, expected {width}")
    lead = torch.broadcast_shapes(*[b.shape[:-2] for _, b in blocks])
    blocks = [(n, b.expand(lead + b.shape[-2:])) for n, b in blocks]
    spans, start = {}, 0
    for name, blk in blocks:
        spans[name] = (start, start + blk.shape[-2])
        start += blk.shape[-2]
    tokens = torch.cat([b for _, b in blocks], dim=-2)
    key_mask = None
    if que_mask is not None:
        ones = torch.ones(lead + (start - t_que.shape[-2],), dtype=torch.bool)
        key_mask = torch.cat([ones, que_mask.expand(lead + que_mask.shape[-1:])], dim=-1)
    return PromptInstruction(tokens=tokens, block_spans=spans, format_tag=format_tag, key_mask=key_mask)
