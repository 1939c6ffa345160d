"""Loss terms: focal and dice for the pixel masks, cross-entropy for label
prediction and next-token answers, and their weighted sum."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import InputError, NumericError, ShapeError

EPS = 1e-7


def focal_loss(p_correct: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """-mean((1 - p)^gamma * log p) over every element of ``p_correct``."""
    if p_correct.numel() == 0:
        raise InputError("focal loss of an empty array")
    p = p_correct.clamp_min(EPS)
    return -((1.0 - p) ** gamma * torch.log(p)).mean()


def focal_loss_from_probs(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss where ``probs`` is (..., 2, H, W) and ``target`` (..., H, W) in {0, 1}."""
    t = target.to(probs.dtype)
    p_correct = t * probs[..., 1, :, :] + (1.0 - t) * probs[..., 0, :, :]
    return focal_loss(p_correct, gamma)


def dice_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """-sum(y * y_hat) / (sum(y^2) + sum(y_hat^2)), per map over the last two
    dims and averaged over any leading dims. No factor 2: the range for a
    binary prediction is [-1/2, 0]."""
    if y.shape != y_hat.shape:
        raise ShapeError(f"dice inputs differ in shape: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    y_hat = y_hat.to(y.dtype)
    num = (y * y_hat).sum(dim=(-2, -1))
    den = (y * y).sum(dim=(-2, -1)) + (y_hat * y_hat).sum(dim=(-2, -1)) + EPS
    return (-num / den).mean()


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over positions (optionally masked)."""
    c = logits.shape[-1]
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (target.min() < 0 or target.max() >= c):
        raise InputError(f"target index out of range for {c} classes")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum().clamp_min(1.0)


def cross_entropy_probs(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Same as ``cross_entropy`` but on probabilities, clamped at 1e-7."""
    c = probs.shape[-1]
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (target.min() < 0 or target.max() >= c):
        raise InputError(f"target index out of range for {c} classes")
    p = probs.gather(-1, target.unsqueeze(-1)).squeeze(-1).clamp_min(EPS)
    return -torch.log(p).mean()


def gate_relevance_loss(a: torch.Tensor, relevant: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between the gate value and a 0/1 relevance target."""
    a = a.clamp(EPS, 1.0 - EPS)
    r = relevant.to(a.dtype)
    return -(r * torch.log(a) + (1.0 - r) * torch.log(1.0 - a)).mean()


def total_loss(l_focal, l_dice, l_ce1, l_ce2, cfg: LossConfig | None = None, l_gate=0.0):
    cfg = cfg or LossConfig()
    terms = {"focal": l_focal, "dice": l_dice, "ce1": l_ce1, "ce2": l_ce2, "gate": l_gate}
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is not finite ({v})", term=name)
    return (cfg.alpha * l_focal + cfg.beta * l_dice + cfg.delta * l_ce1
            + cfg.epsilon * l_ce2 + cfg.gate_weight * l_gate)
