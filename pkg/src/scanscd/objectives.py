"""Segmentation heads, training objectives, pseudo labels and SCD composition.

Probability tensors are ``(B, N, H, W)`` over land-cover classes 1..N
(channel ``k`` holds class ``k + 1``).  Label tensors are ``(B, H, W)``
integer maps with 0 meaning no-change / ignored.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError
from .types import derive_change_mask

EPS = 1e-12


class SemanticHead(nn.Module):
    """1x1 projection to class logits, x4 bilinear upsampling, softmax."""

    def __init__(self, in_ch: int, num_classes: int, scale: int = 4):
        super().__init__()
        self.classifier = nn.Conv2d(in_ch, num_classes, 1)
        self.scale = scale

    def logits(self, feat):
        return F.interpolate(self.classifier(feat), scale_factor=self.scale,
                             mode="bilinear", align_corners=False)

    def forward(self, feat):
        return self.logits(feat).softmax(dim=1)


class ChangeHead(SemanticHead):
    def __init__(self, in_ch: int, scale: int = 4):
        super().__init__(in_ch, 1, scale)

    def forward(self, feat):
        return torch.sigmoid(self.logits(feat))


def _log(p):
    return torch.log(p.clamp_min(EPS))


def _masked_mean(values, mask):
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / count


def _class_nll(prob, target):
    """Per-pixel ``-log p[target]`` (target 0 positions are returned but meaningless)."""
    idx = (target.long() - 1).clamp_min(0).unsqueeze(1)
    return -_log(prob.gather(1, idx).squeeze(1))


def _binary_ce_sum(prob, target):
    """Per-pixel one-vs-rest binary cross-entropy summed over classes."""
    onehot = F.one_hot((target.long() - 1).clamp_min(0), prob.shape[1]).permute(0, 3, 1, 2)
    onehot = onehot.to(prob.dtype)
    return -(onehot * _log(prob) + (1 - onehot) * _log(1 - prob)).sum(dim=1)


def _ce(prob, target, full_binary_ce: bool):
    values = _binary_ce_sum(prob, target) if full_binary_ce else _class_nll(prob, target)
    return _masked_mean(values, (target != 0).to(prob.dtype))


def loss_sem(prob1, prob2, label1, label2, full_binary_ce: bool = False):
    """Cross-entropy on changed pixels only, summed over the two epochs."""
    return _ce(prob1, label1, full_binary_ce) + _ce(prob2, label2, full_binary_ce)


def cosine_map(prob1, prob2):
    dot = (prob1 * prob2).sum(dim=1)
    norms = prob1.norm(dim=1) * prob2.norm(dim=1)
    return dot / norms.clamp_min(EPS)


@torch.no_grad()
def make_pseudo_labels(prob1, prob2, change_mask, threshold: float, source: str = "first"):
    """Label unchanged pixels whose bi-temporal predictions agree (cosine >= threshold)."""
    cos = cosine_map(prob1, prob2)
    if source == "first":
        ref = prob1
    elif source == "second":
        ref = prob2
    elif source == "mean":
        ref = (prob1 + prob2) / 2
    else:
        raise ValueError(f"unknown pseudo label source {source!r}")
    labels = ref.argmax(dim=1) + 1
    keep = (change_mask == 0) & (cos >= threshold)
    return torch.where(keep, labels, torch.zeros_like(labels))


def loss_psd(prob1, prob2, pseudo, full_binary_ce: bool = False):
    pseudo = pseudo.detach()
    return _ce(prob1, pseudo, full_binary_ce) + _ce(prob2, pseudo, full_binary_ce)


def loss_sc(prob1, prob2, change_mask, swap_cases: bool = False):
    """Mean of ``1 - cos`` on unchanged pixels and ``cos`` on changed pixels.

    ``swap_cases`` swaps the two cases.
    """
    cos = cosine_map(prob1, prob2)
    changed = change_mask.to(cos.dtype)
    if swap_cases:
        changed = 1 - changed
    return ((1 - changed) * (1 - cos) + changed * cos).mean()


def loss_change(prob, change_mask):
    prob = prob.squeeze(1) if prob.dim() == 4 else prob
    m = change_mask.to(prob.dtype)
    return -(m * _log(prob) + (1 - m) * _log(1 - prob)).mean()


class ScdOutputs(NamedTuple):
    prob1: torch.Tensor
    prob2: torch.Tensor
    change: torch.Tensor


TERMS = ("sem", "psd", "sc", "chg")


def total_loss(out: ScdOutputs, label1, label2, threshold: float, *,
               lambda_chg: float = 1.0, lambda_psd: float = 1.0, lambda_sc: float = 1.0,
               sc_swap_cases: bool = False, pseudo_source: str = "first",
               full_binary_ce: bool = False):
    """Return ``(loss, breakdown)``; breakdown maps each weighted term to its value.

    Disabled terms (weight 0) are not evaluated.
    """
    mask = derive_change_mask(label1, label2)
    zero = out.prob1.sum() * 0.0
    terms = {"sem": loss_sem(out.prob1, out.prob2, label1, label2, full_binary_ce)}
    if lambda_psd:
        pseudo = make_pseudo_labels(out.prob1, out.prob2, mask, threshold, pseudo_source)
        terms["psd"] = lambda_psd * loss_psd(out.prob1, out.prob2, pseudo, full_binary_ce)
    else:
        terms["psd"] = zero
    terms["sc"] = lambda_sc * loss_sc(out.prob1, out.prob2, mask, sc_swap_cases) if lambda_sc else zero
    terms["chg"] = lambda_chg * loss_change(out.change, mask) if lambda_chg else zero
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r}: {value.item()}")
    loss = terms["sem"] + terms["psd"] + terms["sc"] + terms["chg"]
    return loss, {k: float(v.detach()) for k, v in terms.items()} | {"total": float(loss.detach())}


@torch.no_grad()
def compose_prediction(prob1, prob2, change_prob, threshold: float = 0.5):
    """Combine semantic and change outputs into two SCD maps (0 = no-change).

    Argmax ties resolve to the lowest class index.
    """
    if change_prob.dim() == prob1.dim():
        change_prob = change_prob.squeeze(-3)
    changed = change_prob >= threshold
    pred1 = torch.where(changed, prob1.argmax(dim=-3) + 1, 0)
    pred2 = torch.where(changed, prob2.argmax(dim=-3) + 1, 0)
    return pred1, pred2
