"""Pseudo-label distillation with momentum MixUp decay and self-entropy.

Conventions: probability and logit tensors are [B, C, H, W]; ``new_gt`` is an
integer [B, H, W] map holding the channel index of a stage-new structure, or
``NOT_NEW`` (-1) elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

NOT_NEW = -1


@dataclass
class ScheduleState:
    I: int = 0
    I_max: int = 1
    lambda0: float = 1.0
    k: float = 5.0
    alpha0: float = 10.0
    # "scaled": lambda0 * exp(-k * I / I_max); "literal": lambda0 * exp(-I)
    decay: str = "scaled"

    def validate(self) -> None:
        if self.I_max <= 0:
            raise ValueError("I_max must be positive")
        if not 0 <= self.I <= self.I_max:
            raise ValueError(f"iteration {self.I} outside [0, {self.I_max}]")
        if not 0 < self.lambda0 <= 1:
            raise ValueError("lambda0 must lie in (0, 1]")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be non-negative")
        if self.decay not in ("scaled", "literal"):
            raise ValueError(f"unknown decay mode {self.decay!r}")

    def at(self, I: int) -> "ScheduleState":
        return ScheduleState(I, self.I_max, self.lambda0, self.k, self.alpha0, self.decay)

    def reset(self) -> None:
        self.I = 0


@dataclass
class PseudoLabel:
    soft: torch.Tensor  # [B, C, H, W], rows sum to 1
    source_mask: torch.Tensor  # bool [B, H, W]; True where taken from new-structure ground truth


def momentum_lambda(sched: ScheduleState) -> float:
    sched.validate()
    if sched.decay == "literal":
        return sched.lambda0 * math.exp(-sched.I)
    return sched.lambda0 * math.exp(-sched.k * sched.I / sched.I_max)


def alpha_schedule(sched: ScheduleState) -> float:
    sched.validate()
    return (sched.I_max - sched.I) / sched.I_max * sched.alpha0


def _check_rows(p: torch.Tensor, what: str, tol: float = 1e-4) -> None:
    if (p < 0).any() or not torch.allclose(p.sum(1), torch.ones_like(p[:, 0]), atol=tol, rtol=0):
        raise ValueError(f"{what} rows must be distributions summing to 1")


def build_pseudo_label(old_probs: torch.Tensor, new_probs: torch.Tensor, new_gt: torch.Tensor,
                       lam: float) -> PseudoLabel:
    """Mix old/new predictions on old categories; new-structure pixels are one-hot.

    The new model's old-category slice is renormalized to a distribution
    before mixing, and new-category entries of mixed pixels are zero.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    n_old = old_probs.shape[1]
    n_all = new_probs.shape[1]
    if n_old >= n_all or old_probs.shape[0] != new_probs.shape[0] or old_probs.shape[2:] != new_probs.shape[2:]:
        raise ValueError(f"incompatible shapes {tuple(old_probs.shape)} and {tuple(new_probs.shape)}")
    _check_rows(old_probs, "old_probs")
    _check_rows(new_probs, "new_probs")
    old_slice = new_probs[:, :n_old]
    renorm = old_slice / old_slice.sum(1, keepdim=True).clamp_min(1e-30)
    mixed = lam * old_probs + (1 - lam) * renorm
    soft = torch.cat([mixed, torch.zeros_like(new_probs[:, n_old:])], dim=1)

    is_new = new_gt != NOT_NEW
    if is_new.any():
        if (new_gt[is_new] < n_old).any() or (new_gt[is_new] >= n_all).any():
            raise ValueError("new_gt must index stage-new categories only")
        onehot = F.one_hot(new_gt.clamp_min(0).long(), n_all).permute(0, 3, 1, 2).to(soft.dtype)
        soft = torch.where(is_new[:, None], onehot, soft)
    return PseudoLabel(soft, is_new)


def hard_label(index: torch.Tensor, num_categories: int, dtype=torch.float32) -> PseudoLabel:
    """One-hot targets from a channel-index map (every pixel treated as ground truth)."""
    soft = F.one_hot(index.long(), num_categories).permute(0, 3, 1, 2).to(dtype)
    return PseudoLabel(soft, torch.ones_like(index, dtype=torch.bool))


def cross_entropy_soft(logits: torch.Tensor, pl: PseudoLabel) -> torch.Tensor:
    if torch.isnan(logits).any():
        raise FloatingPointError("NaN logits")
    if logits.shape != pl.soft.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs pseudo-label {tuple(pl.soft.shape)}")
    return -(pl.soft * F.log_softmax(logits, dim=1)).sum(1).mean()


def self_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(1).mean()


def total_loss(logits: torch.Tensor, pl: PseudoLabel, sched: ScheduleState) -> torch.Tensor:
    alpha = alpha_schedule(sched)
    ce = cross_entropy_soft(logits, pl)
    if alpha == 0:
        return ce
    return ce + alpha * self_entropy(logits)
