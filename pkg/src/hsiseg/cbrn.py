"""Continual batch renormalization (cBRN) and the plain batch norm it replaces.

Both normalizers are affine-free and share a small protocol used by the
convolution units:

* ``forward(a, mode)`` normalizes a pre-activation and, in train mode,
  records the batch statistics it saw (one record per branch);
* ``commit()`` folds the recorded statistics into the running/continual
  state. Forward never mutates state by itself, so a train-mode forward is
  a pure function of (parameters, state, batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

TRAIN = "train"
EVAL = "eval"


def check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass
class BatchStats:
    """Per-channel mean and population std over batch and spatial axes."""

    mu_B: torch.Tensor
    sigma_B: torch.Tensor


@dataclass
class CBRNState:
    mu_c: torch.Tensor
    sigma_c: torch.Tensor
    eta: float = 0.01
    eps: float = 1e-5

    def copy(self) -> "CBRNState":
        return CBRNState(self.mu_c.clone(), self.sigma_c.clone(), self.eta, self.eps)


def compute_batch_stats(feature: torch.Tensor) -> BatchStats:
    if feature.dim() != 4:
        raise ValueError(f"expected a [B, C, H, W] feature map, got shape {tuple(feature.shape)}")
    if feature.shape[0] == 0:
        raise ValueError("cannot compute batch statistics of an empty batch")
    mu = feature.mean(dim=(0, 2, 3))
    var = feature.var(dim=(0, 2, 3), unbiased=False)
    return BatchStats(mu, var.sqrt())


def _safe_sigma(feature: torch.Tensor, mu: torch.Tensor, eps: float) -> torch.Tensor:
    # max(sigma, eps) computed as sqrt(max(var, eps^2)) so the backward pass
    # stays finite on constant channels.
    var = ((feature - mu.view(1, -1, 1, 1)) ** 2).mean(dim=(0, 2, 3))
    return var.clamp_min(eps * eps).sqrt()


def _channels(t: torch.Tensor) -> torch.Tensor:
    return t.view(1, -1, 1, 1)


def brn_normalize(
    a: torch.Tensor,
    stats: BatchStats | None,
    state: CBRNState,
    mode: str,
    r_max: float | None = None,
    d_max: float | None = None,
) -> torch.Tensor:
    """Renormalize ``a`` toward the continual statistics.

    Train mode standardizes with the batch statistics, then applies the
    correction ``r = sigma_B / sigma_c`` and ``d = (mu_B - mu_c) / sigma_c``.
    Both factors are gradient-stopped. Clipping of r and d is off unless
    ``r_max``/``d_max`` are given. Eval mode uses ``(a - mu_c) / sigma_c``.
    """
    check_mode(mode)
    if not (torch.isfinite(state.mu_c).all() and torch.isfinite(state.sigma_c).all()):
        raise FloatingPointError("non-finite continual statistics")
    sigma_c = state.sigma_c.clamp_min(state.eps)
    if mode == EVAL:
        return (a - _channels(state.mu_c)) / _channels(sigma_c)

    if stats is None:
        stats = compute_batch_stats(a.detach())
    if not (torch.isfinite(stats.mu_B).all() and torch.isfinite(stats.sigma_B).all()):
        raise FloatingPointError("non-finite batch statistics")
    mu_B = a.mean(dim=(0, 2, 3))
    a_hat = (a - _channels(mu_B)) / _channels(_safe_sigma(a, mu_B, state.eps))
    r = (stats.sigma_B.clamp_min(state.eps) / sigma_c).detach()
    d = ((stats.mu_B - state.mu_c) / sigma_c).detach()
    if r_max is not None:
        r = r.clamp(1.0 / r_max, r_max)
    if d_max is not None:
        d = d.clamp(-d_max, d_max)
    return a_hat * _channels(r) + _channels(d)


def update_continual_stats(state: CBRNState, stats_r: BatchStats, stats_p: BatchStats) -> CBRNState:
    if not 0.0 <= state.eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {state.eta}")
    if (stats_r.sigma_B < 0).any() or (stats_p.sigma_B < 0).any():
        raise ValueError("batch standard deviations must be non-negative")
    eta = state.eta
    mu_c = (1 - eta) * state.mu_c + eta * 0.5 * (stats_r.mu_B + stats_p.mu_B)
    sigma_c = (1 - eta) * state.sigma_c + eta * 0.5 * (stats_r.sigma_B + stats_p.sigma_B)
    return CBRNState(mu_c, sigma_c.clamp_min(state.eps), eta, state.eps)


def init_from_bn(running_mean, running_var, eps: float = 1e-5, eta: float = 0.01) -> CBRNState:
    running_mean = torch.as_tensor(running_mean)
    running_var = torch.as_tensor(running_var)
    if (running_var < 0).any():
        raise ValueError("running variance must be non-negative")
    return CBRNState(running_mean.clone(), torch.sqrt(running_var + eps), eta, eps)


class CBRN(nn.Module):
    """Normalization slot holding one CBRNState, shared by both branches of a unit."""

    kind = "cbrn"

    def __init__(self, num_channels: int, eta: float = 0.01, eps: float = 1e-5,
                 r_max: float | None = None, d_max: float | None = None):
        super().__init__()
        self.eta = eta
        self.eps = eps
        self.r_max = r_max
        self.d_max = d_max
        self.register_buffer("mu_c", torch.zeros(num_channels))
        self.register_buffer("sigma_c", torch.ones(num_channels))
        self._pending: list[BatchStats] = []

    @classmethod
    def from_state(cls, state: CBRNState) -> "CBRN":
        mod = cls(state.mu_c.numel(), eta=state.eta, eps=state.eps).to(state.mu_c.dtype)
        mod.mu_c.copy_(state.mu_c)
        mod.sigma_c.copy_(state.sigma_c)
        return mod

    @property
    def state(self) -> CBRNState:
        return CBRNState(self.mu_c, self.sigma_c, self.eta, self.eps)

    def reset_pending(self) -> None:
        self._pending = []

    def forward(self, a: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
        stats = compute_batch_stats(a.detach()) if mode == TRAIN else None
        if stats is not None:
            self._pending.append(stats)
        return brn_normalize(a, stats, self.state, mode, self.r_max, self.d_max)

    @torch.no_grad()
    def commit(self) -> None:
        if not self._pending:
            return
        # a single-branch unit feeds the same statistics to both slots of the update
        s_r = self._pending[0]
        s_p = self._pending[1] if len(self._pending) > 1 else s_r
        new = update_continual_stats(self.state, s_r, s_p)
        self.mu_c.copy_(new.mu_c)
        self.sigma_c.copy_(new.sigma_c)
        self._pending = []


class BatchNorm(nn.Module):
    """Affine-free batch normalization with exponential running statistics.

    Training normalizes with the batch mean and biased variance; ``commit``
    moves the running estimates by ``momentum`` toward the branch-averaged
    batch statistics.
    """

    kind = "batchnorm"

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(num_channels))
        self.register_buffer("running_var", torch.ones(num_channels))
        self._pending: list[tuple[torch.Tensor, torch.Tensor]] = []

    def reset_pending(self) -> None:
        self._pending = []

    def forward(self, a: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
        check_mode(mode)
        if mode == EVAL:
            return (a - _channels(self.running_mean)) / _channels(torch.sqrt(self.running_var + self.eps))
        mu = a.mean(dim=(0, 2, 3))
        var = ((a - _channels(mu)) ** 2).mean(dim=(0, 2, 3))
        self._pending.append((mu.detach(), var.detach()))
        return (a - _channels(mu)) / _channels(torch.sqrt(var + self.eps))

    @torch.no_grad()
    def commit(self) -> None:
        if not self._pending:
            return
        mu = torch.stack([p[0] for p in self._pending]).mean(0)
        var = torch.stack([p[1] for p in self._pending]).mean(0)
        m = self.momentum
        self.running_mean.mul_(1 - m).add_(m * mu)
        self.running_var.mul_(1 - m).add_(m * var)
        self._pending = []

    def to_cbrn(self, eta: float = 0.01) -> CBRN:
        return CBRN.from_state(init_from_bn(self.running_mean, self.running_var, self.eps, eta))
