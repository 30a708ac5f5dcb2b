"""Dual-flow convolutions: frozen rigidity branch + trainable plasticity branch.

A :class:`DualConvBlock` keeps the rigidity copy as buffers (never seen by an
optimizer) and the plasticity copy as parameters. Both branches share one
normalization slot. In train mode the unit output is the average of the two
branch outputs, each normalized with its own batch statistics corrected
toward the shared continual statistics; in eval mode the same average reduces
to ``(W_r z + b_r - mu_c) / (2 sigma_c) + (W_p z + b_p - mu_c) / (2 sigma_c)``,
which is exactly the merged conv ``((W_r + W_p)/2, (b_r + b_p)/2)`` followed
by eval normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Conv, ConvParams, ConvUnit, SegNet
from .cbrn import CBRN, EVAL, BatchNorm


class DualConvBlock(nn.Module):
    dual = True

    def __init__(self, conv: ConvParams, norm: nn.Module | None = None, stride: int = 1,
                 act: bool = True):
        super().__init__()
        self.register_buffer("weight_r", conv.weight.detach().clone())
        self.register_buffer("bias_r", conv.bias.detach().clone())
        self.weight_p = nn.Parameter(conv.weight.detach().clone())
        self.bias_p = nn.Parameter(conv.bias.detach().clone())
        self.norm = norm
        self.stride = stride
        self.act = act

    @property
    def rigidity(self) -> ConvParams:
        return ConvParams(self.weight_r, self.bias_r)

    @property
    def plasticity(self) -> ConvParams:
        return ConvParams(self.weight_p.detach(), self.bias_p.detach())

    def _conv(self, z, w, b):
        return F.conv2d(z, w, b, stride=self.stride, padding=w.shape[-1] // 2)

    def branch_preactivations(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._conv(z, self.weight_r, self.bias_r), self._conv(z, self.weight_p, self.bias_p)

    def forward(self, z: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
        a_r, a_p = self.branch_preactivations(z)
        if self.norm is not None:
            self.norm.reset_pending()
            a_r = self.norm(a_r, mode)
            a_p = self.norm(a_p, mode)
        y = 0.5 * (a_r + a_p)
        return F.relu(y) if self.act else y

    def commit(self) -> None:
        if self.norm is not None:
            self.norm.commit()

    @torch.no_grad()
    def append_output_channels(self, extra: ConvParams) -> None:
        dtype = self.weight_p.dtype
        w = extra.weight.to(dtype)
        b = extra.bias.to(dtype)
        self.weight_r = torch.cat([self.weight_r, w], dim=0)
        self.bias_r = torch.cat([self.bias_r, b], dim=0)
        self.weight_p = nn.Parameter(torch.cat([self.weight_p.detach(), w], dim=0))
        self.bias_p = nn.Parameter(torch.cat([self.bias_p.detach(), b], dim=0))


@dataclass
class MergedConv:
    weight: torch.Tensor
    bias: torch.Tensor
    stage: int | None = None

    def folded(self, mu_c: torch.Tensor, sigma_c: torch.Tensor, eps: float = 1e-5) -> ConvParams:
        """Conv with the eval normalization folded in: (W/sigma_c, (b - mu_c)/sigma_c)."""
        s = sigma_c.clamp_min(eps)
        return ConvParams(self.weight / s.view(-1, 1, 1, 1), (self.bias - mu_c) / s)


def duplicate_from(conv: ConvParams, norm: nn.Module | None = None, stride: int = 1,
                   act: bool = True) -> DualConvBlock:
    return DualConvBlock(conv, norm, stride=stride, act=act)


def dual_forward(block: DualConvBlock, z: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
    return block(z, mode)


def merge(block: DualConvBlock, stage: int | None = None) -> MergedConv:
    with torch.no_grad():
        if block.weight_r.shape != block.weight_p.shape or block.bias_r.shape != block.bias_p.shape:
            raise AssertionError("rigidity and plasticity shapes diverged")
        w = 0.5 * (block.weight_r + block.weight_p)
        b = 0.5 * (block.bias_r + block.bias_p)
    return MergedConv(w.clone(), b.clone(), stage)


def merged_unit(block: DualConvBlock, stage: int | None = None) -> ConvUnit:
    m = merge(block, stage)
    return ConvUnit(Conv(ConvParams(m.weight, m.bias), stride=block.stride), block.norm, act=block.act)


def _convert_norm(norm: nn.Module | None, kind: str, eta: float) -> nn.Module | None:
    if norm is None:
        return None
    if kind == "cbrn":
        if isinstance(norm, CBRN):
            norm.eta = eta
            return norm
        return norm.to_cbrn(eta).to(norm.running_mean.dtype)
    if kind == "batchnorm":
        if isinstance(norm, BatchNorm):
            return norm
        # carry the continual statistics over as running estimates
        bn = BatchNorm(norm.mu_c.numel(), eps=norm.eps).to(norm.mu_c.dtype)
        bn.running_mean.copy_(norm.mu_c)
        bn.running_var.copy_(norm.sigma_c**2 - norm.eps)
        return bn
    raise ValueError(f"unknown normalization kind {kind!r}")


def convert_norms(net: SegNet, kind: str, eta: float = 0.01) -> SegNet:
    """Swap every normalization slot to ``kind`` ("cbrn" or "batchnorm"), in place."""
    for unit in net.units.values():
        unit.norm = _convert_norm(unit.norm, kind, eta)
    return net


def make_dual(net: SegNet) -> SegNet:
    """Replace every plain unit by a dual-flow block with identical branches, in place."""
    for path in net.unit_paths():
        unit = net.units[path]
        if unit.dual:
            continue
        net.units[path] = duplicate_from(unit.conv.params, unit.norm, stride=unit.stride, act=unit.act)
    return net


def merge_network(net: SegNet, stage: int | None = None) -> SegNet:
    """Collapse every dual block back to a single conv, in place."""
    for path in net.unit_paths():
        unit = net.units[path]
        if unit.dual:
            net.units[path] = merged_unit(unit, stage)
    return net


def rebuild_as_dual(checkpoint, norm: str = "cbrn", eta: float = 0.01) -> SegNet:
    """Promote a stage t-1 checkpoint to a dual-flow network with cBRN slots.

    Batch-norm running statistics seed the continual statistics. Head
    expansion is left to the caller.
    """
    from .checkpoint import network_from_checkpoint

    net = network_from_checkpoint(checkpoint)
    convert_norms(net, norm, eta)
    return make_dual(net)


def rigidity_bytes(net: SegNet) -> dict[str, bytes]:
    """Raw bytes of every rigidity tensor, keyed by layer path."""
    out = {}
    for path, unit in net.units.items():
        if unit.dual:
            out[path] = unit.weight_r.numpy().tobytes() + unit.bias_r.numpy().tobytes()
    return out


def random_block(in_ch: int, out_ch: int, kernel: int, generator: torch.Generator,
                 dtype=torch.float64, eta: float = 0.01) -> DualConvBlock:
    """Random dual block with distinct branches and random continual statistics."""
    def params():
        w = torch.randn(out_ch, in_ch, kernel, kernel, generator=generator, dtype=dtype)
        return ConvParams(w, torch.randn(out_ch, generator=generator, dtype=dtype))

    norm = CBRN(out_ch, eta=eta)
    norm.mu_c = torch.randn(out_ch, generator=generator, dtype=dtype)
    norm.sigma_c = 0.5 + torch.rand(out_ch, generator=generator, dtype=dtype) * 2
    block = duplicate_from(params(), norm, act=False)
    p = params()
    with torch.no_grad():
        block.weight_p.copy_(p.weight)
        block.bias_p.copy_(p.bias)
    return block

