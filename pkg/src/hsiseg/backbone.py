"""Small U-shaped encoder-decoder used as the segmentor at every stage.

Every convolution lives in a *unit* (conv, normalization slot, rectifier).
Units are addressed by layer path (``enc0_0``, ``bott_1``, ``dec0_1``,
``head``), which is also the key layout of the checkpoint archive. The
dual-flow machinery swaps units in place; this module only requires that a
unit implements ``forward(z, mode)`` and ``commit()``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cbrn import EVAL, BatchNorm, check_mode

HEAD = "head"


@dataclass
class NetworkConfig:
    in_channels: int = 1
    base_width: int = 16
    depth: int = 2
    kernel: int = 3
    num_categories: int = 2

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_categories < 2:
            raise ValueError(f"num_categories must be >= 2, got {self.num_categories}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd size, got {self.kernel}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConvParams:
    weight: torch.Tensor  # [out_ch, in_ch, kh, kw]
    bias: torch.Tensor  # [out_ch]

    def __post_init__(self):
        if self.weight.dim() != 4 or self.bias.dim() != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"inconsistent conv shapes: weight {tuple(self.weight.shape)}, bias {tuple(self.bias.shape)}"
            )
        if not (torch.isfinite(self.weight).all() and torch.isfinite(self.bias).all()):
            raise ValueError("conv parameters must be finite")

    def clone(self) -> "ConvParams":
        return ConvParams(self.weight.detach().clone(), self.bias.detach().clone())


def he_init(out_ch: int, in_ch: int, k: int, generator: torch.Generator) -> ConvParams:
    std = math.sqrt(2.0 / (in_ch * k * k))
    w = torch.randn(out_ch, in_ch, k, k, generator=generator) * std
    return ConvParams(w, torch.zeros(out_ch))


class Conv(nn.Module):
    def __init__(self, params: ConvParams, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(params.weight.detach().clone())
        self.bias = nn.Parameter(params.bias.detach().clone())
        self.stride = stride

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight.detach(), self.bias.detach())

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        pad = self.weight.shape[-1] // 2
        return F.conv2d(z, self.weight, self.bias, stride=self.stride, padding=pad)


class ConvUnit(nn.Module):
    """conv -> optional normalization -> optional ReLU."""

    dual = False

    def __init__(self, conv: Conv, norm: nn.Module | None, act: bool = True):
        super().__init__()
        self.conv = conv
        self.norm = norm
        self.act = act

    @property
    def stride(self) -> int:
        return self.conv.stride

    def forward(self, z: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
        a = self.conv(z)
        if self.norm is not None:
            self.norm.reset_pending()
            a = self.norm(a, mode)
        return F.relu(a) if self.act else a

    def commit(self) -> None:
        if self.norm is not None:
            self.norm.commit()


def layer_plan(config: NetworkConfig) -> list[tuple[str, int, int, int]]:
    """(path, in_ch, out_ch, stride) for every 3x3 unit, in execution order."""
    w = config.base_width
    plan = []
    cin = config.in_channels
    for lvl in range(config.depth):
        width = w * 2**lvl
        plan.append((f"enc{lvl}_0", cin, width, 1 if lvl == 0 else 2))
        plan.append((f"enc{lvl}_1", width, width, 1))
        cin = width
    width = w * 2**config.depth
    plan.append(("bott_0", cin, width, 2))
    plan.append(("bott_1", width, width, 1))
    below = width
    for lvl in reversed(range(config.depth)):
        width = w * 2**lvl
        plan.append((f"dec{lvl}_0", below + width, width, 1))
        plan.append((f"dec{lvl}_1", width, width, 1))
        below = width
    return plan


class SegNet(nn.Module):
    def __init__(self, config: NetworkConfig, units: dict[str, nn.Module]):
        super().__init__()
        self.config = replace(config)  # expand_head mutates it
        self.units = nn.ModuleDict(units)

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected images [B, {self.config.in_channels}, H, W], got {tuple(images.shape)}"
            )
        f = 2**self.config.depth
        if images.shape[2] % f or images.shape[3] % f:
            raise ValueError(f"spatial size {tuple(images.shape[2:])} not divisible by 2^depth={f}")

    def forward(self, images: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
        check_mode(mode)
        self.check_input(images)
        u = self.units
        z = images
        skips = []
        for lvl in range(self.config.depth):
            z = u[f"enc{lvl}_1"](u[f"enc{lvl}_0"](z, mode), mode)
            skips.append(z)
        z = u["bott_1"](u["bott_0"](z, mode), mode)
        for lvl in reversed(range(self.config.depth)):
            z = F.interpolate(z, scale_factor=2, mode="nearest")
            z = torch.cat([z, skips[lvl]], dim=1)
            z = u[f"dec{lvl}_1"](u[f"dec{lvl}_0"](z, mode), mode)
        return u[HEAD](z, mode)

    def commit_norm_stats(self) -> None:
        for unit in self.units.values():
            unit.commit()

    def unit_paths(self) -> list[str]:
        return list(self.units.keys())

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def build_network(config: NetworkConfig, seed: int = 0) -> SegNet:
    config.validate()
    g = torch.Generator().manual_seed(seed)
    units = {}
    for path, cin, cout, stride in layer_plan(config):
        conv = Conv(he_init(cout, cin, config.kernel, g), stride=stride)
        units[path] = ConvUnit(conv, BatchNorm(cout), act=True)
    head = he_init(config.num_categories, config.base_width, 1, g)
    units[HEAD] = ConvUnit(Conv(head), None, act=False)
    return SegNet(config, units)


def forward(net: SegNet, images: torch.Tensor, mode: str = EVAL) -> torch.Tensor:
    """Logits [B, num_categories, H, W]."""
    return net(images, mode)


def head_init(k_new: int, in_ch: int, seed: int, scale: float = 1e-2) -> ConvParams:
    g = torch.Generator().manual_seed(seed)
    return ConvParams(torch.randn(k_new, in_ch, 1, 1, generator=g) * scale, torch.zeros(k_new))


@torch.no_grad()
def expand_head(net: SegNet, k_new: int, seed: int = 0, scale: float = 1e-2) -> SegNet:
    """Append ``k_new`` output channels to the classifier, in place.

    Existing rows are left untouched; new rows get N(0, scale^2) weights and
    zero bias. Dual heads get the same new rows in both branches.
    """
    if k_new < 1:
        raise ValueError(f"k_new must be >= 1, got {k_new}")
    head = net.units[HEAD]
    extra = head_init(k_new, net.config.base_width, seed, scale)
    head.append_output_channels(extra) if head.dual else _append_rows(head.conv, extra)
    net.config.num_categories += k_new
    return net


def _append_rows(conv: Conv, extra: ConvParams) -> None:
    dtype = conv.weight.dtype
    conv.weight = nn.Parameter(torch.cat([conv.weight.detach(), extra.weight.to(dtype)], dim=0))
    conv.bias = nn.Parameter(torch.cat([conv.bias.detach(), extra.bias.to(dtype)], dim=0))


def param_count(net: SegNet) -> int:
    """Number of convolution parameters used at inference (one branch per unit)."""
    total = 0
    for unit in net.units.values():
        if unit.dual:
            total += unit.weight_p.numel() + unit.bias_p.numel()
        else:
            total += unit.conv.weight.numel() + unit.conv.bias.numel()
    return total


def train_stage0(net: SegNet, dataset, epochs: int, lr: float, batch_size: int = 8,
                 seed: int = 0, label_space=(0, 1), log=None):
    """Supervised cross-entropy training of the initial segmentor.

    ``dataset`` masks may only contain ids from ``label_space``. Returns a
    :class:`~hsiseg.checkpoint.Checkpoint` at stage 0.
    """
    from .checkpoint import checkpoint_from_network
    from .training import fit_supervised

    fit_supervised(net, dataset, label_space, epochs=epochs, lr=lr, batch_size=batch_size,
                   seed=seed, log=log)
    return checkpoint_from_network(net, label_space=list(label_space), stage=0, seed=seed)


def predict(net: SegNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Argmax channel index for ``images`` [N, H, W] in eval mode."""
    out = []
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i:i + batch_size], dtype=dtype)[:, None]
            out.append(net(x, EVAL).argmax(1).numpy())
    return np.concatenate(out).astype(np.int64)
