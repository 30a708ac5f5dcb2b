"""Checkpoint container.

A checkpoint is a single ``.npz`` archive (numpy's zip of ``.npy`` arrays, so
it can be read with nothing but numpy). Layout, format version 1::

    meta.json                 uint8 array holding UTF-8 JSON (see below)
    unit/<path>/weight        plain unit conv weight [out, in, kh, kw]
    unit/<path>/bias          plain unit conv bias [out]
    unit/<path>/weight_r ...  dual unit: weight_r, bias_r, weight_p, bias_p
    norm/<path>/running_mean  batchnorm slot: running_mean, running_var
    norm/<path>/mu_c          cbrn slot: mu_c, sigma_c

``meta.json`` keys: ``format`` ("hsiseg-checkpoint"), ``version``,
``network`` (NetworkConfig fields), ``label_space``, ``stage``, ``seed``,
``form`` ("merged" or "dual"), ``units`` (per path: kind, stride, act and
the norm description ``{kind, eps, eta | momentum}``) and ``extra`` (free
provenance such as the config echo).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Conv, ConvParams, ConvUnit, NetworkConfig, SegNet, build_network
from .cbrn import CBRN, BatchNorm
from .dualflow import DualConvBlock

FORMAT = "hsiseg-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: NetworkConfig
    arrays: dict[str, np.ndarray]
    units: dict[str, dict]
    label_space: list[int]
    stage: int
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def form(self) -> str:
        return "dual" if any(u["kind"] == "dual" for u in self.units.values()) else "merged"

    def meta(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "network": self.network.to_dict(),
            "label_space": list(self.label_space),
            "stage": self.stage,
            "seed": self.seed,
            "form": self.form,
            "units": self.units,
            "extra": self.extra,
        }

    def norm_state(self, path: str) -> dict[str, np.ndarray]:
        prefix = f"norm/{path}/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def _norm_meta(norm) -> dict | None:
    if norm is None:
        return None
    if isinstance(norm, CBRN):
        return {"kind": "cbrn", "eta": norm.eta, "eps": norm.eps}
    if isinstance(norm, BatchNorm):
        return {"kind": "batchnorm", "momentum": norm.momentum, "eps": norm.eps}
    raise CheckpointError(f"cannot serialize normalization {type(norm).__name__}")


def checkpoint_from_network(net: SegNet, label_space, stage: int, seed: int = 0,
                            extra: dict | None = None) -> Checkpoint:
    if len(label_space) != net.config.num_categories:
        raise CheckpointError(
            f"label space has {len(label_space)} entries but the head has {net.config.num_categories}"
        )
    arrays: dict[str, np.ndarray] = {}
    units: dict[str, dict] = {}
    for path, unit in net.units.items():
        if unit.dual:
            for name in ("weight_r", "bias_r", "weight_p", "bias_p"):
                arrays[f"unit/{path}/{name}"] = _np(getattr(unit, name))
        else:
            arrays[f"unit/{path}/weight"] = _np(unit.conv.weight)
            arrays[f"unit/{path}/bias"] = _np(unit.conv.bias)
        norm = unit.norm
        if isinstance(norm, CBRN):
            arrays[f"norm/{path}/mu_c"] = _np(norm.mu_c)
            arrays[f"norm/{path}/sigma_c"] = _np(norm.sigma_c)
        elif isinstance(norm, BatchNorm):
            arrays[f"norm/{path}/running_mean"] = _np(norm.running_mean)
            arrays[f"norm/{path}/running_var"] = _np(norm.running_var)
        units[path] = {
            "kind": "dual" if unit.dual else "conv",
            "stride": unit.stride,
            "act": unit.act,
            "norm": _norm_meta(norm),
        }
    cfg = NetworkConfig(**net.config.to_dict())
    return Checkpoint(cfg, arrays, units, [int(c) for c in label_space], int(stage), int(seed),
                      dict(extra or {}))


def _tensor(ckpt: Checkpoint, key: str) -> torch.Tensor:
    try:
        return torch.from_numpy(ckpt.arrays[key].copy())
    except KeyError:
        raise CheckpointError(f"checkpoint is missing array {key!r}") from None


def _build_norm(ckpt: Checkpoint, path: str, meta: dict | None):
    if meta is None:
        return None
    if meta["kind"] == "cbrn":
        mu = _tensor(ckpt, f"norm/{path}/mu_c")
        norm = CBRN(mu.numel(), eta=meta["eta"], eps=meta["eps"])
        norm.mu_c = mu
        norm.sigma_c = _tensor(ckpt, f"norm/{path}/sigma_c")
        return norm
    if meta["kind"] == "batchnorm":
        mean = _tensor(ckpt, f"norm/{path}/running_mean")
        norm = BatchNorm(mean.numel(), momentum=meta["momentum"], eps=meta["eps"])
        norm.running_mean = mean
        norm.running_var = _tensor(ckpt, f"norm/{path}/running_var")
        return norm
    raise CheckpointError(f"unknown normalization kind {meta['kind']!r} at {path}")


def network_from_checkpoint(ckpt: Checkpoint) -> SegNet:
    cfg = NetworkConfig(**ckpt.network.to_dict())
    head_key = "unit/head/weight_p" if ckpt.units.get("head", {}).get("kind") == "dual" else "unit/head/weight"
    if head_key not in ckpt.arrays or ckpt.arrays[head_key].shape[0] != len(ckpt.label_space):
        raise CheckpointError("label-space length does not match classifier channels")
    try:
        net = build_network(cfg)
    except ValueError as exc:
        raise CheckpointError(f"invalid network config in checkpoint: {exc}") from exc
    expected = set(net.unit_paths())
    if set(ckpt.units) != expected:
        raise CheckpointError(f"unit paths {sorted(ckpt.units)} do not match network {sorted(expected)}")
    for path, meta in ckpt.units.items():
        norm = _build_norm(ckpt, path, meta["norm"])
        if meta["kind"] == "dual":
            block = DualConvBlock(
                ConvParams(_tensor(ckpt, f"unit/{path}/weight_r"), _tensor(ckpt, f"unit/{path}/bias_r")),
                norm, stride=meta["stride"], act=meta["act"],
            )
            with torch.no_grad():
                block.weight_p = torch.nn.Parameter(_tensor(ckpt, f"unit/{path}/weight_p"))
                block.bias_p = torch.nn.Parameter(_tensor(ckpt, f"unit/{path}/bias_p"))
            net.units[path] = block
        elif meta["kind"] == "conv":
            params = ConvParams(_tensor(ckpt, f"unit/{path}/weight"), _tensor(ckpt, f"unit/{path}/bias"))
            net.units[path] = ConvUnit(Conv(params, stride=meta["stride"]), norm, act=meta["act"])
        else:
            raise CheckpointError(f"unknown unit kind {meta['kind']!r} at {path}")
    return net


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = np.frombuffer(json.dumps(ckpt.meta(), sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **{"meta.json": meta}, **ckpt.arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta.json" not in arrays:
        raise CheckpointError(f"{path} has no meta.json entry")
    meta = json.loads(arrays.pop("meta.json").tobytes().decode())
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} archive")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    return Checkpoint(
        network=NetworkConfig(**meta["network"]),
        arrays=arrays,
        units=meta["units"],
        label_space=meta["label_space"],
        stage=meta["stage"],
        seed=meta["seed"],
        extra=meta.get("extra", {}),
    )
