"""Method variants (HSI, its single-mechanism ablations, and the comparison baselines)."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import NetworkConfig, build_network
from .distill import PseudoLabel, build_pseudo_label
from .synthdata import Dataset, concat
from .training import fit_supervised


@dataclass(frozen=True)
class MethodVariant:
    name: str
    use_mmd: bool = True
    use_d3f: bool = True
    use_cbrn: bool = True
    use_pseudo_labels: bool = True
    joint: bool = False
    description: str = ""


_CATALOG = (
    MethodVariant("hsi", description="dual-flow + cBRN + pseudo-labels with momentum MixUp decay"),
    MethodVariant("hsi_no_mmd", use_mmd=False, description="HSI with lambda fixed at 1"),
    MethodVariant("hsi_no_d3f", use_d3f=False, description="HSI training a single branch"),
    MethodVariant("hsi_no_cbrn", use_cbrn=False, description="HSI with standard batch normalization"),
    MethodVariant("si_only", use_mmd=False, use_d3f=False, use_cbrn=False,
                  description="old prediction + new mask as pseudo-label, single branch, batch norm"),
    MethodVariant("finetune", use_mmd=False, use_d3f=False, use_cbrn=False, use_pseudo_labels=False,
                  description="cross-entropy on the stage labels only"),
    MethodVariant("joint_static", use_mmd=False, use_d3f=False, use_cbrn=False, use_pseudo_labels=False,
                  joint=True, description="one supervised model on all stages' fully labelled data"),
)

METHODS = tuple(v.name for v in _CATALOG)


def variant_catalog() -> list[MethodVariant]:
    return list(_CATALOG)


def get_variant(name: str) -> MethodVariant:
    for v in _CATALOG:
        if v.name == name:
            return v
    raise ValueError(f"unknown method {name!r}; valid choices: {', '.join(METHODS)}")


def si_only_pseudo_label(old_probs: torch.Tensor, new_probs: torch.Tensor, new_gt: torch.Tensor) -> PseudoLabel:
    """Old prediction taken as ground truth on old categories, new mask on top."""
    return build_pseudo_label(old_probs, new_probs, new_gt, 1.0)


def joint_static_train(datasets: list[Dataset], network: NetworkConfig, label_space, epochs: int,
                       lr: float, batch_size: int = 8, seed: int = 0, log=None):
    """Upper bound: a single stage of supervised training on the union of fully-labelled sets."""
    from .checkpoint import checkpoint_from_network

    if not all(d.full_mask for d in datasets):
        raise ValueError("joint static training needs fully labelled datasets")
    union = concat(datasets, "joint")
    cfg = NetworkConfig(**{**network.to_dict(), "num_categories": len(label_space)})
    net = build_network(cfg, seed=seed)
    fit_supervised(net, union, label_space, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, log=log)
    return checkpoint_from_network(net, label_space=list(label_space), stage=len(datasets) - 1, seed=seed,
                                   extra={"method": "joint_static"})
