"""Shared training-loop plumbing: batching, label mapping, plain SGD."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .cbrn import TRAIN


class NumericalFailure(FloatingPointError):
    """Raised when a training loss stops being finite."""


def set_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def label_lut(label_space) -> np.ndarray:
    """Lookup table category id -> channel index; -1 for ids outside the space."""
    lut = np.full(256, -1, dtype=np.int64)
    for j, c in enumerate(label_space):
        lut[c] = j
    return lut


def to_index(masks: np.ndarray, label_space) -> np.ndarray:
    idx = label_lut(label_space)[masks]
    if (idx < 0).any():
        bad = sorted(set(np.unique(masks[idx < 0]).tolist()))
        raise ValueError(f"mask ids {bad} outside label space {list(label_space)}")
    return idx


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def images_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(images, dtype=dtype)[:, None]


@torch.no_grad()
def sgd_step(params, lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.sub_(lr * p.grad)
            p.grad = None
            if not torch.isfinite(p).all():
                raise NumericalFailure("non-finite parameter after SGD update")


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite loss ({loss.item()}) at {where}")


def fit_supervised(net, dataset, label_space, epochs: int, lr: float, batch_size: int = 8,
                   seed: int = 0, log=None) -> list[float]:
    """Hard-label cross-entropy with plain SGD; returns the mean loss per epoch."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    targets = torch.as_tensor(to_index(dataset.masks, label_space))
    dtype = next(net.parameters()).dtype
    rng = np.random.default_rng([seed, 2])
    params = net.trainable_parameters()
    history = []
    it = 0
    for epoch in range(epochs):
        total = 0.0
        for idx in batches(len(dataset), batch_size, rng):
            x = images_tensor(dataset.images[idx], dtype)
            logits = net(x, TRAIN)
            loss = F.cross_entropy(logits, targets[idx])
            check_finite(loss, f"epoch {epoch} iteration {it}")
            loss.backward()
            sgd_step(params, lr)
            net.commit_norm_stats()
            total += loss.item() * len(idx)
            if log is not None:
                log(f"iter={it} epoch={epoch} loss={loss.item():.6f}")
            it += 1
        history.append(total / len(dataset))
    return history
