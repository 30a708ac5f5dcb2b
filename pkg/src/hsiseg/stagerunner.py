"""Multi-stage incremental protocol: stage 0, dual-flow stages, merge, evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import NetworkConfig, build_network, expand_head, param_count, predict, train_stage0
from .baselines import get_variant, joint_static_train
from .cbrn import EVAL, TRAIN
from .checkpoint import Checkpoint, checkpoint_from_network, network_from_checkpoint, save_checkpoint
from .distill import (NOT_NEW, ScheduleState, alpha_schedule, build_pseudo_label, cross_entropy_soft,
                      hard_label, momentum_lambda, total_loss)
from .dualflow import convert_norms, make_dual, merge_network, rigidity_bytes
from .metrics import MetricsReport, aggregate, score_masks
from .synthdata import Benchmark, Dataset
from .training import batches, check_finite, images_tensor, iterations_per_epoch, label_lut, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class StageSpec:
    stage_index: int
    domain_id: int
    new_categories: list[int]
    train: Dataset | None = None
    val: Dataset | None = None
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.1
    seed: int = 0


@dataclass
class ScheduleParams:
    # alpha0 = 10 drives this backbone to all-background within a stage
    # (scripts/sweep_alpha0.py); 0.1 keeps the regulariser without the collapse
    lambda0: float = 1.0
    k: float = 5.0
    alpha0: float = 0.1
    eta: float = 0.01
    decay: str = "scaled"


@dataclass
class ProtocolConfig:
    stages: list[StageSpec]
    method: str = "hsi"
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    output_dir: str | None = None
    seed: int = 0
    hd_percentile: float = 100.0
    spacing: float = 1.0

    def validate(self) -> None:
        variant = get_variant(self.method)
        if not variant.joint and len(self.stages) < 2:
            raise ValueError("incremental methods need at least two stages")
        seen: set[int] = {0}
        for t, s in enumerate(self.stages):
            if s.stage_index != t:
                raise ValueError(f"stage {t} has stage_index {s.stage_index}")
            if not s.new_categories or seen & set(s.new_categories):
                raise ValueError(f"stage {t} new categories {s.new_categories} collide with {sorted(seen)}")
            seen |= set(s.new_categories)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    dual_checkpoint: Checkpoint | None
    rigidity_unchanged: bool | None
    cbrn_start: dict[str, np.ndarray]
    old_probe: tuple[np.ndarray, np.ndarray] | None
    losses: list[float]
    val_dice: float | None = None


@dataclass
class RunReport:
    method: str
    stage_metrics: list[MetricsReport]
    final: MetricsReport
    label_space: list[int]
    param_counts: list[int]
    benchmark_hash: str = ""
    schedule: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "benchmark_hash": self.benchmark_hash,
            "label_space": self.label_space,
            "param_counts": self.param_counts,
            "schedule": self.schedule,
            "stages": [m.to_dict() for m in self.stage_metrics],
            "final": self.final.to_dict(),
            "records": [asdict(r) for m in self.stage_metrics for r in m.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["method"], [MetricsReport.from_dict(m) for m in d["stages"]],
                   MetricsReport.from_dict(d["final"]), d["label_space"], d["param_counts"],
                   d.get("benchmark_hash", ""), d.get("schedule", {}))


def _norm_state(net) -> dict[str, np.ndarray]:
    out = {}
    for path, unit in net.units.items():
        norm = unit.norm
        if norm is not None and norm.kind == "cbrn":
            out[path] = np.stack([norm.mu_c.numpy().copy(), norm.sigma_c.numpy().copy()])
    return out


def _stage_new_gt(masks: np.ndarray, new_categories, label_space) -> np.ndarray:
    lut = label_lut(label_space)
    keep = np.isin(masks, new_categories)
    return np.where(keep, lut[masks], NOT_NEW)


def run_stage(prev: Checkpoint, spec: StageSpec, method: str = "hsi",
              schedule: ScheduleParams | None = None, probe: torch.Tensor | None = None,
              log=None) -> StageResult:
    """Train one incremental stage starting from ``prev`` and return the merged checkpoint."""
    variant = get_variant(method)
    if variant.joint:
        raise ValueError("joint_static has no incremental stages")
    schedule = schedule or ScheduleParams()
    if set(prev.label_space) & set(spec.new_categories):
        raise ValueError(f"new categories {spec.new_categories} collide with {prev.label_space}")
    if spec.train is None or len(spec.train) == 0:
        raise ValueError(f"stage {spec.stage_index} has no training data")
    present = set(spec.train.categories()) - {0}
    if not present <= set(spec.new_categories):
        raise ValueError(f"stage {spec.stage_index} training masks carry ids {sorted(present)}")

    label_space = list(prev.label_space) + list(spec.new_categories)
    old_net = network_from_checkpoint(prev)
    for p in old_net.parameters():
        p.requires_grad_(False)
    net = network_from_checkpoint(prev)
    convert_norms(net, "cbrn" if variant.use_cbrn else "batchnorm", schedule.eta)
    if variant.use_d3f:
        make_dual(net)
    expand_head(net, len(spec.new_categories), seed=spec.seed + 7919 * spec.stage_index)
    cbrn_start = _norm_state(net)
    rigid_before = rigidity_bytes(net) if variant.use_d3f else None

    dtype = next(net.parameters()).dtype
    n = len(spec.train)
    i_max = spec.epochs * iterations_per_epoch(n, spec.batch_size)
    sched = ScheduleState(0, i_max, schedule.lambda0, schedule.k, schedule.alpha0, schedule.decay)
    new_gt_all = torch.as_tensor(_stage_new_gt(spec.train.masks, spec.new_categories, label_space))
    finetune_targets = torch.as_tensor(label_lut(label_space)[spec.train.masks])
    params = net.trainable_parameters()
    rng = np.random.default_rng([spec.seed, spec.stage_index, 3])

    probe_start = None
    if probe is not None:
        with torch.no_grad():
            probe_start = old_net(probe, EVAL).numpy().copy()

    losses = []
    for epoch in range(spec.epochs):
        for idx in batches(n, spec.batch_size, rng):
            x = images_tensor(spec.train.images[idx], dtype)
            logits = net(x, TRAIN)
            lam = alpha = 0.0
            if variant.use_pseudo_labels:
                with torch.no_grad():
                    old_probs = F.softmax(old_net(x, EVAL), dim=1)
                    new_probs = F.softmax(logits.detach(), dim=1)
                lam = momentum_lambda(sched) if variant.use_mmd else 1.0
                pl = build_pseudo_label(old_probs, new_probs, new_gt_all[idx], lam)
                alpha = alpha_schedule(sched)
                loss = total_loss(logits, pl, sched)
            else:
                # old structures are unlabelled here, so they train as background
                pl = hard_label(finetune_targets[idx], len(label_space), logits.dtype)
                loss = cross_entropy_soft(logits, pl)
            check_finite(loss, f"stage {spec.stage_index} iteration {sched.I}")
            loss.backward()
            sgd_step(params, spec.lr)
            net.commit_norm_stats()
            losses.append(loss.item())
            if log is not None:
                log(f"stage={spec.stage_index} iter={sched.I} epoch={epoch} loss={loss.item():.6f} "
                    f"lambda={lam:.6g} alpha={alpha:.6g}")
            sched.I += 1

    probe_pair = None
    if probe is not None:
        with torch.no_grad():
            probe_pair = (probe_start, old_net(probe, EVAL).numpy().copy())

    extra = {"method": method, "schedule": asdict(schedule), "I_max": i_max}
    dual_ckpt = None
    rigid_ok = None
    if variant.use_d3f:
        rigid_ok = rigidity_bytes(net) == rigid_before
        dual_ckpt = checkpoint_from_network(net, label_space, spec.stage_index, spec.seed, extra)
        merge_network(net, spec.stage_index)
    ckpt = checkpoint_from_network(net, label_space, spec.stage_index, spec.seed, extra)

    val_dice = None
    if spec.val is not None and len(spec.val):
        rep = score_masks(np.asarray(label_space)[predict(net, spec.val.images)], spec.val.masks,
                          spec.val.domain_ids, spec.new_categories, method, spec.stage_index)
        val_dice = rep.mean_dice
    return StageResult(ckpt, dual_ckpt, rigid_ok, cbrn_start, probe_pair, losses, val_dice)


def evaluate_checkpoint(ckpt: Checkpoint, test_set: Dataset, method: str = "", percentile: float = 100.0,
                        spacing: float = 1.0) -> MetricsReport:
    """Per-domain, per-category Dice/HD of ``ckpt`` on fully labelled ``test_set``."""
    if not test_set.full_mask:
        raise ValueError("evaluation needs fully labelled masks")
    net = network_from_checkpoint(ckpt)
    pred = np.asarray(ckpt.label_space)[predict(net, test_set.images)]
    cats = [c for c in ckpt.label_space if c != 0]
    return score_masks(pred, test_set.masks, test_set.domain_ids, cats, method, ckpt.stage,
                       percentile, spacing)


def default_protocol(bench: Benchmark, method: str = "hsi", epochs: int = 20, batch_size: int = 8,
                     lr: float = 0.1, seed: int = 0, **kw) -> ProtocolConfig:
    stages = [StageSpec(t, t, [t + 1], bench.train[t], bench.val[t], epochs, batch_size, lr, seed)
              for t in range(len(bench.train))]
    return ProtocolConfig(stages=stages, method=method, seed=seed, **kw)


def train_initial(config: ProtocolConfig, log=None) -> Checkpoint:
    s0 = config.stages[0]
    cfg = NetworkConfig(**{**config.network.to_dict(), "num_categories": 1 + len(s0.new_categories)})
    net = build_network(cfg, seed=config.seed)
    return train_stage0(net, s0.train, s0.epochs, s0.lr, s0.batch_size, s0.seed,
                        label_space=[0] + list(s0.new_categories), log=log)


def run_protocol(config: ProtocolConfig, test_set: Dataset, stage0: Checkpoint | None = None,
                 full_train: list[Dataset] | None = None, benchmark_hash: str = "") -> RunReport:
    """Run every stage of ``config`` and evaluate each checkpoint on the all-domain test set.

    ``stage0`` may supply an already trained initial checkpoint (it is
    deterministic given the config). When ``output_dir`` is set, stage
    checkpoints, per-stage metrics, a training log and ``report.json`` are
    written there; a failing stage leaves the earlier files in place.
    """
    config.validate()
    variant = get_variant(config.method)
    out = Path(config.output_dir) if config.output_dir else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.txt", "w")

    def log(line: str) -> None:
        if log_file is not None:
            log_file.write(line + "\n")

    def persist(t: int, ckpt: Checkpoint, metrics: MetricsReport, dual: Checkpoint | None = None) -> None:
        if out is None:
            return
        save_checkpoint(ckpt, out / f"stage_{t}.ckpt")
        if dual is not None:
            save_checkpoint(dual, out / f"stage_{t}.dual.ckpt")
        (out / f"metrics_stage_{t}.json").write_text(metrics.to_json() + "\n")

    def evaluate(ckpt):
        return evaluate_checkpoint(ckpt, test_set, config.method, config.hd_percentile, config.spacing)

    try:
        stage_metrics, counts = [], []
        if variant.joint:
            if full_train is None:
                raise ValueError("joint_static needs the fully labelled training sets")
            labels = [0] + [c for s in config.stages for c in s.new_categories]
            s = config.stages[0]
            ckpt = joint_static_train(full_train, config.network, labels, s.epochs, s.lr, s.batch_size,
                                      s.seed, log=log)
            counts.append(param_count(network_from_checkpoint(ckpt)))
            stage_metrics.append(evaluate(ckpt))
            persist(ckpt.stage, ckpt, stage_metrics[-1])
        else:
            ckpt = stage0 if stage0 is not None else train_initial(config, log)
            counts.append(param_count(network_from_checkpoint(ckpt)))
            stage_metrics.append(evaluate(ckpt))
            persist(0, ckpt, stage_metrics[-1])
            for spec in config.stages[1:]:
                logger.info("%s: stage %d", config.method, spec.stage_index)
                res = run_stage(ckpt, spec, config.method, config.schedule, log=log)
                ckpt = res.checkpoint
                counts.append(param_count(network_from_checkpoint(ckpt)))
                stage_metrics.append(evaluate(ckpt))
                log(f"stage={spec.stage_index} val_dice={res.val_dice}")
                persist(spec.stage_index, ckpt, stage_metrics[-1], res.dual_checkpoint)
        final = aggregate(stage_metrics[-1].rows)
        report = RunReport(config.method, stage_metrics, final, list(ckpt.label_space), counts,
                           benchmark_hash, asdict(config.schedule))
        if out is not None:
            (out / "report.json").write_text(report.to_json() + "\n")
        return report
    finally:
        if log_file is not None:
            log_file.close()
