import json

import numpy as np
import pytest
import torch

from hsiseg.backbone import param_count
from hsiseg.checkpoint import load_checkpoint, network_from_checkpoint
from hsiseg.stagerunner import (RunReport, StageSpec, evaluate_checkpoint, run_protocol, run_stage)


@pytest.fixture(scope="module")
def hsi_stage1(tiny_protocol, tiny_stage0):
    cfg = tiny_protocol("hsi")
    probe = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(0))
    return run_stage(tiny_stage0, cfg.stages[1], "hsi", cfg.schedule, probe=probe)


def test_label_space_grows(tiny_stage0, hsi_stage1):
    assert tiny_stage0.label_space == [0, 1]
    assert hsi_stage1.checkpoint.label_space == [0, 1, 2]


def test_merged_size_matches_single_branch_with_grown_head(tiny_stage0, hsi_stage1):
    n0 = param_count(network_from_checkpoint(tiny_stage0))
    n1 = param_count(network_from_checkpoint(hsi_stage1.checkpoint))
    head = network_from_checkpoint(tiny_stage0).units["head"].conv
    assert n1 - n0 == head.weight.shape[1] + 1


def test_rigidity_untouched(hsi_stage1):
    assert hsi_stage1.rigidity_unchanged is True
    assert hsi_stage1.dual_checkpoint.form == "dual"
    assert hsi_stage1.checkpoint.form == "merged"


def test_cbrn_starts_from_previous_stats(tiny_stage0, hsi_stage1):
    sigma_by_path = {}
    for path, unit in network_from_checkpoint(tiny_stage0).units.items():
        if unit.norm is not None:
            sigma_by_path[path] = (unit.norm.running_mean.numpy(),
                                   np.sqrt(unit.norm.running_var.numpy() + unit.norm.eps))
    assert set(sigma_by_path) == set(hsi_stage1.cbrn_start)
    for path, (mu, sig) in sigma_by_path.items():
        np.testing.assert_allclose(hsi_stage1.cbrn_start[path][0], mu, rtol=1e-6)
        np.testing.assert_allclose(hsi_stage1.cbrn_start[path][1], sig, rtol=1e-6)


def test_old_model_predictions_unchanged(hsi_stage1):
    before, after = hsi_stage1.old_probe
    assert np.array_equal(before, after)


def test_losses_finite(hsi_stage1):
    assert hsi_stage1.losses and np.all(np.isfinite(hsi_stage1.losses))


def test_colliding_categories_rejected(tiny_protocol, tiny_stage0):
    spec = tiny_protocol().stages[1]
    bad = StageSpec(1, 1, [1], spec.train, spec.val, 1, 3)
    with pytest.raises(ValueError):
        run_stage(tiny_stage0, bad)


def test_empty_stage_rejected(tiny_protocol, tiny_stage0):
    empty = tiny_protocol().stages[1].train.subset(99)
    with pytest.raises(ValueError):
        run_stage(tiny_stage0, StageSpec(1, 1, [2], empty, None, 1, 3))


def test_evaluate_oracle_predictions(tiny_bench, tiny_stage0):
    test = tiny_bench[1].test
    # a checkpoint whose head always picks background gives Dice 0 on every present structure
    net = network_from_checkpoint(tiny_stage0)
    with torch.no_grad():
        net.units["head"].conv.weight.zero_()
        net.units["head"].conv.bias.copy_(torch.tensor([5.0, -5.0]))
    from hsiseg.checkpoint import checkpoint_from_network

    rep = evaluate_checkpoint(checkpoint_from_network(net, [0, 1], 0), test)
    assert rep.mean_dice == 0.0
    assert rep.hd_undefined > 0 and rep.mean_hd is None


def test_evaluate_requires_full_masks(tiny_protocol, tiny_stage0):
    with pytest.raises(ValueError):
        evaluate_checkpoint(tiny_stage0, tiny_protocol().stages[0].train)


def test_protocol_outputs_and_round_trip(tmp_path, tiny_bench, tiny_protocol, tiny_stage0):
    cfg = tiny_protocol("hsi")
    cfg.output_dir = str(tmp_path)
    rep = run_protocol(cfg, tiny_bench[1].test, stage0=tiny_stage0, benchmark_hash="abc")
    for t in range(3):
        assert (tmp_path / f"stage_{t}.ckpt").exists()
        assert (tmp_path / f"metrics_stage_{t}.json").exists()
    assert (tmp_path / "stage_2.dual.ckpt").exists()
    loaded = RunReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    assert loaded.to_json() == rep.to_json()
    assert rep.label_space == [0, 1, 2, 3]
    log = (tmp_path / "train_log.txt").read_text().splitlines()
    assert any("lambda=" in line and "alpha=" in line for line in log)
    again = evaluate_checkpoint(load_checkpoint(tmp_path / "stage_2.ckpt"), tiny_bench[1].test, "hsi")
    assert again.to_json() == rep.stage_metrics[-1].to_json()


@pytest.mark.parametrize("method", ["finetune", "si_only", "hsi_no_cbrn", "hsi_no_d3f", "hsi_no_mmd"])
def test_every_variant_runs(method, tiny_bench, tiny_protocol, tiny_stage0):
    rep = run_protocol(tiny_protocol(method), tiny_bench[1].test, stage0=tiny_stage0)
    assert len(rep.stage_metrics) == 3
    assert len(set(rep.param_counts)) == 3


def test_joint_static_runs(tiny_bench, tiny_protocol):
    cfg, bench = tiny_bench
    rep = run_protocol(tiny_protocol("joint_static"), bench.test, full_train=bench.full_train(cfg))
    assert rep.label_space == [0, 1, 2, 3]


def test_protocol_deterministic(tiny_bench, tiny_protocol):
    a = run_protocol(tiny_protocol("hsi"), tiny_bench[1].test)
    b = run_protocol(tiny_protocol("hsi"), tiny_bench[1].test)
    assert a.to_json() == b.to_json()
