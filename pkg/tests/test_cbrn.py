import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hsiseg.cbrn import (CBRN, BatchNorm, BatchStats, CBRNState, brn_normalize, compute_batch_stats,
                         init_from_bn, update_continual_stats)
from oracles import central_difference, two_pass_stats


def _state(mu, sigma, eta=0.01):
    return CBRNState(torch.as_tensor(mu, dtype=torch.float64), torch.as_tensor(sigma, dtype=torch.float64), eta)


class TestBatchStats:
    def test_constant_feature(self):
        s = compute_batch_stats(torch.full((2, 1, 3, 3), 3.0))
        assert s.mu_B.item() == 3.0
        assert s.sigma_B.item() == 0.0

    def test_plus_minus_one(self):
        x = torch.tensor([1.0, -1.0] * 8).view(2, 1, 2, 4)
        s = compute_batch_stats(x)
        assert s.mu_B.item() == 0.0
        assert s.sigma_B.item() == 1.0

    def test_matches_two_pass_oracle(self, gen):
        x = torch.randn(5, 4, 7, 6, generator=gen, dtype=torch.float64) * 3 + 2
        s = compute_batch_stats(x)
        for c in range(4):
            mu, sd = two_pass_stats(x[:, c].reshape(-1).tolist())
            assert abs(s.mu_B[c].item() - mu) < 1e-7
            assert abs(s.sigma_B[c].item() - sd) < 1e-7

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            compute_batch_stats(torch.zeros(0, 2, 3, 3))


class TestBrnNormalize:
    def test_identity_correction_is_batch_norm(self, gen):
        a = torch.randn(4, 3, 5, 5, generator=gen, dtype=torch.float64)
        stats = compute_batch_stats(a)
        state = CBRNState(stats.mu_B.clone(), stats.sigma_B.clone())
        out = brn_normalize(a, stats, state, "train")
        bn = (a - stats.mu_B.view(1, -1, 1, 1)) / stats.sigma_B.view(1, -1, 1, 1)
        torch.testing.assert_close(out, bn, rtol=0, atol=1e-12)

    def test_eval_at_mean_is_zero(self):
        state = _state([1.5, -2.0], [2.0, 0.5])
        a = state.mu_c.view(1, 2, 1, 1).expand(1, 2, 3, 3)
        assert torch.all(brn_normalize(a, None, state, "eval") == 0)

    def test_train_value_equals_global_normalization(self, gen):
        for _ in range(20):
            a = torch.randn(3, 4, 6, 6, generator=gen, dtype=torch.float64) * 2 + 1
            state = _state(torch.randn(4, generator=gen), 0.3 + torch.rand(4, generator=gen))
            out = brn_normalize(a, compute_batch_stats(a), state, "train")
            ref = (a - state.mu_c.view(1, -1, 1, 1)) / state.sigma_c.view(1, -1, 1, 1)
            assert (out - ref).abs().max().item() <= 1e-6

    def test_gradient_treats_corrections_as_constants(self, gen):
        a = torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        state = _state([0.3, -0.1], [1.7, 0.6])
        w = torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64)
        (brn_normalize(a, compute_batch_stats(a.detach()), state, "train") * w).sum().backward()

        s0 = compute_batch_stats(a.detach())
        r0 = (s0.sigma_B / state.sigma_c).view(1, -1, 1, 1)
        d0 = ((s0.mu_B - state.mu_c) / state.sigma_c).view(1, -1, 1, 1)
        x = a.detach().numpy().copy()

        def surrogate():
            t = torch.from_numpy(x)
            mu = t.mean(dim=(0, 2, 3), keepdim=True)
            sd = t.var(dim=(0, 2, 3), unbiased=False, keepdim=True).sqrt()
            return float((((t - mu) / sd * r0 + d0) * w).sum())

        for i in range(x.size):
            fd = central_difference(surrogate, x, i)
            assert abs(fd - a.grad.view(-1)[i].item()) <= 1e-6 * max(1.0, abs(fd))

    def test_non_finite_stats_rejected(self):
        state = _state([float("nan")], [1.0])
        with pytest.raises(FloatingPointError):
            brn_normalize(torch.zeros(1, 1, 2, 2, dtype=torch.float64), None, state, "eval")

    def test_optional_clipping(self):
        a = torch.tensor([0.0, 10.0] * 2, dtype=torch.float64).view(1, 1, 2, 2)
        state = _state([0.0], [1.0])
        out = brn_normalize(a, compute_batch_stats(a), state, "train", r_max=2.0, d_max=1.0)
        # r clipped to 2, d clipped to 1: values are (+-1) * 2 + 1
        torch.testing.assert_close(out.view(-1), torch.tensor([-1.0, 3.0, -1.0, 3.0], dtype=torch.float64))


class TestUpdate:
    def test_worked_example(self):
        state = _state([0.0], [1.0], eta=0.01)
        new = update_continual_stats(state, BatchStats(torch.tensor([1.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)),
                                     BatchStats(torch.tensor([3.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)))
        assert new.mu_c.item() == pytest.approx(0.02, abs=1e-15)

    def test_eta_zero_keeps_state(self, gen):
        state = _state(torch.randn(3, generator=gen), 1 + torch.rand(3, generator=gen), eta=0.0)
        s = BatchStats(torch.randn(3, dtype=torch.float64), torch.rand(3, dtype=torch.float64))
        new = update_continual_stats(state, s, s)
        assert torch.equal(new.mu_c, state.mu_c) and torch.equal(new.sigma_c, state.sigma_c)

    def test_eta_one_is_branch_average(self):
        state = _state([5.0], [5.0], eta=1.0)
        new = update_continual_stats(state, BatchStats(torch.tensor([1.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64)),
                                     BatchStats(torch.tensor([3.0], dtype=torch.float64), torch.tensor([4.0], dtype=torch.float64)))
        assert new.mu_c.item() == 2.0 and new.sigma_c.item() == 3.0

    def test_negative_sigma_rejected(self):
        state = _state([0.0], [1.0])
        bad = BatchStats(torch.tensor([0.0]), torch.tensor([-1.0]))
        with pytest.raises(ValueError):
            update_continual_stats(state, bad, bad)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_sigma_floor_and_finiteness(self, eta, seed):
        g = torch.Generator().manual_seed(seed)
        state = _state(torch.randn(4, generator=g), torch.rand(4, generator=g) * 1e-6, eta)
        s = BatchStats(torch.randn(4, generator=g, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        new = update_continual_stats(state, s, s)
        assert torch.isfinite(new.mu_c).all()
        assert (new.sigma_c >= state.eps).all()


class TestInitFromBn:
    def test_unit_variance(self):
        s = init_from_bn(torch.tensor([0.0]), torch.tensor([1.0]))
        assert s.mu_c.item() == 0.0
        assert s.sigma_c.item() == pytest.approx(1.0, abs=1e-5)

    def test_zero_variance_floor(self):
        s = init_from_bn(torch.tensor([0.0]), torch.tensor([0.0]), eps=1e-5)
        assert s.sigma_c.item() == pytest.approx(math.sqrt(1e-5), rel=1e-6)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            init_from_bn(torch.tensor([0.0]), torch.tensor([-0.1]))


class TestModules:
    def test_forward_does_not_mutate_until_commit(self, gen):
        norm = CBRN(3)
        a = torch.randn(2, 3, 4, 4, generator=gen)
        norm(a, "train")
        assert torch.equal(norm.mu_c, torch.zeros(3))
        norm.commit()
        assert not torch.equal(norm.mu_c, torch.zeros(3))

    def test_single_branch_commit_uses_its_stats(self, gen):
        norm = CBRN(2, eta=1.0)
        a = torch.randn(2, 2, 4, 4, generator=gen)
        norm(a, "train")
        norm.commit()
        s = compute_batch_stats(a)
        torch.testing.assert_close(norm.mu_c, s.mu_B)
        torch.testing.assert_close(norm.sigma_c, s.sigma_B)

    def test_batchnorm_handoff_matches_eval(self, gen):
        bn = BatchNorm(3)
        bn.running_mean = torch.randn(3, generator=gen)
        bn.running_var = torch.rand(3, generator=gen) + 0.2
        a = torch.randn(2, 3, 4, 4, generator=gen)
        torch.testing.assert_close(bn.to_cbrn()(a, "eval"), bn(a, "eval"))

    def test_geometric_convergence(self):
        eta = 0.01
        norm = CBRN(1, eta=eta)
        norm.mu_c = torch.tensor([4.0], dtype=torch.float64)
        norm.sigma_c = torch.tensor([1.0], dtype=torch.float64)
        target = BatchStats(torch.tensor([1.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64))
        for k in range(1, 301):
            norm._pending = [target, target]
            norm.commit()
            expect = (1 - eta) ** k * 3.0
            assert abs(abs(norm.mu_c.item() - 1.0) - expect) <= 1e-12
