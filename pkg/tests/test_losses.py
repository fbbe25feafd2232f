import numpy as np
import pytest
import torch

from conftest import finite_diff_check
from oracles import ssim_reference
from unirestore.experts import RouterDecision
from unirestore.losses import LossWeights, stage1_loss, stage2_loss


def uniform_decision(num_experts=4, tokens=8):
    """Every expert selected equally often, distributions exactly uniform."""
    idx = torch.arange(tokens) % num_experts
    dist = torch.full((tokens, num_experts), 1.0 / num_experts)
    return RouterDecision(indices=idx[:, None], gates=dist.gather(1, idx[:, None]),
                          distribution=dist)


class TestStage1Loss:
    def test_perfect_prediction(self):
        eps = torch.randn(2, 3, 4, 4)
        assert float(stage1_loss(eps, eps)) == 0.0

    def test_constant_offset(self):
        eps = torch.zeros(1, 1, 4, 4)
        assert abs(float(stage1_loss(eps, torch.full_like(eps, 0.5))) - 0.5) < 1e-7

    def test_matches_element_loop_oracle(self):
        gen = torch.Generator().manual_seed(2)
        a = torch.randn(2, 2, generator=gen).reshape(1, 1, 2, 2)
        b = torch.randn(2, 2, generator=gen).reshape(1, 1, 2, 2)
        total = 0.0
        for i in range(2):
            for j in range(2):
                total += abs(float(a[0, 0, i, j]) - float(b[0, 0, i, j]))
        assert abs(float(stage1_loss(a, b)) - total / 4.0) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            stage1_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4))

    def test_gradient(self):
        torch.manual_seed(3)
        eps = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        eps_hat = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        assert (eps - eps_hat).abs().min() > 1e-2  # away from the L1 kink
        eps_hat.requires_grad_(True)
        finite_diff_check(lambda: stage1_loss(eps, eps_hat), [("eps_hat", eps_hat)])


class TestStage2Loss:
    def test_perfect_prediction_leaves_only_aux(self):
        pred = torch.rand(1, 3, 12, 12)
        w = LossWeights(lambda1=0.2, lambda2=0.01)
        total, comps = stage2_loss(pred, pred.clone(), uniform_decision(), w, num_experts=4)
        assert float(comps["recon"]) == 0.0
        assert abs(float(comps["ssim"])) < 1e-7
        assert abs(float(comps["aux"]) - 1.0) < 1e-9
        assert abs(float(total) - w.lambda2 * 1.0) < 1e-7

    def test_zero_weights_reduce_to_recon(self):
        pred = torch.rand(1, 3, 12, 12)
        target = torch.rand(1, 3, 12, 12)
        total, comps = stage2_loss(pred, target, uniform_decision(), LossWeights(0.0, 0.0),
                                   num_experts=4)
        assert torch.equal(total, comps["recon"])

    def test_components_against_independent_recomputation(self):
        gen = torch.Generator().manual_seed(9)
        pred = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
        target = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
        w = LossWeights(lambda1=0.3, lambda2=0.05)
        total, comps = stage2_loss(pred, target, uniform_decision(), w, num_experts=4)
        recon_ref = float(np.mean(np.abs(pred.numpy() - target.numpy())))
        ssim_ref = 1.0 - ssim_reference(pred[0, 0].numpy(), target[0, 0].numpy())
        assert abs(float(comps["recon"]) - recon_ref) < 1e-9
        assert abs(float(comps["ssim"]) - ssim_ref) < 1e-5
        assert abs(float(total) - (float(comps["recon"]) + w.lambda1 * float(comps["ssim"])
                                   + w.lambda2 * float(comps["aux"]))) < 1e-9

    def test_no_decisions_means_zero_aux(self):
        pred = torch.rand(1, 3, 12, 12)
        target = torch.rand(1, 3, 12, 12)
        _, comps = stage2_loss(pred, target, None, LossWeights(0.2, 0.01))
        assert float(comps["aux"]) == 0.0

    def test_gradient_wrt_prediction(self):
        torch.manual_seed(4)
        target = 0.2 + 0.6 * torch.rand(1, 1, 12, 12, dtype=torch.float64)
        # offsets bounded away from zero keep finite differences off the L1 kink
        sign = torch.where(torch.rand_like(target) < 0.5, -1.0, 1.0)
        pred = target + sign * (0.02 + 0.1 * torch.rand_like(target))
        pred.requires_grad_(True)

        def loss():
            total, _ = stage2_loss(pred, target, uniform_decision(), LossWeights(0.2, 0.01),
                                   num_experts=4)
            return total

        finite_diff_check(loss, [("pred", pred)], probe_limit=24)


class TestLossWeights:
    def test_rejects_negative_or_nonfinite(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda2=float("nan"))
