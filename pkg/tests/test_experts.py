import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_diff_check
from oracles import softmax_reference
from unirestore.experts import (DetailExpertModule, DetailExpertStack, NafBlock,
                                RouterConfig, RouterDecision, TransposedSelfAttention,
                                aux_balance_loss, route, utilization)


class TestRoute:
    def test_uniform_logits_tie_break(self):
        cfg = RouterConfig(num_experts=4)
        x = torch.randn(5, 3)
        d = route(x, cfg, torch.zeros(4, 3), noise=torch.zeros(5, 4))
        assert torch.allclose(d.distribution, torch.full((5, 4), 0.25))
        assert torch.all(d.expert_index == 0)
        assert torch.allclose(d.gate, torch.full((5,), 0.25))

    def test_hand_computed_softmax_gate(self):
        # logits [0.1, 2.0, -1.0] via identity router on a matching token
        cfg = RouterConfig(num_experts=3)
        x = torch.tensor([[0.1, 2.0, -1.0]], dtype=torch.float64)
        d = route(x, cfg, torch.eye(3, dtype=torch.float64))
        ref = softmax_reference([0.1, 2.0, -1.0])
        assert int(d.expert_index[0]) == 1
        assert abs(float(d.gate[0]) - ref[1]) < 1e-9
        assert np.allclose(d.distribution[0].numpy(), ref, atol=1e-9)

    def test_deterministic_without_noise(self):
        cfg = RouterConfig(num_experts=4, noise_std=0.0)
        x = torch.randn(8, 6)
        w = torch.randn(4, 6)
        a = route(x, cfg, w)
        b = route(x, cfg, w)
        assert torch.equal(a.expert_index, b.expert_index)
        assert torch.equal(a.distribution, b.distribution)

    def test_seeded_noise_reproducible_and_scaled(self):
        cfg = RouterConfig(num_experts=4, noise_std=0.5)
        x = torch.randn(16, 6)
        w = torch.randn(4, 6)
        a = route(x, cfg, w, generator=torch.Generator().manual_seed(3))
        b = route(x, cfg, w, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a.distribution, b.distribution)
        c = route(x, cfg, w, generator=torch.Generator().manual_seed(4))
        assert not torch.equal(a.distribution, c.distribution)

    def test_topk_renormalization(self):
        cfg = RouterConfig(num_experts=4, k=2)
        x = torch.randn(6, 5)
        d = route(x, cfg, torch.randn(4, 5))
        assert d.indices.shape == (6, 2)
        assert torch.allclose(d.gates.sum(dim=-1), torch.ones(6), atol=1e-6)
        # top-1 slot holds the larger probability
        assert torch.all(d.gates[:, 0] >= d.gates[:, 1])

    def test_k1_uses_raw_softmax_mass(self):
        cfg = RouterConfig(num_experts=3, k=1)
        x = torch.randn(4, 3)
        d = route(x, cfg, torch.randn(3, 3))
        gathered = d.distribution.gather(-1, d.indices)[..., 0]
        assert torch.equal(d.gate, gathered)

    def test_nonfinite_logits_rejected(self):
        cfg = RouterConfig(num_experts=2)
        with pytest.raises(ValueError):
            route(torch.tensor([[math.inf, 0.0]]), cfg, torch.eye(2))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 6), k=st.integers(1, 3))
    def test_distribution_is_a_probability_vector(self, seed, n, k):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(7, 4, generator=gen)
        w = torch.randn(n, 4, generator=gen)
        d = route(x, RouterConfig(num_experts=n, k=min(k, n)), w)
        assert torch.allclose(d.distribution.sum(dim=-1), torch.ones(7), atol=1e-6)
        assert d.indices.unique(dim=-1).shape == d.indices.shape  # distinct selections

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RouterConfig(num_experts=1)
        with pytest.raises(ValueError):
            RouterConfig(num_experts=4, k=5)
        with pytest.raises(ValueError):
            RouterConfig(num_experts=4, noise_std=-1.0)


def one_hot_decisions(counts: list[int]) -> RouterDecision:
    """Tokens routed per ``counts`` with one-hot distributions, so f_i = P_i."""
    n = len(counts)
    idx = torch.cat([torch.full((c,), i, dtype=torch.long) for i, c in enumerate(counts)])
    dist = torch.nn.functional.one_hot(idx, n).double()
    return RouterDecision(indices=idx[:, None], gates=torch.ones(len(idx), 1),
                          distribution=dist)


class TestAuxBalanceLoss:
    def test_uniform_routing_gives_one(self):
        for n in (2, 4, 8):
            d = one_hot_decisions([3] * n)
            # use exactly uniform distributions instead of one-hots
            d.distribution = torch.full((3 * n, n), 1.0 / n, dtype=torch.float64)
            assert abs(float(aux_balance_loss(d, n)) - 1.0) < 1e-9

    def test_full_collapse_gives_n(self):
        d = one_hot_decisions([6, 0, 0, 0])
        assert abs(float(aux_balance_loss(d, 4)) - 4.0) < 1e-9

    def test_at_least_one_when_fractions_match_probabilities(self):
        # grid over f = P on the 2-expert simplex: N * sum f^2 >= 1
        values = []
        for a in range(0, 13):
            d = one_hot_decisions([a, 12 - a])
            values.append(float(aux_balance_loss(d, 2)))
        assert all(v >= 1.0 - 1e-9 for v in values)
        assert abs(values[6] - 1.0) < 1e-9  # uniform point
        assert all(v > 1.0 for i, v in enumerate(values) if i != 6)

    def test_accepts_decision_lists(self):
        parts = [one_hot_decisions([2, 0]), one_hot_decisions([0, 2])]
        assert abs(float(aux_balance_loss(parts, 2)) - 1.0) < 1e-9


class TestSharedBranch:
    def test_single_channel_degenerate(self):
        attn = TransposedSelfAttention(1).double()
        with torch.no_grad():
            attn.qkv.weight.copy_(torch.tensor([[[[0.2]]], [[[0.4]]], [[[0.6]]]]).double())
            attn.qkv.bias.copy_(torch.tensor([0.0, 0.0, 0.1]).double())
            attn.project.weight.fill_(0.5)
            attn.project.bias.fill_(0.02)
        x = torch.tensor([[[[1.5, -0.5]]]], dtype=torch.float64)
        out = attn(x)
        assert torch.allclose(attn.last_weights, torch.ones(1, 1, 1, dtype=torch.float64))
        v = 0.6 * x + 0.1
        expected = 0.5 * v + 0.02 + x
        assert torch.allclose(out, expected, atol=1e-9)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(1)
        attn = TransposedSelfAttention(5)
        attn(torch.randn(2, 5, 4, 4))
        assert torch.allclose(attn.last_weights.sum(dim=-1), torch.ones(2, 5), atol=1e-5)

    def test_two_channel_hand_computation(self):
        attn = TransposedSelfAttention(2).double()
        wq = np.array([0.5, -0.2]); wk = np.array([0.3, 0.4]); wv = np.array([1.0, -1.0])
        with torch.no_grad():
            attn.qkv.weight.zero_()
            # rows: q0, q1, k0, k1, v0, v1 as 1x1 convs
            attn.qkv.weight[0, 0, 0, 0] = wq[0]; attn.qkv.weight[0, 1, 0, 0] = wq[1]
            attn.qkv.weight[1, 0, 0, 0] = wq[1]; attn.qkv.weight[1, 1, 0, 0] = wq[0]
            attn.qkv.weight[2, 0, 0, 0] = wk[0]; attn.qkv.weight[2, 1, 0, 0] = wk[1]
            attn.qkv.weight[3, 0, 0, 0] = wk[1]; attn.qkv.weight[3, 1, 0, 0] = wk[0]
            attn.qkv.weight[4, 0, 0, 0] = wv[0]; attn.qkv.weight[4, 1, 0, 0] = wv[1]
            attn.qkv.weight[5, 0, 0, 0] = wv[1]; attn.qkv.weight[5, 1, 0, 0] = wv[0]
            attn.qkv.bias.zero_()
            attn.project.weight.copy_(torch.eye(2).reshape(2, 2, 1, 1).double())
            attn.project.bias.zero_()
        x = np.array([0.7, -1.2])
        out = attn(torch.tensor(x).reshape(1, 2, 1, 1))
        q = np.array([wq @ x, wq[::-1] @ x])
        k = np.array([wk @ x, wk[::-1] @ x])
        v = np.array([wv @ x, wv[::-1] @ x])
        expected = np.zeros(2)
        for i in range(2):
            weights = softmax_reference([q[i] * k[0], q[i] * k[1]])  # HW = 1, scale 1
            expected[i] = weights @ v + x[i]
        assert np.allclose(out.reshape(2).detach().numpy(), expected, atol=1e-9)


class TestDetailExpertModule:
    def make_module(self, channels=4, n=2, noise=0.0, kernels=(3, 5)):
        torch.manual_seed(0)
        return DetailExpertModule(channels, RouterConfig(n, k=1, noise_std=noise),
                                  kernel_sizes=kernels)

    def test_identity_at_init(self):
        mod = self.make_module()
        x = torch.randn(2, 4, 6, 6)
        out, decision = mod(x)
        assert float((out - x).detach().abs().max()) == 0.0
        assert decision.indices.shape == (2, 6, 6, 1)

    def test_forced_shared_ones_and_unit_gate(self):
        mod = self.make_module()
        with torch.no_grad():
            for p in mod.experts[1].out_proj.parameters():
                p.normal_(0, 0.5)

        class Ones(torch.nn.Module):
            def forward(self, x):
                return torch.ones_like(x)

        mod.shared = Ones()
        x = torch.randn(1, 4, 3, 3)
        decision = RouterDecision(
            indices=torch.ones(1, 3, 3, 1, dtype=torch.long),
            gates=torch.ones(1, 3, 3, 1),
            distribution=torch.nn.functional.one_hot(torch.ones(1, 3, 3, dtype=torch.long),
                                                     2).float())
        out = mod.combine(x, decision)
        assert torch.allclose(out, x + mod.experts[1](x), atol=1e-6)

    def test_single_token_scalar_trace(self):
        # NAF blocks are identities at init (zero residual scale), so each
        # expert reduces to its 1x1 output projection; trace the whole module
        mod = self.make_module().double()
        w_router = np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]])
        we = np.diag([0.5, -0.3, 0.2, 0.1])
        be = np.array([0.01, 0.02, -0.01, 0.0])
        with torch.no_grad():
            mod.router_weight.copy_(torch.tensor(w_router))
            mod.experts[1].out_proj.weight.copy_(torch.tensor(we).reshape(4, 4, 1, 1))
            mod.experts[1].out_proj.bias.copy_(torch.tensor(be))
            mod.shared.qkv.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(1))
            mod.shared.qkv.bias.zero_()
            mod.shared.project.weight.copy_(torch.eye(4).reshape(4, 4, 1, 1).double())
            mod.shared.project.bias.zero_()
        x_vec = np.array([0.2, 1.5, -0.4, 0.3])
        x = torch.tensor(x_vec).reshape(1, 4, 1, 1)
        mod.eval()
        out, decision = mod(x)

        logits = w_router @ x_vec
        probs = softmax_reference(logits)
        assert int(decision.expert_index.reshape(())) == int(np.argmax(logits))
        gate = probs[int(np.argmax(logits))]
        expert_out = we @ x_vec + be
        qkv_w = mod.shared.qkv.weight.detach().numpy().reshape(12, 4)
        q, k, v = qkv_w[:4] @ x_vec, qkv_w[4:8] @ x_vec, qkv_w[8:] @ x_vec
        attn_rows = np.stack([softmax_reference(q[i] * k) for i in range(4)])
        shared_out = attn_rows @ v + x_vec
        expected = x_vec + gate * expert_out * shared_out
        assert np.allclose(out.reshape(4).detach().numpy(), expected, atol=1e-6)

    def test_eval_mode_disables_routing_noise(self):
        mod = self.make_module(noise=5.0)
        mod.eval()
        x = torch.randn(1, 4, 4, 4)
        a = mod(x, generator=torch.Generator().manual_seed(0))[1]
        b = mod(x, generator=torch.Generator().manual_seed(999))[1]
        assert torch.equal(a.expert_index, b.expert_index)

    def test_unknown_expert_index_rejected(self):
        mod = self.make_module()
        bad = RouterDecision(indices=torch.full((1, 2, 2, 1), 7, dtype=torch.long),
                             gates=torch.ones(1, 2, 2, 1),
                             distribution=torch.full((1, 2, 2, 2), 0.5))
        with pytest.raises(ValueError):
            mod.combine(torch.randn(1, 4, 2, 2), bad)

    def test_kernel_size_validation(self):
        with pytest.raises(ValueError):
            DetailExpertModule(4, RouterConfig(2), kernel_sizes=(3,))
        with pytest.raises(ValueError):
            DetailExpertModule(4, RouterConfig(2), kernel_sizes=(3, 3))
        with pytest.raises(ValueError):
            NafBlock(4, kernel_size=4)

    def test_gradient_check_two_expert_module(self):
        torch.manual_seed(5)
        mod = DetailExpertModule(3, RouterConfig(2, k=1, noise_std=0.0),
                                 kernel_sizes=(3, 5)).double()
        with torch.no_grad():
            for p in mod.parameters():
                p.normal_(0, 0.3)
            mod.router_weight.mul_(4.0)  # widen routing margins
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        target = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        d = route(x.permute(0, 2, 3, 1), mod.cfg, mod.router_weight)
        top2 = d.distribution.topk(2, dim=-1).values
        assert float((top2[..., 0] - top2[..., 1]).min()) > 0.05  # no flips under fd steps
        mod.eval()

        def loss():
            out, decision = mod(x)
            return ((out - target) ** 2).mean() + 0.1 * aux_balance_loss(decision, 2)

        finite_diff_check(loss, mod.named_parameters(), probe_limit=8)

    def test_balance_penalty_reduces_dominant_expert(self):
        # skewed router start; 200 steps with the penalty must cut max_i f_i
        def run(lambda2: float) -> float:
            torch.manual_seed(11)
            mod = DetailExpertModule(4, RouterConfig(3, k=1, noise_std=0.0),
                                     kernel_sizes=(3, 5, 7))
            with torch.no_grad():
                mod.router_weight.normal_(0, 0.1)
                mod.router_weight[0] += 2.0  # expert 0 dominates at init
            gen = torch.Generator().manual_seed(12)
            x = torch.randn(2, 4, 8, 8, generator=gen)
            target = torch.randn(2, 4, 8, 8, generator=gen)
            opt = torch.optim.Adam(mod.parameters(), lr=1e-2)
            for _ in range(200):
                out, decision = mod(x)
                loss = ((out - target) ** 2).mean() \
                    + lambda2 * aux_balance_loss(decision, 3)
                opt.zero_grad()
                loss.backward()
                opt.step()
            mod.eval()
            _, decision = mod(x)
            return float(utilization(decision, 3).max())

        assert run(0.1) < run(0.0)


class TestDetailExpertStack:
    def test_refine_collects_decisions(self):
        torch.manual_seed(2)
        stack = DetailExpertStack([4, 2], RouterConfig(2), kernel_sizes=(3, 5))
        stack.last_decisions = []
        a = stack.refine(0, torch.randn(1, 4, 2, 2))
        b = stack.refine(1, torch.randn(1, 2, 4, 4))
        assert a.shape == (1, 4, 2, 2) and b.shape == (1, 2, 4, 4)
        assert len(stack.last_decisions) == 2
        frac = stack.utilization()
        assert abs(float(frac.sum()) - 1.0) < 1e-9
