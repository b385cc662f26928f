"""Fusion network: relighting cascade, alignment pyramid, repletion head."""

from __future__ import annotations

import pytest
import torch
import torch.nn.functional as F

from mefnas.ablation import default_genotype
from mefnas.network import (
    DasmConfig,
    Drm,
    DrmConfig,
    FusionNet,
    NetError,
    SrsmConfig,
    transfer_weights,
)
from mefnas.ops import SearchCell


def _supernet(cascade=1, aligned=True, channels=8):
    return FusionNet(
        srsm=SrsmConfig(cascade_count=cascade, base_channels=channels),
        dasm=DasmConfig(enabled=not aligned),
        drm=DrmConfig(),
    )


def _tiny_net(with_dasm=False, channels=8, cascade=1):
    geno = default_genotype(base_channels=channels, with_dasm=with_dasm)
    from mefnas.train import build_net
    return build_net(geno, cascade_count=cascade)


class TestConfigs:
    def test_cascade_bounds(self):
        with pytest.raises(NetError):
            SrsmConfig(cascade_count=4)
        with pytest.raises(NetError):
            SrsmConfig(cascade_count=-1)

    def test_pyramid_bounds(self):
        with pytest.raises(NetError):
            DasmConfig(pyramid_levels=1)

    def test_drm_slots_fixed(self):
        with pytest.raises(NetError):
            DrmConfig(slots=3)
        with pytest.raises(NetError):
            DrmConfig(division_epsilon=0.0)


class TestRelighting:
    def test_single_stage_multiplies_by_sigmoid_map(self):
        """With the stage stubbed to emit a constant map m, output is x * m."""
        net = _tiny_net(channels=8, cascade=1)
        x = torch.full((1, 3, 16, 16), 0.8)

        class ConstStage(torch.nn.Module):
            def forward(self, inp):
                return torch.full_like(inp, 0.5)

        net.srsm_under.stages[0] = ConstStage()
        out, maps = net.srsm_under(x)
        assert torch.allclose(out, torch.full_like(x, 0.4), atol=1e-6)
        assert len(maps) == 1

    def test_cascade_composes_multiplicatively(self):
        net = _tiny_net(channels=8, cascade=2)
        x = torch.full((1, 3, 16, 16), 0.8)

        class ConstStage(torch.nn.Module):
            def forward(self, inp):
                return torch.full_like(inp, 0.5)

        net.srsm_under.stages[0] = ConstStage()
        net.srsm_under.stages[1] = ConstStage()
        out, maps = net.srsm_under(x)
        assert torch.allclose(out, torch.full_like(x, 0.2), atol=1e-6)
        assert len(maps) == 2

    def test_all_ones_map_is_identity(self):
        net = _tiny_net(channels=8, cascade=2)
        x = torch.rand(1, 3, 16, 16)

        class OnesStage(torch.nn.Module):
            def forward(self, inp):
                return torch.ones_like(inp)

        net.srsm_under.stages[0] = OnesStage()
        net.srsm_under.stages[1] = OnesStage()
        out, _ = net.srsm_under(x)
        assert torch.equal(out, x)

    def test_outputs_never_exceed_input(self):
        """Sigmoid maps lie in (0, 1), so each stage can only dim the frame."""
        torch.manual_seed(0)
        net = _tiny_net(channels=8, cascade=2)
        x = torch.rand(2, 3, 16, 16)
        out, maps = net.srsm_under(x)
        assert torch.all(out <= x + 1e-6)
        assert torch.all(out >= -1e-6)
        for m in maps:
            assert torch.all(m > 0.0) and torch.all(m < 1.0)

    def test_stage_map_shape_matches_input(self):
        torch.manual_seed(0)
        net = _tiny_net(channels=8, cascade=1)
        x = torch.rand(1, 3, 24, 24)
        _, maps = net.srsm_under(x)
        assert maps[0].shape == x.shape


class TestAlignment:
    def test_zero_projection_returns_reference_features(self):
        """With the output projection zeroed, the module reduces to f_o."""
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        dasm = net.dasm
        with torch.no_grad():
            dasm.proj.weight.zero_()
            dasm.proj.bias.zero_()
        f_u = torch.randn(1, 8, 16, 16)
        f_o = torch.randn(1, 8, 16, 16)
        out = dasm(f_u, f_o)
        assert torch.allclose(out, f_o, atol=1e-6)

    def test_disabled_module_raises(self):
        net = _tiny_net(with_dasm=False, channels=8)
        assert net.dasm is None

    def test_arity_error_on_shape_mismatch(self):
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        with pytest.raises(NetError, match="alignment arity error"):
            net.dasm(torch.randn(1, 8, 16, 16), torch.randn(1, 8, 8, 8))

    def test_output_shape(self):
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        f_u = torch.randn(1, 8, 32, 32)
        f_o = torch.randn(1, 8, 32, 32)
        assert net.dasm(f_u, f_o).shape == (1, 8, 32, 32)

    def test_gradients_reach_offset_predictors(self):
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        f_u = torch.randn(1, 8, 16, 16, requires_grad=True)
        f_o = torch.randn(1, 8, 16, 16)
        net.dasm(f_u, f_o).sum().backward()
        for cell in net.dasm.cells:
            op = next(iter(cell.ops.values()))
            assert op.offset_conv.weight.grad is not None

    def test_translation_probe_error_decreases(self):
        """Aligning a +2 px translated copy improves with training.

        The conv-path response to f_o is captured at the zero-offset
        initialization; 200 optimizer steps on the aligned-feature error
        against twice that response must reduce it below its initial value.
        """
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        dasm = net.dasm
        base = torch.randn(1, 8, 24, 26)
        f_o = base[..., :24].contiguous()
        f_u = base[..., 2:].contiguous()
        with torch.no_grad():
            conv_path = dasm(f_o, f_o) - f_o
        target = 2.0 * conv_path

        def error():
            return torch.linalg.vector_norm(dasm(f_u, f_o) - target)

        before = float(error().detach())
        opt = torch.optim.Adam(dasm.parameters(), lr=1e-3)
        for _ in range(200):
            opt.zero_grad()
            loss = error()
            loss.backward()
            opt.step()
        after = float(error().detach())
        assert after < before


class TestRepletion:
    def test_compose_plain_division(self):
        coarse = torch.full((1, 3, 4, 4), 0.3)
        illum = torch.full((1, 3, 4, 4), 0.5)
        out = Drm.compose(coarse, illum, eps=0.05)
        assert torch.allclose(out, torch.full_like(coarse, 0.6), atol=1e-7)

    def test_compose_clamps_tiny_illumination(self):
        coarse = torch.full((1, 3, 4, 4), 0.3)
        illum = torch.full((1, 3, 4, 4), 1e-6)
        out = Drm.compose(coarse, illum, eps=0.05)
        assert torch.all(out == 1.0)  # 0.3 / 0.05 = 6, clipped

    def test_compose_unit_illumination_clips_coarse(self):
        coarse = torch.tensor([[-0.5, 0.2], [0.8, 1.7]]).reshape(1, 1, 2, 2)
        illum = torch.ones_like(coarse)
        out = Drm.compose(coarse, illum, eps=0.05)
        assert torch.equal(out, coarse.clamp(0.0, 1.0))

    def test_output_bounded(self):
        torch.manual_seed(0)
        net = _tiny_net(channels=8)
        f = torch.randn(2, 8, 16, 16)
        y = net.drm(f)
        assert torch.all(y >= 0.0) and torch.all(y <= 1.0)

    def test_aux_heads_exposed(self):
        torch.manual_seed(0)
        net = _tiny_net(channels=8)
        f = torch.randn(1, 8, 16, 16)
        y, coarse, illum = net.drm(f, return_aux=True)
        assert torch.all(illum > 0.0) and torch.all(illum < 1.0)
        recomposed = Drm.compose(coarse, illum, net.drm.eps)
        assert torch.allclose(y, recomposed, atol=1e-6)


class TestFusionNet:
    def test_forward_shapes(self):
        torch.manual_seed(0)
        for size in (32, 64):
            net = _tiny_net(channels=8)
            u = torch.rand(1, 3, size, size)
            o = torch.rand(1, 3, size, size)
            assert net(u, o).shape == (1, 3, size, size)

    def test_misaligned_forward_shape(self):
        torch.manual_seed(0)
        net = _tiny_net(with_dasm=True, channels=8)
        u = torch.rand(1, 3, 32, 32)
        o = torch.rand(1, 3, 32, 32)
        assert net(u, o).shape == (1, 3, 32, 32)

    def test_pair_shape_error(self):
        net = _tiny_net(channels=8)
        with pytest.raises(NetError, match="pair shape error"):
            net(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))

    def test_output_in_unit_interval(self):
        torch.manual_seed(1)
        net = _tiny_net(channels=8)
        with torch.no_grad():
            y = net(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32))
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_supernet_block_count_aligned(self):
        net = _supernet(cascade=1, aligned=True)
        cells = net.arch_cells()
        assert len(cells) == 7  # 3 relight + 4 repletion slots
        tags = [(c.module_tag, c.slot) for c in cells]
        assert tags == [("srsm", 0), ("srsm", 1), ("srsm", 2),
                        ("drm", 0), ("drm", 1), ("drm", 2), ("drm", 3)]

    def test_supernet_block_count_misaligned(self):
        net = _supernet(cascade=1, aligned=False)
        assert len(net.arch_cells()) == 10

    def test_relight_replicas_share_alpha(self):
        net = _supernet(cascade=2, aligned=True)
        shared = {}
        for mod in net.modules():
            if isinstance(mod, SearchCell) and mod.module_tag == "srsm":
                shared.setdefault(mod.slot, []).append(mod.alpha)
        for slot, alphas in shared.items():
            assert len(alphas) == 4  # 2 branches x 2 stages
            assert all(a is alphas[0] for a in alphas)

    def test_arch_vs_weight_parameter_split(self):
        net = _supernet(cascade=1, aligned=True)
        arch = {id(p) for p in net.arch_parameters()}
        weights = {id(p) for p in net.weight_parameters()}
        assert arch and weights
        assert arch.isdisjoint(weights)
        assert len(arch) + len(weights) == len({id(p) for p in net.parameters()})

    def test_one_hot_supernet_equals_discretized(self):
        """Criterion: one-hot relaxed output matches the rebuilt network, 1e-5."""
        from mefnas.network import one_hot_alphas
        from mefnas.search import discretize
        torch.manual_seed(0)
        net = _supernet(cascade=1, aligned=True, channels=8)
        geno = default_genotype(base_channels=8)
        one_hot_alphas(net, geno)
        from mefnas.train import build_net
        small = build_net(geno, cascade_count=1)
        n = transfer_weights(net, small)
        assert n > 0
        u = torch.rand(1, 3, 32, 32)
        o = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = net(u, o)
            b = small(u, o)
        assert float((a - b).abs().max()) < 1e-5

    def test_transfer_weight_mismatch_raises(self):
        src = _supernet(cascade=1, aligned=True, channels=8)
        dst = _tiny_net(channels=16)
        with pytest.raises(NetError, match="weight transfer mismatch"):
            transfer_weights(src, dst)

    def test_genotype_net_has_frozen_alphas(self):
        net = _tiny_net(channels=8)
        for mod in net.modules():
            if isinstance(mod, SearchCell):
                assert not mod.alpha.requires_grad
                assert mod.alpha.numel() == 1
