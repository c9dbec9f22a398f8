"""Condensed head: descriptor layout, global modeling, forward contracts."""

import numpy as np
import pytest

import oracles
from kphead import tensor as T
from kphead.discovery import DiscoveryConfig, KeyPartSet, init_discovery_params
from kphead.errors import ContractViolation
from kphead.head import (HeadConfig, baseline_forward, full_condensed_forward,
                         global_modeling, head_forward, init_baseline_params,
                         init_head_params, key_part_modeling)
from kphead.tensor import Tensor, backward

TOY_HEAD = HeadConfig(channels=8, num_classes=3, num_parts=2, pool_len=3,
                      height=5, width=5, channel_keep=0.25, hidden=16)
TOY_DISC = DiscoveryConfig(channels=8, num_parts=2, num_blocks=1, reduction=2,
                           groups=2, dilation=2)


def toy_models(seed=0):
    rng = np.random.default_rng(seed)
    return init_discovery_params(TOY_DISC, rng), init_head_params(TOY_HEAD, rng)


class TestDescriptorArithmetic:
    def test_full_scale_lengths(self):
        cfg = HeadConfig(channels=256, num_classes=20, num_parts=16, pool_len=5)
        assert cfg.key_part_len == 16 * 256 + 16 * 49 == 4880
        assert cfg.global_len == 25 * 64 == 1600
        assert cfg.descriptor_len == 6480

    def test_minimal_lengths(self):
        cfg = HeadConfig(channels=256, num_classes=20, num_parts=1, pool_len=1)
        assert cfg.descriptor_len == 256 + 49 + 64 == 369


class TestKeyPartModeling:
    def test_layout_fiber_then_map(self):
        """Single part at (0,0): descriptor is the fiber then the raw map."""
        x = Tensor(np.zeros((4, 2, 2)))
        x.data[:, 0, 0] = [1.0, 2.0, 3.0, 4.0]
        maps = Tensor(np.array([[[0.9, 0.1], [0.2, 0.3]]]))
        parts = KeyPartSet(points=[(0, 0)], confidences=[0.9])
        z_k = key_part_modeling(x, maps, parts)
        np.testing.assert_array_equal(z_k.data, [1, 2, 3, 4, 0.9, 0.1, 0.2, 0.3])

    def test_swapping_parts_swaps_blocks(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4, 4)))
        maps = rng.uniform(0, 0.9, size=(2, 4, 4))
        parts = KeyPartSet(points=[(1, 1), (2, 3)], confidences=[0.5, 0.6])
        swapped = KeyPartSet(points=[(2, 3), (1, 1)], confidences=[0.6, 0.5])
        z = key_part_modeling(x, Tensor(maps), parts).data
        z_sw = key_part_modeling(x, Tensor(maps[[1, 0]]), swapped).data
        c, hw = 3, 16
        np.testing.assert_array_equal(z_sw[:c], z[c:2 * c])
        np.testing.assert_array_equal(z_sw[c:2 * c], z[:c])
        np.testing.assert_array_equal(z_sw[2 * c:2 * c + hw], z[2 * c + hw:])

    def test_random_matches_concatenation_oracle(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((8, 7, 7)))
        maps = Tensor(rng.uniform(0, 0.9, size=(4, 7, 7)))
        points = [(int(r), int(c)) for r, c in rng.integers(0, 7, size=(4, 2))]
        parts = KeyPartSet(points=points, confidences=[0.0] * 4)
        z_k = key_part_modeling(x, maps, parts).data
        want = np.concatenate([oracles.gather_loops(x.data, points).reshape(-1),
                               maps.data.reshape(-1)])
        np.testing.assert_array_equal(z_k, want)


class TestGlobalModeling:
    def test_degenerate_identity_config(self):
        """L = H = W with channel_keep 1 and identity 1x1 weights flattens x."""
        cfg = HeadConfig(channels=4, num_classes=2, num_parts=1, pool_len=3,
                         height=3, width=3, channel_keep=1.0, hidden=4)
        params = init_head_params(cfg, np.random.default_rng(0))
        params.global_conv.weight.data[:] = np.eye(4).reshape(4, 4, 1, 1)
        params.global_conv.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).standard_normal((4, 3, 3)))
        np.testing.assert_allclose(global_modeling(x, params, cfg).data,
                                   x.data.reshape(-1), atol=1e-12)

    def test_constant_grid_passes_through_pooling(self):
        params = init_head_params(TOY_HEAD, np.random.default_rng(2))
        params.global_conv.bias.data[:] = 0.0
        x = Tensor(np.full((8, 5, 5), 3.0))
        z_g = global_modeling(x, params, TOY_HEAD).data.reshape(2, 3, 3)
        row_sums = params.global_conv.weight.data.reshape(2, 8).sum(axis=1)
        for ch in range(2):
            np.testing.assert_allclose(z_g[ch], 3.0 * row_sums[ch], atol=1e-12)

    def test_random_matches_pool_then_conv_oracle(self):
        rng = np.random.default_rng(3)
        cfg = HeadConfig(channels=8, num_classes=3, num_parts=2, pool_len=5,
                         height=7, width=7, channel_keep=0.25, hidden=16)
        params = init_head_params(cfg, rng)
        x = Tensor(rng.standard_normal((8, 7, 7)))
        pooled = oracles.adaptive_avg_pool_loops(x.data, 5)
        want = oracles.conv2d_loops(pooled, params.global_conv.weight.data,
                                    params.global_conv.bias.data).reshape(-1)
        np.testing.assert_allclose(global_modeling(x, params, cfg).data, want, atol=1e-12)


class TestHeadForward:
    def test_zero_fc_weights_give_bias_logits(self):
        params = init_head_params(TOY_HEAD, np.random.default_rng(4))
        params.fc.weight.data[:] = 0.0
        params.fc.bias.data[:] = 0.0
        params.cls.bias.data[:] = [0.1, 0.2, 0.3, 0.4]
        z_k = Tensor(np.random.default_rng(5).standard_normal(TOY_HEAD.key_part_len))
        z_g = Tensor(np.random.default_rng(6).standard_normal(TOY_HEAD.global_len))
        out = head_forward(z_k, z_g, params, TOY_HEAD)
        np.testing.assert_array_equal(out.v_cls.data, [0.1, 0.2, 0.3, 0.4])

    def test_output_lengths(self):
        params = init_head_params(TOY_HEAD, np.random.default_rng(7))
        z_k = Tensor(np.zeros(TOY_HEAD.key_part_len))
        z_g = Tensor(np.zeros(TOY_HEAD.global_len))
        out = head_forward(z_k, z_g, params, TOY_HEAD)
        assert out.v_cls.size == TOY_HEAD.num_classes + 1
        assert out.v_reg.size == 4 * TOY_HEAD.num_classes

    def test_wrong_descriptor_length_rejected(self):
        params = init_head_params(TOY_HEAD, np.random.default_rng(8))
        with pytest.raises(ContractViolation):
            head_forward(Tensor(np.zeros(3)), Tensor(np.zeros(3)), params, TOY_HEAD)

    def test_end_to_end_matches_composed_oracles(self):
        rng = np.random.default_rng(9)
        params = init_head_params(TOY_HEAD, rng)
        z_k = Tensor(rng.standard_normal(TOY_HEAD.key_part_len))
        z_g = Tensor(rng.standard_normal(TOY_HEAD.global_len))
        out = head_forward(z_k, z_g, params, TOY_HEAD)
        d = np.concatenate([z_k.data, z_g.data])
        hidden = np.maximum(oracles.linear_loops(d, params.fc.weight.data,
                                                 params.fc.bias.data), 0.0)
        np.testing.assert_allclose(
            out.v_cls.data,
            oracles.linear_loops(hidden, params.cls.weight.data, params.cls.bias.data),
            atol=1e-12)

    def test_relu_scale_invariance(self):
        """Doubling the FC weights and halving the output weights is a no-op
        when every hidden pre-activation is nonnegative."""
        rng = np.random.default_rng(10)
        params = init_head_params(TOY_HEAD, rng)
        params.fc.bias.data[:] = 5.0  # push pre-activations positive
        z_k = Tensor(0.01 * rng.standard_normal(TOY_HEAD.key_part_len))
        z_g = Tensor(0.01 * rng.standard_normal(TOY_HEAD.global_len))
        base = head_forward(z_k, z_g, params, TOY_HEAD)
        params.fc.weight.data *= 2.0
        params.fc.bias.data *= 2.0
        params.cls.weight.data *= 0.5
        params.reg.weight.data *= 0.5
        scaled = head_forward(z_k, z_g, params, TOY_HEAD)
        np.testing.assert_allclose(scaled.v_cls.data, base.v_cls.data, atol=1e-10)
        np.testing.assert_allclose(scaled.v_reg.data, base.v_reg.data, atol=1e-10)


class TestFullForward:
    def test_full_scale_shape_contract(self):
        head_cfg = HeadConfig(channels=256, num_classes=20, num_parts=16, pool_len=5)
        disc_cfg = DiscoveryConfig(channels=256, num_parts=16)
        rng = np.random.default_rng(11)
        disc = init_discovery_params(disc_cfg, rng)
        head = init_head_params(head_cfg, rng)
        x = Tensor(rng.standard_normal((256, 7, 7)))
        fwd = full_condensed_forward(x, disc, head, disc_cfg, head_cfg)
        assert fwd.output.v_cls.size == 21
        assert fwd.output.v_reg.size == 80
        assert fwd.z_k.size == 4096 + 784
        assert fwd.z_g.size == 1600
        assert fwd.maps.shape == (16, 7, 7)
        assert len(fwd.parts) == 16

    def test_deterministic_reruns(self):
        disc_params, head_params = toy_models()
        cfg = HeadConfig(channels=8, num_classes=3, num_parts=2, pool_len=3,
                         height=5, width=5, channel_keep=0.25, hidden=16)
        x = Tensor(np.random.default_rng(12).standard_normal((8, 5, 5)))
        a = full_condensed_forward(x, disc_params, head_params, TOY_DISC, cfg)
        b = full_condensed_forward(x, disc_params, head_params, TOY_DISC, cfg)
        assert a.output.v_cls.data.tobytes() == b.output.v_cls.data.tobytes()
        assert a.output.v_reg.data.tobytes() == b.output.v_reg.data.tobytes()

    def test_gradient_flows_to_input_everywhere_finite(self):
        disc_params, head_params = toy_models(13)
        cfg = HeadConfig(channels=8, num_classes=3, num_parts=2, pool_len=3,
                         height=5, width=5, channel_keep=0.25, hidden=16)
        x = Tensor(np.random.default_rng(14).standard_normal((8, 5, 5)),
                   requires_grad=True)
        fwd = full_condensed_forward(x, disc_params, head_params, TOY_DISC, cfg)
        backward(T.sum_all(fwd.output.v_cls) + T.sum_all(fwd.output.v_reg))
        assert x.grad is not None
        assert np.all(np.isfinite(x.grad))
        gathered = {p for p in fwd.parts.points}
        assert any(abs(x.grad[:, r, c]).sum() > 0 for r, c in gathered)


class TestBaselineHead:
    def test_output_lengths_and_determinism(self):
        params = init_baseline_params(TOY_HEAD, np.random.default_rng(15))
        x = Tensor(np.random.default_rng(16).standard_normal((8, 5, 5)))
        out1 = baseline_forward(x, params, TOY_HEAD)
        out2 = baseline_forward(x, params, TOY_HEAD)
        assert out1.v_cls.size == 4 and out1.v_reg.size == 12
        assert out1.v_cls.data.tobytes() == out2.v_cls.data.tobytes()
