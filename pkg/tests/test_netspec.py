"""Network construction, seeded init, forward, and FP-branch pruning."""

from fractions import Fraction

import numpy as np
import pytest

from expnet.autodiff import Tensor
from expnet.bitops import capability_report
from expnet.blocks import ExpBlockConfig
from expnet.netspec import (
    ConvDef,
    NetworkSpec,
    PoolDef,
    build_network,
    prune_network,
)
from expnet.quantizers import QuantConfig


def four_conv_spec(**kw):
    defaults = dict(
        input_shape=(1, 16, 16),
        num_classes=4,
        layers=(
            ConvDef(8, 3, 1, 1),
            PoolDef(2),
            ConvDef(8, 3, 1, 1),
            ConvDef(8, 3, 1, 1),
            PoolDef(2),
            ConvDef(16, 3, 1, 1),
        ),
    )
    defaults.update(kw)
    return NetworkSpec(**defaults)


def batch(rng, n=4, shape=(1, 16, 16)):
    return Tensor(rng.random((n, *shape)))


class TestSpecValidation:
    def test_requires_a_conv(self):
        with pytest.raises(ValueError, match="at least one conv"):
            NetworkSpec(input_shape=(1, 8, 8), num_classes=2, layers=(PoolDef(2),))

    def test_requires_two_classes(self):
        with pytest.raises(ValueError, match="classes"):
            four_conv_spec(num_classes=1)

    def test_pool_must_tile(self):
        with pytest.raises(ValueError, match="does not tile"):
            NetworkSpec(
                input_shape=(1, 9, 9),
                num_classes=2,
                layers=(ConvDef(4, 3, 1, 1), PoolDef(2)),
            )

    def test_expansion_out_of_range(self):
        with pytest.raises(ValueError, match="there are 4 convs"):
            four_conv_spec(expanded=frozenset({5}))

    def test_cannot_expand_edge_layer(self):
        with pytest.raises(ValueError, match="unquantized"):
            four_conv_spec(expanded=frozenset({1}))
        with pytest.raises(ValueError, match="unquantized"):
            four_conv_spec(expanded=frozenset({4}))

    def test_edge_rule_off_allows_expanding_everything(self):
        spec = four_conv_spec(expanded=frozenset({1, 2, 3, 4}), edge_unquantized=False)
        assert spec.quantized_positions == frozenset({1, 2, 3, 4})

    def test_edge_rule_marks_first_and_last_conv(self):
        spec = four_conv_spec()
        assert spec.quantized_positions == frozenset({2, 3})
        assert spec.expanded_ids() == ()

    def test_expanded_ids_in_layer_order(self):
        spec = four_conv_spec(expanded=frozenset({3, 2}))
        assert spec.expanded_ids() == ("conv2", "conv3")

    def test_shape_chain_tracks_concat_widening(self):
        spec = four_conv_spec(
            expanded=frozenset({2}),
            block=ExpBlockConfig(scheme=2, combine="concat", fp_width_factor=Fraction(1, 2)),
        )
        chain = spec.shape_chain()
        # conv2 emits 8 LP + 4 FP channels on a pooled 8x8 map
        assert chain[2] == (12, 8, 8)


class TestSeededInit:
    def test_same_seed_same_parameters(self):
        a = build_network(four_conv_spec(), seed=7)
        b = build_network(four_conv_spec(), seed=7)
        for name, t in a.params().items():
            assert np.array_equal(t.data, b.params()[name].data), name

    def test_different_seeds_differ(self):
        a = build_network(four_conv_spec(), seed=7)
        b = build_network(four_conv_spec(), seed=8)
        assert not np.array_equal(a.params()["conv1.w"].data, b.params()["conv1.w"].data)

    def test_expanded_net_shares_lp_parameters_with_baseline(self):
        baseline = build_network(four_conv_spec(), seed=3)
        expanded = build_network(four_conv_spec(expanded=frozenset({2, 3})), seed=3)
        base_params = baseline.params()
        exp_params = expanded.params()
        for name, t in base_params.items():
            assert np.array_equal(t.data, exp_params[name].data), name
        extra = set(exp_params) - set(base_params)
        assert extra == {
            "conv2.fp.w", "conv2.fp.bn.gamma", "conv2.fp.bn.beta",
            "conv3.fp.w", "conv3.fp.bn.gamma", "conv3.fp.bn.beta",
        }

    def test_init_is_independent_of_downstream_layers(self):
        short = build_network(
            NetworkSpec(
                input_shape=(1, 16, 16),
                num_classes=4,
                layers=(ConvDef(8, 3, 1, 1), ConvDef(8, 3, 1, 1)),
            ),
            seed=5,
        )
        long = build_network(four_conv_spec(), seed=5)
        assert np.array_equal(short.params()["conv1.w"].data, long.params()["conv1.w"].data)


class TestForward:
    def test_logit_shape_and_determinism(self, rng):
        net = build_network(four_conv_spec(), seed=1)
        x = batch(rng)
        a = net.forward(x, mode="infer")
        b = net.forward(x, mode="infer")
        assert a.data.shape == (4, 4)
        assert np.array_equal(a.data, b.data)

    def test_train_mode_moves_running_stats(self, rng):
        net = build_network(four_conv_spec(), seed=1)
        stats = next(layer for kind, layer in net.blocks if kind == "lp").stats
        before = stats.mean.copy()
        net.forward(batch(rng), mode="train")
        assert not np.array_equal(stats.mean, before)

    def test_infer_mode_leaves_running_stats(self, rng):
        net = build_network(four_conv_spec(), seed=1)
        stats = next(layer for kind, layer in net.blocks if kind == "lp").stats
        before = stats.mean.copy()
        net.forward(batch(rng), mode="infer")
        assert np.array_equal(stats.mean, before)

    def test_expanded_forward_requires_factors(self, rng):
        net = build_network(four_conv_spec(expanded=frozenset({2})), seed=1)
        with pytest.raises(ValueError, match="no decay factor"):
            net.forward(batch(rng))
        out = net.forward(batch(rng), {"conv2": 0.5})
        assert out.data.shape == (4, 4)

    def test_edge_convs_run_unquantized(self, rng):
        net = build_network(four_conv_spec(), seed=1)
        flags = {layer.layer_id: layer.quantize for kind, layer in net.blocks if kind == "lp"}
        assert flags == {"conv1": False, "conv2": True, "conv3": True, "conv4": False}

    def test_gradients_reach_every_parameter(self, rng):
        from expnet.autodiff import softmax_xent

        net = build_network(four_conv_spec(expanded=frozenset({2})), seed=1)
        x = batch(rng)
        loss = softmax_xent(net.forward(x, {"conv2": 0.5}), np.array([0, 1, 2, 3]))
        loss.backward()
        for name, t in net.params().items():
            assert t.grad is not None, name
            assert np.any(t.grad != 0) or name.endswith(".b"), name


class TestCheckpointTable:
    def test_tensor_table_round_trips_into_fresh_network(self, rng):
        src = build_network(four_conv_spec(expanded=frozenset({2})), seed=1)
        src.forward(batch(rng), {"conv2": 0.6}, mode="train")
        dst = build_network(four_conv_spec(expanded=frozenset({2})), seed=99)
        dst.load_tensor_table(src.tensor_table())
        x = batch(rng)
        a = src.forward(x, {"conv2": 0.25}, mode="infer")
        b = dst.forward(x, {"conv2": 0.25}, mode="infer")
        assert np.array_equal(a.data, b.data)

    def test_table_mismatch_is_rejected(self):
        net = build_network(four_conv_spec(), seed=1)
        table = net.tensor_table()
        del table["conv1.w"]
        with pytest.raises(ValueError, match="missing"):
            net.load_tensor_table(table)

    def test_shape_mismatch_is_rejected(self):
        net = build_network(four_conv_spec(), seed=1)
        table = net.tensor_table()
        table["conv1.w"] = table["conv1.w"][:, :, :1, :1]
        with pytest.raises(ValueError, match="shape"):
            net.load_tensor_table(table)


def perturb(net, rng):
    """Move every parameter and BN stat away from init, as training would."""
    for t in net.params().values():
        t.data = t.data + rng.normal(0, 0.1, t.data.shape)
    for kind, layer in net.blocks:
        if kind in ("lp", "exp"):
            layer.stats.mean = rng.normal(0, 0.5, layer.stats.mean.shape)
            layer.stats.var = 1.0 + rng.random(layer.stats.var.shape)
            if kind == "exp":
                layer.fp_stats.mean = rng.normal(0, 0.5, layer.fp_stats.mean.shape)
                layer.fp_stats.var = 1.0 + rng.random(layer.fp_stats.var.shape)


class TestPruning:
    def test_refuses_nonzero_factor(self):
        net = build_network(four_conv_spec(expanded=frozenset({2})), seed=1)
        with pytest.raises(ValueError, match="refusing to prune"):
            prune_network(net, {"conv2": 0.25})
        with pytest.raises(ValueError, match="no factor"):
            prune_network(net, {})

    @pytest.mark.parametrize("combine", ["add", "sub"])
    @pytest.mark.parametrize("scheme", [1, 2])
    def test_add_sub_recovery_is_bit_exact(self, rng, scheme, combine):
        spec = four_conv_spec(
            expanded=frozenset({2, 3}),
            block=ExpBlockConfig(scheme=scheme, combine=combine),
        )
        net = build_network(spec, seed=11)
        perturb(net, rng)
        factors = {"conv2": 0.0, "conv3": 0.0}
        pruned = prune_network(net, factors)
        x = batch(rng)
        a = net.forward(x, factors, mode="infer")
        b = pruned.forward(x, mode="infer")
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("scheme", [1, 2])
    def test_concat_recovery_matches_to_rounding(self, rng, scheme):
        spec = four_conv_spec(
            expanded=frozenset({2, 3}),
            block=ExpBlockConfig(
                scheme=scheme, combine="concat", fp_width_factor=Fraction(1, 2)
            ),
        )
        net = build_network(spec, seed=11)
        perturb(net, rng)
        factors = {"conv2": 0.0, "conv3": 0.0}
        pruned = prune_network(net, factors)
        x = batch(rng)
        a = net.forward(x, factors, mode="infer").data
        b = pruned.forward(x, mode="infer").data
        scale = max(np.abs(a).max(), 1.0)
        assert np.max(np.abs(a - b)) <= 1e-13 * scale
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))

    def test_concat_into_dense_consumer(self, rng):
        # expand the last conv so the dense layer eats the concat directly
        spec = NetworkSpec(
            input_shape=(1, 8, 8),
            num_classes=3,
            layers=(ConvDef(4, 3, 1, 1), ConvDef(6, 3, 1, 1)),
            expanded=frozenset({2}),
            block=ExpBlockConfig(scheme=2, combine="concat", fp_width_factor=Fraction(1, 2)),
            edge_unquantized=False,
        )
        net = build_network(spec, seed=2)
        perturb(net, rng)
        pruned = prune_network(net, {"conv2": 0.0})
        x = Tensor(rng.random((5, 1, 8, 8)))
        a = net.forward(x, {"conv2": 0.0}, mode="infer").data
        b = pruned.forward(x, mode="infer").data
        scale = max(np.abs(a).max(), 1.0)
        assert np.max(np.abs(a - b)) <= 1e-13 * scale

    def test_pruned_network_is_smaller_and_plain(self, rng):
        spec = four_conv_spec(
            expanded=frozenset({2, 3}), block=ExpBlockConfig(scheme=2, combine="add")
        )
        net = build_network(spec, seed=1)
        pruned = prune_network(net, {"conv2": 0.0, "conv3": 0.0})
        assert pruned.param_count() < net.param_count()
        assert pruned.spec.expanded == frozenset()
        baseline = build_network(four_conv_spec(), seed=1)
        assert set(pruned.params()) == set(baseline.params())

    def test_pruned_matches_baseline_topology_param_count(self):
        net = build_network(four_conv_spec(expanded=frozenset({2})), seed=1)
        pruned = prune_network(net, {"conv2": 0.0})
        baseline = build_network(four_conv_spec(), seed=1)
        assert pruned.param_count() == baseline.param_count()


class TestCapabilityShapes:
    def test_shapes_follow_the_chain(self):
        spec = four_conv_spec()
        shapes = {s.layer_id: s for s in spec.capability_shapes()}
        assert shapes["conv1"].in_channels == 1
        assert shapes["conv2"].in_channels == 8
        assert (shapes["conv2"].out_h, shapes["conv2"].out_w) == (8, 8)
        assert shapes["conv4"].out_channels == 16
        assert (shapes["conv4"].out_h, shapes["conv4"].out_w) == (4, 4)

    def test_expansion_does_not_change_capability_rows(self):
        plain = four_conv_spec()
        grown = four_conv_spec(
            expanded=frozenset({2}),
            block=ExpBlockConfig(scheme=2, combine="concat", fp_width_factor=Fraction(1, 2)),
        )
        assert plain.capability_shapes() == grown.capability_shapes()

    def test_feeds_capability_report(self):
        report = capability_report(four_conv_spec().capability_shapes())
        assert [row.layer_id for row in report.rows] == ["conv1", "conv2", "conv3", "conv4"]
        assert report.rows[1].d_value == 3 * 3 * 8 + 1
