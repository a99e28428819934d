"""
Tests network assembly: backbones, fusion, SR-units, the reasoning module,
the classifier head, ablation variants and the NetworkGraph they live in
"""

from __future__ import annotations

import numpy as np
import pytest

from srnet import autograd
from srnet.autograd import finite_diff_check
from srnet.graph import Layer, NetworkGraph
from srnet.model import (BackboneVariant, ReasoningConfig, SRUnitConfig, build_backbone, build_variant,
                         depth_sweep_config, reasoning_module, sr_unit, sr_unit_graph)
from srnet.nnops import ConvSpec
from srnet.tensor import Shape, Tensor, random_normal
from srnet.utils import ConfigError, ConvSpecError, GraphError, ShapeError

RESNET = BackboneVariant.resnet()
VGG = BackboneVariant.vgg()
DESK_RESNET = BackboneVariant.resnet(16)
DESK_VGG = BackboneVariant.vgg(16)


def unit_output_loss(cfg, x_values, seed=0):
    graph = sr_unit_graph(cfg, seed=seed)
    result = graph.forward(Tensor(x_values), mode="train")
    weights = result.tape.constant(np.random.default_rng(seed + 1).normal(size=tuple(result.output.shape)))
    return result.tape, autograd.sum_all(autograd.mul(result.output, weights))


class TestBackbone:
    def test_resnet_pyramid_at_320(self):
        graph = build_backbone(RESNET, materialize=False)
        shapes = graph.infer_shapes((1, 3, 320, 320))
        pyramid = [shapes[name] for name in graph.tags["pyramid"]]
        assert [shape.c for shape in pyramid] == [64, 256, 512, 1024, 2048]
        assert pyramid[-1] == Shape(1, 2048, 10, 10)

    def test_resnet_level_one_at_64(self):
        graph = build_backbone(RESNET, materialize=False)
        assert graph.infer_shapes((1, 3, 64, 64))[graph.tags["pyramid"][0]] == Shape(1, 64, 32, 32)

    def test_vgg_top_levels_share_resolution(self):
        graph = build_backbone(VGG, materialize=False)
        shapes = graph.infer_shapes((1, 3, 320, 320))
        pyramid = [shapes[name] for name in graph.tags["pyramid"]]
        assert [shape.c for shape in pyramid] == [128, 256, 512, 512, 1024]
        assert {shape.spatial for shape in pyramid[2:]} == {(40, 40)}

    def test_indivisible_input(self):
        graph = build_backbone(RESNET, materialize=False)
        with pytest.raises(ShapeError):
            graph.infer_shapes((1, 3, 100, 100))

    def test_forward_pyramid(self):
        graph = build_backbone(DESK_RESNET, seed=1)
        result = graph.forward(random_normal((1, 3, 64, 64), seed=2))
        channels = [result.nodes[name].shape.c for name in graph.tags["pyramid"]]
        assert channels == list(DESK_RESNET.pyramid_channels)
        assert result.nodes[graph.tags["pyramid"][-1]].shape.spatial == (2, 2)

    def test_width_divisor(self):
        assert DESK_RESNET.fused_channels == 8
        with pytest.raises(ConfigError):
            BackboneVariant.resnet(3)
        with pytest.raises(ConfigError):
            BackboneVariant("alexnet")


class TestFusion:
    def test_resnet_fused_output(self):
        graph = build_variant("HFS", RESNET, materialize=False)
        shapes = graph.infer_shapes((1, 3, 320, 320))
        assert shapes[graph.tags["fused"]] == Shape(1, 128, 160, 160)
        assert shapes["fusion.cat4"].c == 512

    def test_lateral_channels(self):
        graph = build_variant("HFS", VGG, materialize=False)
        lateral = [graph.channels_of(f"fusion.lateral{level}.relu") for level in range(1, 6)]
        assert lateral == [128, 128, 256, 256, 256]

    def test_vgg_skips_upsampling_between_equal_strides(self):
        names = {layer.name for layer in build_variant("HFS", VGG, materialize=False)}
        assert "fusion.up4" not in names and "fusion.up3" not in names
        assert "fusion.up2" in names and "fusion.up1" in names


class TestSRUnit:
    def test_shape_preserved(self):
        graph = sr_unit_graph(SRUnitConfig(64, 64), materialize=False)
        assert graph.infer_shapes((1, 64, 8, 8))[graph.output_name] == Shape(1, 64, 8, 8)

    def test_dilated_shape_preserved(self):
        graph = sr_unit_graph(SRUnitConfig(32, 16, dilation_branch1=2, dilation_branch2=2), materialize=False)
        assert graph.infer_shapes((2, 32, 7, 7))[graph.output_name] == Shape(2, 16, 7, 7)

    def test_split_only_when_widths_match(self):
        split = {layer.name for layer in sr_unit_graph(SRUnitConfig(16, 16), materialize=False)}
        full = {layer.name for layer in sr_unit_graph(SRUnitConfig(32, 16), materialize=False)}
        assert "reasoning.u1.split1" in split
        assert "reasoning.u1.split1" not in full

    def test_second_pointwise_has_no_relu(self):
        names = {layer.name for layer in sr_unit_graph(SRUnitConfig(16, 16), materialize=False)}
        assert "reasoning.u1.b1.pw2.bn" in names and "reasoning.u1.b1.pw2.relu" not in names
        assert "reasoning.u1.b2.pw.bn" in names and "reasoning.u1.b2.pw.relu" not in names

    def test_divisibility(self):
        with pytest.raises(ConvSpecError):
            SRUnitConfig(16, 15)
        with pytest.raises(ConvSpecError):
            SRUnitConfig(16, 12, group_count=4)
        graph = NetworkGraph()
        with pytest.raises(ConvSpecError):
            sr_unit(graph, graph.add_input(channels=8), SRUnitConfig(16, 16), "u")

    def test_gradients(self):
        x = np.random.default_rng(3).normal(size=(1, 16, 6, 6))
        tape, loss = unit_output_loss(SRUnitConfig(16, 16, dilation_branch1=2), x)
        assert finite_diff_check(tape, loss) <= 1e-4

    @pytest.mark.slow
    def test_gradients_full_width(self):
        x = np.random.default_rng(4).normal(size=(1, 64, 8, 8))
        tape, loss = unit_output_loss(SRUnitConfig(64, 64, dilation_branch1=2), x)
        assert finite_diff_check(tape, loss, max_coords_per_param=8) <= 1e-4


class TestReasoningModule:
    @pytest.mark.parametrize("backbone, units, depthwise", [(RESNET, 4, 8), (VGG, 13, 26)])
    def test_unit_counts(self, backbone, units, depthwise):
        cfg = ReasoningConfig.for_backbone(backbone)
        graph = build_variant("SRNet", backbone, cfg, materialize=False)
        assert cfg.unit_count == units
        assert graph.depthwise_count() == depthwise == cfg.depthwise_layers()

    def test_output_shape(self):
        graph = NetworkGraph("reasoning")
        reasoning_module(graph, graph.add_input(channels=128), ReasoningConfig())
        assert graph.infer_shapes((1, 128, 160, 160))[graph.output_name] == Shape(1, 32, 160, 160)

    def test_dilation_alternates(self):
        units = ReasoningConfig(units_per_stage=(3, 7, 3)).unit_configs(128)
        second_stage = units[3:10]
        assert [unit.dilation_branch1 for unit in second_stage] == [2, 1, 2, 1, 2, 1, 2]
        assert all(unit.dilation_branch2 == 1 for unit in units)
        assert [unit.dilation_branch1 for unit in units[10:]] == [1, 1, 1]

    def test_channel_schedule(self):
        units = ReasoningConfig().unit_configs(128)
        assert [(unit.in_channels, unit.out_channels) for unit in units] == [(128, 64), (64, 48), (48, 32), (32, 32)]

    def test_without_dilation(self):
        cfg = ReasoningConfig(unit_overrides={1: {"dilation_branch1": 3}}).without_dilation()
        assert all(unit.dilation_branch1 == 1 for unit in cfg.unit_configs(128))

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            ReasoningConfig(stage_out_channels=(32, 48, 64))
        with pytest.raises(ConfigError):
            ReasoningConfig(units_per_stage=(1, 1))
        with pytest.raises(ConfigError):
            ReasoningConfig(unit_overrides={9: {"dilation_branch1": 2}})


class TestVariants:
    def test_bps_has_no_sr_units(self):
        graph = build_variant("BPS", RESNET, materialize=False)
        assert graph.count("conv", component="reasoning") == 0
        assert graph.count("shuffle") == 0

    def test_bfr_matches_srnet_parameters(self):
        bfr = build_variant("BFR", RESNET, materialize=False)
        srnet = build_variant("SRNet", RESNET, materialize=False)
        assert bfr.parameter_shapes() == srnet.parameter_shapes()

    def test_layer_counts_increase(self):
        counts = [len(build_variant(ablation, VGG, materialize=False)) for ablation in ("BPS", "HFS", "BFR", "SRNet")]
        assert counts[0] < counts[1] < counts[2] == counts[3]

    @pytest.mark.parametrize("backbone, fused", [(RESNET, 128), (DESK_RESNET, 8), (DESK_VGG, 8)])
    def test_reasoning_reads_the_fused_width(self, backbone, fused, caplog):
        with caplog.at_level("INFO", logger="srnet.model"):
            graph = build_variant("SRNet", backbone, materialize=False)
        assert graph.channels_of(graph.tags["fused"]) == fused
        assert graph["reasoning.u1.b1.pw1.conv"].spec.in_channels == fused
        assert graph.channels_of(graph.tags["reasoned"]) == 32
        assert ("reasoning reads" in caplog.text) == (fused != 128)

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError):
            build_variant("XYZ", RESNET, materialize=False)

    @pytest.mark.parametrize("ablation", ["BPS", "HFS", "BFR", "SRNet"])
    @pytest.mark.parametrize("backbone", [DESK_RESNET, DESK_VGG])
    def test_forward_is_finite(self, ablation, backbone):
        graph = build_variant(ablation, backbone, seed=5)
        probs = graph.predict(random_normal((2, 3, 64, 64), seed=6))
        assert probs.shape == Shape(2, 2, 64, 64)
        assert probs.all_finite()
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() <= 1e-12

    def test_zero_classifier_predicts_one_half(self):
        graph = build_variant("HFS", DESK_RESNET, seed=7)
        graph.params["classifier.score.weight"] = np.zeros_like(graph.params["classifier.score.weight"])
        probs = graph.predict(random_normal((1, 3, 64, 64), seed=8)).data
        assert np.allclose(probs, 0.5, rtol=0, atol=1e-15)

    def test_initialization_is_deterministic(self):
        first = build_variant("SRNet", DESK_RESNET, seed=9)
        second = build_variant("SRNet", DESK_RESNET, seed=9)
        other = build_variant("SRNet", DESK_RESNET, seed=10)
        assert all(np.array_equal(first.params[name], second.params[name]) for name in first.params)
        assert not np.array_equal(first.params["backbone.s1.a.conv.weight"], other.params["backbone.s1.a.conv.weight"])

    def test_parameter_groups(self):
        graph = build_variant("SRNet", DESK_RESNET, materialize=False)
        assert graph.parameter_group("backbone.s1.a.conv.weight") == "W"
        assert graph.parameter_group("fusion.top1.bn.gamma") == "W"
        assert graph.parameter_group("reasoning.u1.b1.dw.conv.weight") == "omega"
        assert graph.parameter_group("classifier.score.bias") == "theta"


class TestDepthSweep:
    @pytest.mark.parametrize("depth", [1, 9, 12, 18, 24])
    def test_exact_depthwise_count(self, depth):
        cfg = depth_sweep_config(depth)
        graph = build_variant("SRNet", RESNET, cfg, materialize=False)
        assert graph.depthwise_count() == depth == cfg.depthwise_layers()
        graph.infer_shapes((1, 3, 64, 64))

    def test_later_stages_take_the_remainder(self):
        assert depth_sweep_config(9).units_per_stage == (1, 2, 2)
        assert depth_sweep_config(12).units_per_stage == (2, 2, 2)

    def test_bad_depth(self):
        with pytest.raises(ConfigError):
            depth_sweep_config(0)


class TestNetworkGraph:
    def test_duplicate_and_unknown_names(self):
        graph = NetworkGraph()
        source = graph.add_input()
        graph.add_conv("c", ConvSpec(3, 4), source, "backbone")
        with pytest.raises(GraphError):
            graph.add_conv("c", ConvSpec(3, 4), source, "backbone")
        with pytest.raises(GraphError):
            graph.add(Layer("r", "relu", ("missing",), "backbone"))
        with pytest.raises(GraphError):
            graph["missing"]

    def test_forward_needs_parameters(self):
        graph = build_variant("BPS", DESK_RESNET, materialize=False)
        with pytest.raises(GraphError):
            graph.forward(random_normal((1, 3, 64, 64), seed=0))

    def test_manifest(self):
        graph = build_variant("SRNet", RESNET, materialize=False)
        manifest = graph.manifest((1, 3, 320, 320))
        lines = manifest.splitlines()
        assert len(lines) == len(graph) + 1
        assert lines[0].startswith("# SRNet-R")
        assert any("fusion.top1.relu" in line and "out=1x128x160x160" in line for line in lines)
        assert "classifier.up" in lines[-1] and "out=1x2x320x320" in lines[-1]

    def test_state_dict_round_trip(self):
        graph = build_variant("SRNet", DESK_RESNET, seed=11)
        graph.forward(random_normal((2, 3, 64, 64), seed=12), mode="train")
        copy = build_variant("SRNet", DESK_RESNET, seed=13)
        copy.load_state_dict(graph.state_dict())
        image = random_normal((1, 3, 64, 64), seed=14)
        assert np.array_equal(graph.predict(image).data, copy.predict(image).data)

    def test_load_state_dict_mismatch(self):
        state = build_variant("HFS", DESK_RESNET, seed=0).state_dict()
        with pytest.raises(GraphError):
            build_variant("SRNet", DESK_RESNET, seed=0).load_state_dict(state)
