"""Model IR: manifest round-trips, validation, shape inference, evaluation."""

from __future__ import annotations

import json

import numpy as np
import pytest

from prunekit import (
    GraphBuilder,
    GraphValidationError,
    ManifestError,
    ShapeError,
    forward_eval,
    graph_checksum,
    infer_shapes,
    load_model,
    validate,
)
from prunekit.graph import serialize_graph

from conftest import conv_w, make_chain, make_dense_toy, make_minimal, random_tiny_net, save_tmp
from oracles import loop_forward


class TestLoadSave:
    def test_minimal_model(self, tmp_path):
        g = make_minimal()
        manifest, weights = save_tmp(g, tmp_path)
        loaded = load_model(manifest, weights)
        assert len(loaded.nodes) == 3
        assert loaded.total_channels() == 4
        assert loaded.nodes["conv"].weight().size == 108  # 432-byte container
        assert loaded.nodes["conv"].tensors["weight"].nbytes == 432

    def test_weights_path_defaults_to_manifest_entry(self, tmp_path):
        g = make_minimal()
        manifest, _ = save_tmp(g, tmp_path)
        loaded = load_model(manifest)
        assert loaded.nodes["conv"].weight().size == 108

    def test_round_trip_bit_identical(self, tmp_path):
        g = make_minimal()
        _, container_a = serialize_graph(g)
        manifest, weights = save_tmp(g, tmp_path)
        loaded = load_model(manifest, weights)
        _, container_b = serialize_graph(loaded)
        assert container_a == container_b
        assert graph_checksum(g) == graph_checksum(loaded)

    def test_round_trip_random_nets(self, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(10):
            g = random_tiny_net(rng)
            manifest, weights = save_tmp(g, tmp_path, f"m{i}")
            loaded = load_model(manifest, weights)
            assert validate(loaded) == []
            assert graph_checksum(loaded) == graph_checksum(g)

    def test_tensor_out_of_bounds(self, tmp_path):
        g = make_minimal()
        manifest_path, weights_path = save_tmp(g, tmp_path)
        doc = json.loads(open(manifest_path).read())
        doc["nodes"][1]["tensors"]["weight"]["offset"] = doc["total_bytes"]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="out of bounds"):
            load_model(str(bad), weights_path)

    def test_overlapping_regions(self, tmp_path):
        rng = np.random.default_rng(0)
        g = make_chain(rng, (4, 4), kernel=1)
        manifest_path, weights_path = save_tmp(g, tmp_path)
        doc = json.loads(open(manifest_path).read())
        doc["nodes"][3]["tensors"]["weight"]["offset"] = doc["nodes"][1]["tensors"]["weight"]["offset"] + 4
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="overlap"):
            load_model(str(bad), weights_path)

    def test_malformed_manifest(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ManifestError, match="malformed"):
            load_model(str(bad))

    def test_missing_keys(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1}))
        with pytest.raises(ManifestError, match="missing key"):
            load_model(str(bad))

    def test_container_size_mismatch(self, tmp_path):
        g = make_minimal()
        manifest_path, weights_path = save_tmp(g, tmp_path)
        with open(weights_path, "ab") as f:
            f.write(b"\x00\x00\x00\x00")
        with pytest.raises(ManifestError, match="bytes"):
            load_model(manifest_path, weights_path)

    def test_load_rejects_invalid_graph(self, tmp_path):
        g = make_minimal()
        manifest_path, weights_path = save_tmp(g, tmp_path)
        doc = json.loads(open(manifest_path).read())
        doc["nodes"][1]["attrs"]["out_channels"] = 5  # weight tensor stays (4,3,3,3)
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        with pytest.raises(GraphValidationError, match="weight shape"):
            load_model(str(bad), weights_path)

    def test_vgg_fixture_scored_layers(self, vgg_graph):
        convs = [n for n in vgg_graph.weighted_layers() if n.kind == "Conv2d"]
        linears = [n for n in vgg_graph.weighted_layers() if n.kind == "Linear"]
        assert len(convs) == 13
        assert len(linears) == 1

    def test_vgg_round_trip(self, vgg_graph, tmp_path):
        manifest, weights = save_tmp(vgg_graph, tmp_path, "vgg")
        loaded = load_model(manifest, weights)
        assert validate(loaded) == []
        for nid, node in loaded.nodes.items():
            for role, blob in node.tensors.items():
                assert np.array_equal(blob.data, vgg_graph.nodes[nid].tensors[role].data), (nid, role)

    def test_in_select_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        b = GraphBuilder(3, 4)
        c1 = b.conv("c1", "input", conv_w(rng, 5, 3, 1))
        c2 = b.conv("c2", c1, conv_w(rng, 2, 3, 1), in_select=[0, 2, 4])
        gp = b.pool("gap", c2, "global-avg")
        fl = b.flatten("fl", gp)
        g = infer_shapes(b.output(b.linear("head", fl, rng.standard_normal((2, 2)).astype(np.float32))))
        manifest, weights = save_tmp(g, tmp_path)
        loaded = load_model(manifest, weights)
        assert loaded.nodes["c2"].in_select() == [0, 2, 4]
        infer_shapes(loaded)
        x = rng.standard_normal((3, 4, 4))
        assert np.allclose(forward_eval(loaded, x), forward_eval(g, x))


class TestValidate:
    def test_well_formed(self):
        rng = np.random.default_rng(1)
        assert validate(make_chain(rng, (4, 6), with_bn=True)) == []

    def test_bn_channel_mismatch(self):
        rng = np.random.default_rng(2)
        g = make_chain(rng, (4,), with_bn=True)
        g.nodes["bn1"].attrs["channels"] = 3
        violations = validate(g)
        assert any("bn1" in v and "producer width" in v for v in violations)

    def test_cycle_detected(self):
        rng = np.random.default_rng(3)
        g = make_chain(rng, (4, 6))
        g.nodes["conv1"].inputs = ["relu2"]
        assert any("cyclic" in v for v in validate(g))

    def test_dangling_input(self):
        rng = np.random.default_rng(4)
        g = make_chain(rng, (4,))
        g.nodes["conv1"].inputs = ["ghost"]
        assert any("does not exist" in v for v in validate(g))

    def test_out_of_order_manifest_rejected(self, tmp_path):
        rng = np.random.default_rng(15)
        g = make_chain(rng, (4,))
        manifest_path, weights_path = save_tmp(g, tmp_path)
        doc = json.loads(open(manifest_path).read())
        doc["nodes"] = doc["nodes"][::-1]  # acyclic but reversed
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        with pytest.raises(GraphValidationError, match="not topological"):
            load_model(str(bad), weights_path)

    def test_nonsquare_kernel_rejected(self):
        b = GraphBuilder(3, 8)
        with pytest.raises(ValueError, match="square"):
            b.conv("c", "input", np.zeros((4, 3, 3, 2), np.float32))

    def test_add_width_disagreement(self):
        rng = np.random.default_rng(6)
        b = GraphBuilder(3, 8)
        a = b.conv("a", "input", conv_w(rng, 4, 3, 1))
        c = b.conv("c", "input", conv_w(rng, 5, 3, 1))
        b.addnode("add", [a, c])
        g = b.output("add")
        assert any("disagree" in v for v in validate(g))


class TestInferShapes:
    def test_same_padding_identity(self):
        rng = np.random.default_rng(7)
        g = make_chain(rng, (4,), kernel=3, input_size=32)
        assert g.nodes["conv1"].in_size == 32
        assert g.nodes["conv1"].out_size == 32

    def test_pool_halves(self):
        b = GraphBuilder(3, 32)
        p = b.pool("p", "input", "max", kernel=2, stride=2)
        g = infer_shapes(b.output(p))
        assert g.nodes["p"].out_size == 16

    def test_vgg_block_spatial_sizes(self, vgg_graph):
        expected = {"conv1_1": 32, "conv2_1": 16, "conv3_1": 8, "conv4_1": 4, "conv5_1": 2}
        for nid, size in expected.items():
            assert vgg_graph.nodes[nid].in_size == size, nid

    def test_negative_size_rejected(self):
        rng = np.random.default_rng(8)
        b = GraphBuilder(3, 2)
        b.conv("c", "input", conv_w(rng, 4, 3, 5))
        g = b.output("c")
        with pytest.raises(ShapeError, match="larger than"):
            infer_shapes(g)

    def test_add_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        b = GraphBuilder(3, 8)
        a = b.conv("a", "input", conv_w(rng, 4, 3, 1))
        c = b.conv("c", "input", conv_w(rng, 4, 3, 3))  # no padding: 6x6 vs 8x8
        b.addnode("add", [a, c])
        g = b.output("add")
        with pytest.raises(ShapeError, match="disagree"):
            infer_shapes(g)

    def test_flatten_records_spatial(self):
        rng = np.random.default_rng(10)
        g = make_dense_toy(rng)
        assert g.nodes["flat"].in_size == 1  # after global pool
        from conftest import make_flatten_toy

        g2 = make_flatten_toy(rng, size=4)
        assert g2.nodes["flat"].in_size == 4
        assert g2.nodes["flat"].out_channels == g2.nodes["conv1"].out_channels * 16

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        g = make_chain(rng, (4, 6))
        first = {nid: (n.in_size, n.out_size, n.out_channels) for nid, n in g.nodes.items()}
        infer_shapes(g)
        second = {nid: (n.in_size, n.out_size, n.out_channels) for nid, n in g.nodes.items()}
        assert first == second


class TestForwardEval:
    def test_identity_kernel(self):
        b = GraphBuilder(1, 4)
        b.conv("c", "input", np.ones((1, 1, 1, 1), np.float32))
        g = infer_shapes(b.output("c"))
        x = np.random.default_rng(0).standard_normal((1, 4, 4))
        assert np.allclose(forward_eval(g, x), x)

    def test_all_zero_weights(self):
        rng = np.random.default_rng(13)
        g = make_chain(rng, (4, 6))
        for node in g.weighted_layers():
            node.weight()[:] = 0.0
        x = rng.standard_normal((3, 8, 8))
        assert np.all(forward_eval(g, x) == 0.0)

    def test_shape_mismatch(self):
        g = make_minimal()
        with pytest.raises(ShapeError, match="input shape"):
            forward_eval(g, np.zeros((3, 4, 4)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(12):
            g = random_tiny_net(rng)
            x = rng.standard_normal((g.input_channels, g.input_size, g.input_size))
            got = forward_eval(g, x)
            ref = loop_forward(g, x)
            assert np.allclose(got, ref, rtol=1e-5, atol=1e-9)
