import numpy as np
import pytest

from pointlap.autodiff import Parameter, Tape, Tensor
from pointlap.geometry import make_shape, normalize_unit_box
from pointlap.knn import KnnGraph, build_knn, graph_from_edges
from pointlap.model import (GraphLevel, LaplacianNet, ModelConfig,
                            build_hierarchy, edge_geometry, graph_conv,
                            input_signal, load_model, save_model)


@pytest.fixture(scope="module")
def small_cloud():
    rng = np.random.default_rng(12)
    return rng.random((60, 3)) * 2 - 1


@pytest.fixture(scope="module")
def small_graph(small_cloud):
    return build_knn(small_cloud, k=8)


@pytest.fixture(scope="module")
def tiny_net(tiny_model_config):
    return LaplacianNet(tiny_model_config, seed=0)


class TestConfig:
    def test_defaults_and_paper_scale(self):
        desk = ModelConfig()
        assert desk.feature_dim == 64
        paper = ModelConfig.paper_scale()
        assert paper.enc_channels == (128, 128, 128)
        assert paper.dec_channels == (256, 256, 512)
        assert paper.blocks == (3, 2, 3)
        assert paper.feature_dim == 256
        assert paper.first_voxel_size == 1.0 / 16.0

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(blocks=(1, 1))
        with pytest.raises(ValueError):
            ModelConfig(blocks=(0, 1, 1))
        with pytest.raises(ValueError):
            ModelConfig(enc_channels=(12, 12, 12))  # not divisible by 8 groups

    def test_round_trip_dict(self):
        cfg = ModelConfig.paper_scale()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInputSignal:
    def test_full_degree_row(self):
        pts = np.random.default_rng(0).random((20, 3))
        g = build_knn(pts, k=8)
        sig = input_signal(g, 8)
        i = int(np.argmax(g.degree == 8)) if np.any(g.degree == 8) else 0
        if g.degree[i] == 8:
            assert sig[i].tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_no_absolute_coordinates(self, small_graph, small_cloud):
        shifted = KnnGraph(small_cloud + 100.0, small_graph.edge_src,
                           small_graph.edge_dst, small_graph.degree, k=8)
        assert np.array_equal(input_signal(small_graph, 8), input_signal(shifted, 8))

    def test_degree_column(self, small_graph):
        sig = input_signal(small_graph, 8)
        assert np.array_equal(sig[:, 3] * 8, small_graph.degree)


class TestGraphConv:
    def test_isolated_vertex_keeps_self_term(self):
        pos = np.random.default_rng(1).random((4, 3))
        g = graph_from_edges(pos, [0, 1], [1, 0], k=1)  # vertices 2, 3 isolated
        feats = np.random.default_rng(2).standard_normal((4, 3))
        w0 = Parameter("w0", np.random.default_rng(3).standard_normal((3, 5)))
        w1 = Parameter("w1", np.random.default_rng(4).standard_normal((7, 5)))
        out = graph_conv(Tape(), Tensor(feats), g, edge_geometry(g), w0, w1)
        assert np.abs(out.data[2] - feats[2] @ w0.data).max() < 1e-12
        assert np.abs(out.data[3] - feats[3] @ w0.data).max() < 1e-12

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(5)
        pts = rng.random((7, 3))
        g = build_knn(pts, k=2)
        feats = rng.standard_normal((7, 4))
        w0 = Parameter("w0", rng.standard_normal((4, 6)))
        w1 = Parameter("w1", rng.standard_normal((8, 6)))
        out = graph_conv(Tape(), Tensor(feats), g, edge_geometry(g), w0, w1)
        expected = feats @ w0.data
        for s, d in zip(g.edge_src, g.edge_dst):
            v = pts[s] - pts[d]
            msg = np.concatenate([feats[d], v, [np.linalg.norm(v)]])
            expected[s] += msg @ w1.data
        assert np.abs(out.data - expected).max() < 1e-12

    def test_translation_leaves_conv_unchanged(self):
        rng = np.random.default_rng(6)
        pts = rng.random((15, 3))
        g1 = build_knn(pts, k=3)
        g2 = KnnGraph(pts + np.array([5.0, -2.0, 1.0]), g1.edge_src, g1.edge_dst,
                      g1.degree, k=3)
        feats = rng.standard_normal((15, 4))
        w0 = Parameter("w0", rng.standard_normal((4, 4)))
        w1 = Parameter("w1", rng.standard_normal((8, 4)))
        a = graph_conv(Tape(), Tensor(feats), g1, edge_geometry(g1), w0, w1)
        b = graph_conv(Tape(), Tensor(feats), g2, edge_geometry(g2), w0, w1)
        assert np.abs(a.data - b.data).max() < 1e-12


class TestHierarchy:
    def test_three_levels_voxel_doubling(self, small_graph):
        hier = build_hierarchy(small_graph, ModelConfig())
        assert len(hier.levels) == 3
        assert len(hier.pools) == 2
        assert hier.pools[0].voxel_size == 1.0 / 16.0
        assert hier.pools[1].voxel_size == 1.0 / 8.0
        assert hier.levels[2].graph.num_vertices <= hier.levels[1].graph.num_vertices

    def test_minimum_cloud(self, tiny_model_config):
        pts = np.random.default_rng(7).random((9, 3))
        g = build_knn(pts, k=8)
        hier = build_hierarchy(g, tiny_model_config)
        net = LaplacianNet(tiny_model_config, seed=0)
        pair = net.predict_pair(g, hier)
        assert pair.n == 9


class TestForward:
    def test_outputs_well_formed(self, tiny_net, small_graph, tiny_model_config):
        hier = build_hierarchy(small_graph, tiny_model_config)
        weights, masses, feats = tiny_net.forward(Tape(), hier)
        ui, _ = small_graph.undirected_pairs()
        assert weights.data.shape == (len(ui), 1)
        assert np.all(weights.data >= 0)
        assert np.all(masses.data > 0)
        assert abs(masses.data.mean() - 1.0) < 1e-12
        assert feats.data.shape == (60, tiny_model_config.feature_dim)

    def test_assembled_pair_symmetric_exact(self, tiny_net, small_graph, tiny_model_config):
        pair = tiny_net.predict_pair(small_graph,
                                     build_hierarchy(small_graph, tiny_model_config))
        assert pair.stiffness.max_asymmetry() == 0.0
        assert pair.tag == "learned"

    def test_translation_invariance(self, tiny_net, small_cloud, tiny_model_config):
        rng = np.random.default_rng(8)
        shift = rng.uniform(-5, 5, 3)
        g1 = build_knn(small_cloud, k=8)
        g2 = build_knn(small_cloud + shift, k=8)
        p1 = tiny_net.predict_pair(g1, build_hierarchy(g1, tiny_model_config))
        p2 = tiny_net.predict_pair(g2, build_hierarchy(g2, tiny_model_config))
        assert np.abs(p1.stiffness.to_dense() - p2.stiffness.to_dense()).max() < 1e-9
        assert np.abs(p1.mass - p2.mass).max() < 1e-9

    def test_permutation_equivariance(self, tiny_net, small_cloud, tiny_model_config):
        rng = np.random.default_rng(9)
        perm = rng.permutation(len(small_cloud))
        g1 = build_knn(small_cloud, k=8)
        g2 = build_knn(small_cloud[perm], k=8)
        p1 = tiny_net.predict_pair(g1, build_hierarchy(g1, tiny_model_config))
        p2 = tiny_net.predict_pair(g2, build_hierarchy(g2, tiny_model_config))
        d1 = p1.stiffness.to_dense()
        d2 = p2.stiffness.to_dense()
        # row/col i of the permuted graph corresponds to vertex perm[i]
        assert np.abs(d2 - d1[np.ix_(perm, perm)]).max() < 1e-9
        assert np.abs(p2.mass - p1.mass[perm]).max() < 1e-9

    def test_deterministic_construction(self, tiny_model_config, small_graph):
        a = LaplacianNet(tiny_model_config, seed=5)
        b = LaplacianNet(tiny_model_config, seed=5)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        c = LaplacianNet(tiny_model_config, seed=6)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data)
                   for n in a.params)

    def test_rejects_tiny_graph(self, tiny_net, tiny_model_config):
        g = graph_from_edges(np.zeros((1, 3)), [], [], k=1)
        hier = build_hierarchy(g, tiny_model_config)
        with pytest.raises(ValueError):
            tiny_net.forward(Tape(), hier)


class TestCheckpointing:
    def test_save_load_identical_prediction(self, tiny_net, small_graph,
                                            tiny_model_config, tmp_path):
        hier = build_hierarchy(small_graph, tiny_model_config)
        before = tiny_net.predict_pair(small_graph, hier)
        save_model(tmp_path / "ck", tiny_net, extra={"epoch": 3})
        again, extra = load_model(tmp_path / "ck")
        assert extra["epoch"] == 3
        assert again.config == tiny_model_config
        after = again.predict_pair(small_graph, hier)
        assert np.array_equal(after.stiffness.data, before.stiffness.data)
        assert np.array_equal(after.mass, before.mass)

    def test_scales_with_vertex_count(self, tiny_net, tiny_model_config):
        # fully convolutional: same weights run on a larger cloud
        mesh = normalize_unit_box(make_shape("torus", 700, seed=3))
        g = build_knn(mesh.vertices, k=8)
        pair = tiny_net.predict_pair(g, build_hierarchy(g, tiny_model_config))
        assert pair.n == mesh.num_vertices
