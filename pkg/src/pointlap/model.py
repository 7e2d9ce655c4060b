"""Graph U-Net predicting per-edge stiffness weights and per-vertex masses.

The network never sees absolute coordinates: the input signal is all-ones
plus the neighbor count, and every graph convolution augments neighbor
features with the relative offset and its length. Weights come from an MLP
on the squared feature difference (symmetric by construction) behind a
ReLU; masses from an MLP behind a Softplus, normalized to mean one.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .knn import CoarseningLevel, KnnGraph, coarsen_by_voxel
from .laplacian import LaplacianPair, assemble_learned


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; ``paper_scale`` restores the published sizes."""

    enc_channels: tuple = (32, 32, 32)
    dec_channels: tuple = (64, 64, 128)
    blocks: tuple = (2, 2, 2)
    mlp_hidden: int = 64
    k: int = 8
    first_voxel_size: float = 1.0 / 16.0
    gn_groups: int = 8

    def __post_init__(self):
        if not (len(self.enc_channels) == len(self.dec_channels) == len(self.blocks) == 3):
            raise ValueError("the U-Net has exactly three levels")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every level needs at least one residual block")
        for c in (*self.enc_channels, *self.dec_channels):
            if c % self.gn_groups != 0:
                raise ValueError(f"channel width {c} not divisible by {self.gn_groups} groups")

    @property
    def feature_dim(self) -> int:
        return self.dec_channels[0]

    @staticmethod
    def paper_scale() -> "ModelConfig":
        return ModelConfig(enc_channels=(128, 128, 128), dec_channels=(256, 256, 512),
                           blocks=(3, 2, 3), mlp_hidden=256)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("enc_channels", "dec_channels", "blocks"):
            d[key] = list(d[key])
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("enc_channels", "dec_channels", "blocks"):
            if key in d:
                d[key] = tuple(d[key])
        return ModelConfig(**d)


@dataclass(frozen=True)
class EdgeGeometry:
    """Per directed edge (i, j): vec = x_i - x_j and its length."""

    vec: np.ndarray     # (e, 3)
    length: np.ndarray  # (e, 1)

    @property
    def matrix(self) -> np.ndarray:
        return np.concatenate([self.vec, self.length], axis=1)


def edge_geometry(graph: KnnGraph) -> EdgeGeometry:
    vec = graph.positions[graph.edge_src] - graph.positions[graph.edge_dst]
    return EdgeGeometry(vec, np.linalg.norm(vec, axis=1, keepdims=True))


def neighbor_table(graph: KnnGraph) -> np.ndarray:
    """(n, max_degree) neighbor index table padded with n (a zero row)."""
    n = graph.num_vertices
    md = int(graph.degree.max()) if n else 0
    table = np.full((n, max(md, 1)), n, dtype=np.int64)
    if graph.num_edges:
        # edge list is sorted by source, so slots are offsets within each run
        counts = graph.degree
        starts = np.r_[0, np.cumsum(counts)[:-1]]
        slots = np.arange(graph.num_edges) - np.repeat(starts, counts)
        table[graph.edge_src, slots] = graph.edge_dst
    return table


class GraphLevel:
    """One U-Net level: graph, edge geometry, and cached aggregation tables.

    `geom_sum` holds per-vertex [sum_j v_ij, sum_j l_ij]; because the
    message map is linear it can be applied after neighbor aggregation.
    """

    def __init__(self, graph: KnnGraph, geom: EdgeGeometry | None = None):
        self.graph = graph
        self.geom = geom or edge_geometry(graph)
        n = graph.num_vertices
        self.table = neighbor_table(graph)
        gsum = np.zeros((n, 4))
        src_plan = ad.ScatterPlan(graph.edge_src, n)
        gsum[:, :3] = src_plan.apply(self.geom.vec)
        gsum[:, 3:] = src_plan.apply(self.geom.length)
        self.geom_sum = gsum


@dataclass
class GraphHierarchy:
    levels: list[GraphLevel]          # fine to coarse, length 3
    pools: list[CoarseningLevel] = field(default_factory=list)  # length 2
    pool_plans: list = field(default_factory=list)

    @property
    def graph(self) -> KnnGraph:
        return self.levels[0].graph


def build_hierarchy(graph: KnnGraph, config: ModelConfig) -> GraphHierarchy:
    levels = [GraphLevel(graph)]
    pools = []
    pool_plans = []
    current = graph
    size = config.first_voxel_size
    for _ in range(2):
        pool = coarsen_by_voxel(current, size)
        current = pool.coarse
        levels.append(GraphLevel(current))
        pools.append(pool)
        pool_plans.append(ad.ScatterPlan(pool.mapping, pool.num_coarse))
        size *= 2.0
    return GraphHierarchy(levels, pools, pool_plans)


def input_signal(graph: KnnGraph, k: int) -> np.ndarray:
    """Row i = (1, 1, 1, degree_i / k); carries no absolute coordinates."""
    sig = np.ones((graph.num_vertices, 4))
    sig[:, 3] = graph.degree / float(max(k, 1))
    return sig


def graph_conv(tape: Tape, features: Tensor, graph: KnnGraph, geom: EdgeGeometry,
               w0: Parameter, w1: Parameter, level: GraphLevel | None = None) -> Tensor:
    """p_i <- W0 p_i + sum_{j in N(i)} W1 [p_j || v_ij || l_ij] (self excluded).

    The per-edge map is linear, so W1 is applied after summing neighbor
    features and edge geometry per vertex; this is algebraically identical
    to transforming each concatenated message and summing.
    """
    if level is None:
        level = GraphLevel(graph, geom)
    p_sum = ad.adjacency_sum(tape, features, level.table)
    agg = ad.concat_linear(tape, [p_sum, Tensor(level.geom_sum)], w1)
    return ad.add(tape, ad.matmul(tape, features, w0), agg)


def _pool(tape: Tape, x: Tensor, level: CoarseningLevel, plan=None) -> Tensor:
    total = ad.scatter_sum(tape, x, level.mapping, level.num_coarse, plan=plan)
    return ad.div(tape, total, Tensor(level.counts[:, None].astype(np.float64)))


def _unpool(tape: Tape, x: Tensor, level: CoarseningLevel) -> Tensor:
    return ad.gather_rows(tape, x, level.mapping)


class LaplacianNet:
    """U-Net over the voxel hierarchy followed by the edge / mass MLPs."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(np.random.SeedSequence([0x6E65, seed]))
        cfg = self.config
        self._add_linear(rng, "embed", 4, cfg.enc_channels[0])
        for prefix, _, c_in, c_out in self._block_plan():
            self._add_block(rng, prefix, c_in, c_out)
        self._add_linear(rng, "edge.fc1", cfg.feature_dim, cfg.mlp_hidden)
        # small weights + positive bias: pre-ReLU values start near +0.5 for
        # every edge, so no edge is dead at init and the initial operator is
        # close to uniform weights
        self._add_linear(rng, "edge.fc2", cfg.mlp_hidden, 1, bias_init=0.5, scale=0.1)
        self._add_linear(rng, "mass.fc1", cfg.feature_dim, cfg.mlp_hidden)
        self._add_linear(rng, "mass.fc2", cfg.mlp_hidden, 1)

    def _block_plan(self):
        cfg = self.config
        plan = []
        width = cfg.enc_channels[0]
        for lvl in (0, 1):
            for b in range(cfg.blocks[lvl]):
                plan.append((f"enc{lvl}.block{b}", lvl, width, cfg.enc_channels[lvl]))
                width = cfg.enc_channels[lvl]
        for b in range(cfg.blocks[2]):
            plan.append((f"bott.block{b}", 2, width, cfg.dec_channels[2]))
            width = cfg.dec_channels[2]
        for lvl in (1, 0):
            width += cfg.enc_channels[lvl]
            for b in range(cfg.blocks[lvl]):
                plan.append((f"dec{lvl}.block{b}", lvl, width, cfg.dec_channels[lvl]))
                width = cfg.dec_channels[lvl]
        return plan

    def _add_linear(self, rng, name: str, c_in: int, c_out: int,
                    bias_init: float = 0.0, scale: float = 1.0):
        self.params[f"{name}.w"] = Parameter(
            f"{name}.w", scale * ad.kaiming_uniform(rng, c_in, (c_in, c_out)))
        self.params[f"{name}.b"] = Parameter(f"{name}.b", np.full(c_out, bias_init))

    def _add_block(self, rng, prefix: str, c_in: int, c_out: int):
        p = self.params
        p[f"{prefix}.conv1.w0"] = Parameter(
            f"{prefix}.conv1.w0", ad.kaiming_uniform(rng, c_in, (c_in, c_out)))
        p[f"{prefix}.conv1.w1"] = Parameter(
            f"{prefix}.conv1.w1", ad.kaiming_uniform(rng, c_in + 4, (c_in + 4, c_out)))
        p[f"{prefix}.gn1.g"] = Parameter(f"{prefix}.gn1.g", np.ones(c_out))
        p[f"{prefix}.gn1.b"] = Parameter(f"{prefix}.gn1.b", np.zeros(c_out))
        p[f"{prefix}.conv2.w0"] = Parameter(
            f"{prefix}.conv2.w0", ad.kaiming_uniform(rng, c_out, (c_out, c_out)))
        p[f"{prefix}.conv2.w1"] = Parameter(
            f"{prefix}.conv2.w1", ad.kaiming_uniform(rng, c_out + 4, (c_out + 4, c_out)))
        p[f"{prefix}.gn2.g"] = Parameter(f"{prefix}.gn2.g", np.ones(c_out))
        p[f"{prefix}.gn2.b"] = Parameter(f"{prefix}.gn2.b", np.zeros(c_out))
        if c_in != c_out:
            p[f"{prefix}.proj.w"] = Parameter(
                f"{prefix}.proj.w", ad.kaiming_uniform(rng, c_in, (c_in, c_out)))

    def _resblock(self, tape, x, level: GraphLevel, prefix: str) -> Tensor:
        p = self.params
        groups = self.config.gn_groups
        h = graph_conv(tape, x, level.graph, level.geom,
                       p[f"{prefix}.conv1.w0"], p[f"{prefix}.conv1.w1"], level=level)
        h = ad.group_norm(tape, h, groups, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"])
        h = ad.relu(tape, h)
        h = graph_conv(tape, h, level.graph, level.geom,
                       p[f"{prefix}.conv2.w0"], p[f"{prefix}.conv2.w1"], level=level)
        h = ad.group_norm(tape, h, groups, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"])
        shortcut = x
        if f"{prefix}.proj.w" in p:
            shortcut = ad.matmul(tape, x, p[f"{prefix}.proj.w"])
        return ad.relu(tape, ad.add(tape, h, shortcut))

    def forward(self, tape: Tape, hier: GraphHierarchy):
        """Returns (edge weights (e_u, 1), masses (n, 1), features (n, f)).

        Edge weights follow ``graph.undirected_pairs()`` order; masses are
        already normalized to mean one.
        """
        cfg = self.config
        p = self.params
        g0 = hier.levels[0].graph
        if g0.num_vertices < 2:
            raise ValueError("need at least two vertices")
        x = Tensor(input_signal(g0, cfg.k))
        x = ad.linear(tape, x, p["embed.w"], p["embed.b"])
        skips = []
        for lvl in (0, 1):
            for b in range(cfg.blocks[lvl]):
                x = self._resblock(tape, x, hier.levels[lvl], f"enc{lvl}.block{b}")
            skips.append(x)
            plan = hier.pool_plans[lvl] if hier.pool_plans else None
            x = _pool(tape, x, hier.pools[lvl], plan=plan)
        for b in range(cfg.blocks[2]):
            x = self._resblock(tape, x, hier.levels[2], f"bott.block{b}")
        for lvl in (1, 0):
            x = _unpool(tape, x, hier.pools[lvl])
            x = ad.concat_cols(tape, [x, skips[lvl]])
            for b in range(cfg.blocks[lvl]):
                x = self._resblock(tape, x, hier.levels[lvl], f"dec{lvl}.block{b}")
        feats = x

        ui, uj = g0.undirected_pairs()
        diff = ad.sub(tape, ad.gather_rows(tape, feats, ui), ad.gather_rows(tape, feats, uj))
        sq = ad.mul(tape, diff, diff)
        h = ad.softplus(tape, ad.linear(tape, sq, p["edge.fc1.w"], p["edge.fc1.b"]))
        weights = ad.relu(tape, ad.linear(tape, h, p["edge.fc2.w"], p["edge.fc2.b"]))

        hm = ad.softplus(tape, ad.linear(tape, feats, p["mass.fc1.w"], p["mass.fc1.b"]))
        raw = ad.softplus(tape, ad.linear(tape, hm, p["mass.fc2.w"], p["mass.fc2.b"]))
        masses = ad.div(tape, raw, ad.mean_all(tape, raw))
        return weights, masses, feats

    def predict_pair(self, graph: KnnGraph, hier: GraphHierarchy | None = None) -> LaplacianPair:
        if hier is None:
            hier = build_hierarchy(graph, self.config)
        weights, masses, _ = self.forward(Tape(), hier)
        return assemble_learned(graph, weights.data.ravel(), masses.data.ravel())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def save_model(path, model: LaplacianNet, extra: dict | None = None) -> None:
    manifest = {"config": model.config.to_dict()}
    manifest.update(extra or {})
    ad.save_checkpoint(path, model.params, manifest)


def load_model(path) -> tuple[LaplacianNet, dict]:
    params, extra = ad.load_checkpoint(path)
    config = ModelConfig.from_dict(extra["config"])
    model = LaplacianNet(config)
    if set(params) != set(model.params):
        raise ValueError("checkpoint parameters do not match the configuration")
    for name, p in params.items():
        if p.data.shape != model.params[name].data.shape:
            raise ValueError(f"shape mismatch for {name}")
        model.params[name] = p
    return model, extra
