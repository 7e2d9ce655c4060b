"""Command-line pipeline: dataset generation, training, prediction, eval, apps.

Heavy imports happen inside the command functions so --threads can cap the
BLAS pools before numpy loads.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time

__version__ = "0.1.0"

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _apply_threads(threads: int | None) -> None:
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def _read_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        cfg.read(path)
    return cfg


def _ints(text: str) -> tuple:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def write_manifest(out_dir: str, command: str, args: dict, seed: int | None,
                   outputs: list, wall_time: float, config: dict | None = None) -> str:
    """Atomic run manifest next to the outputs; enough to replay the run."""
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items())},
        "seed": seed,
        "config": config or {},
        "version": __version__,
        "wall_time_s": wall_time,
        "outputs": sorted(str(p) for p in outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return path


def model_config_from_ini(cfg: configparser.ConfigParser, paper_scale: bool = False):
    from .model import ModelConfig

    base = ModelConfig.paper_scale() if paper_scale else ModelConfig()
    if not cfg.has_section("model"):
        return base
    sec = cfg["model"]
    return ModelConfig(
        enc_channels=_ints(sec.get("enc_channels", ",".join(map(str, base.enc_channels)))),
        dec_channels=_ints(sec.get("dec_channels", ",".join(map(str, base.dec_channels)))),
        blocks=_ints(sec.get("blocks", ",".join(map(str, base.blocks)))),
        mlp_hidden=sec.getint("mlp_hidden", base.mlp_hidden),
        k=sec.getint("k", base.k),
        first_voxel_size=sec.getfloat("first_voxel_size", base.first_voxel_size),
        gn_groups=sec.getint("gn_groups", base.gn_groups),
    )


def train_config_from_ini(cfg: configparser.ConfigParser, seed: int,
                          paper_scale: bool = False):
    from .training import TrainConfig

    base = TrainConfig(seed=seed)
    if paper_scale:
        base = TrainConfig(epochs=500, batch_size=8, spectral_count=64, seed=seed)
    if not cfg.has_section("training"):
        return base
    sec = cfg["training"]
    return type(base)(
        epochs=sec.getint("epochs", base.epochs),
        batch_size=sec.getint("batch_size", base.batch_size),
        lr=sec.getfloat("lr", base.lr),
        weight_decay=sec.getfloat("weight_decay", base.weight_decay),
        mass_weight=sec.getfloat("mass_weight", base.mass_weight),
        spectral_count=sec.getint("spectral_count", base.spectral_count),
        holdout_fraction=sec.getfloat("holdout_fraction", base.holdout_fraction),
        checkpoint_every=sec.getint("checkpoint_every", base.checkpoint_every),
        seed=seed,
    )


# -- dataset ------------------------------------------------------------------

def generate_dataset(out_dir: str, num_shapes: int, seed: int,
                     min_resolution: int = 500, max_resolution: int = 900,
                     kinds: tuple | None = None) -> dict:
    """Write shapes with ground truth and spectral probes; returns the index."""
    import numpy as np

    from .geometry import SHAPE_KINDS, make_shape, normalize_unit_box, points_from_mesh
    from .laplacian import cotangent_laplacian
    from .meshio import save_obj, save_ply
    from .probes import save_probes, spectral_probes
    from .sparse import save_matrix_market, save_vector

    kinds = tuple(kinds) if kinds else SHAPE_KINDS
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5ED]))
    os.makedirs(os.path.join(out_dir, "shapes"), exist_ok=True)
    index = {"seed": seed, "kinds": list(kinds), "shapes": []}
    for i in range(num_shapes):
        kind = kinds[i % len(kinds)]
        resolution = int(rng.integers(min_resolution, max_resolution + 1))
        shape_seed = seed * 1_000_003 + i
        mesh = normalize_unit_box(make_shape(kind, resolution, shape_seed))
        name = f"{kind}_{i:04d}"
        shape_dir = os.path.join(out_dir, "shapes", name)
        os.makedirs(shape_dir, exist_ok=True)
        gt = cotangent_laplacian(mesh)
        probes = spectral_probes(gt, count=64)
        save_obj(os.path.join(shape_dir, "mesh.obj"), mesh)
        save_ply(os.path.join(shape_dir, "points.ply"), points_from_mesh(mesh), binary=True)
        save_matrix_market(os.path.join(shape_dir, "gt_L.mtx"), gt.stiffness)
        save_vector(os.path.join(shape_dir, "gt_M.txt"), gt.mass)
        save_probes(os.path.join(shape_dir, "probes_spectral.probes"), probes)
        index["shapes"].append({
            "name": name, "kind": kind, "resolution": resolution,
            "seed": shape_seed, "n_vertices": mesh.num_vertices,
        })
    tmp = os.path.join(out_dir, "index.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "index.json"))
    return index


def load_dataset(dataset_dir: str, model_cfg=None, limit: int | None = None) -> list:
    """Read shapes back into TrainingSamples; validates ground-truth row sums."""
    import numpy as np

    from .knn import build_knn
    from .laplacian import LaplacianPair
    from .meshio import load_obj
    from .model import ModelConfig, build_hierarchy
    from .probes import load_probes
    from .sparse import load_matrix_market, load_vector, spmv
    from .training import TrainingSample

    model_cfg = model_cfg or ModelConfig()
    with open(os.path.join(dataset_dir, "index.json"), "r", encoding="utf-8") as f:
        index = json.load(f)
    samples = []
    shapes = index["shapes"][:limit] if limit else index["shapes"]
    for entry in shapes:
        shape_dir = os.path.join(dataset_dir, "shapes", entry["name"])
        mesh = load_obj(os.path.join(shape_dir, "mesh.obj"))
        stiffness = load_matrix_market(os.path.join(shape_dir, "gt_L.mtx"))
        mass = load_vector(os.path.join(shape_dir, "gt_M.txt"))
        row_sums = spmv(stiffness, np.ones(stiffness.n))
        scale = max(np.abs(stiffness.data).max(), 1e-300)
        if np.abs(row_sums).max() > 1e-9 * scale:
            raise ValueError(f"{entry['name']}: ground-truth stiffness rows do not sum to zero")
        gt = LaplacianPair(stiffness, mass, tag="cotangent")
        probes = load_probes(os.path.join(shape_dir, "probes_spectral.probes"))
        graph = build_knn(mesh.vertices, k=model_cfg.k)
        hier = build_hierarchy(graph, model_cfg)
        samples.append(TrainingSample(entry["name"], entry["kind"], mesh.vertices.copy(),
                                      hier, gt, probes))
    return samples


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    cfg = _read_config(args.config)
    sec = cfg["dataset"] if cfg.has_section("dataset") else {}
    num = args.num_shapes or int(sec.get("num_shapes", 20))
    kinds = tuple(sec.get("kinds", "").replace(",", " ").split()) or None
    index = generate_dataset(
        args.out, num, args.seed,
        min_resolution=int(sec.get("min_resolution", 500)),
        max_resolution=int(sec.get("max_resolution", 900)),
        kinds=kinds,
    )
    outputs = [os.path.join(args.out, "index.json")]
    write_manifest(args.out, "gen", vars(args), args.seed, outputs,
                   time.perf_counter() - t0, {"num_shapes": num})
    print(f"wrote {len(index['shapes'])} shapes to {args.out}")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _read_config(args.config)
    model_cfg = model_config_from_ini(cfg, args.paper_scale)
    train_cfg = train_config_from_ini(cfg, args.seed, args.paper_scale)
    if args.epochs:
        from dataclasses import replace
        train_cfg = replace(train_cfg, epochs=args.epochs)
    samples = load_dataset(args.dataset, model_cfg, limit=args.limit)
    os.makedirs(args.out, exist_ok=True)

    from .training import TrainingDiverged, train, write_log_csv

    log_path = os.path.join(args.out, "log.csv")
    try:
        result = train(samples, model_cfg, train_cfg, out_dir=args.out)
    except TrainingDiverged as exc:
        dump = os.path.join(args.out, "diverged.json")
        with open(dump, "w", encoding="utf-8") as f:
            json.dump({"error": str(exc)}, f)
        print(f"error: {exc} (diagnostics in {dump})", file=sys.stderr)
        return 1
    write_log_csv(log_path, result.log)
    outputs = [log_path, os.path.join(args.out, "checkpoint_final")]
    write_manifest(args.out, "train", vars(args), args.seed, outputs,
                   time.perf_counter() - t0,
                   {"model": model_cfg.to_dict(), "training": train_cfg.to_dict()})
    final = result.log[-1]
    print(f"trained {train_cfg.epochs} epochs: total loss {final['loss_total']:.4f}, "
          f"holdout MSE {final['holdout_mse']:.4f}")
    return 0


def _load_cloud(path):
    from .meshio import load_mesh

    mesh = load_mesh(path)
    return mesh


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    import numpy as np

    from .geometry import normalize_unit_box
    from .knn import build_knn
    from .model import build_hierarchy, load_model
    from .sparse import save_matrix_market, save_vector

    model, _ = load_model(args.checkpoint)
    mesh = _load_cloud(args.cloud)
    if args.normalize:
        mesh = normalize_unit_box(mesh)
    graph = build_knn(mesh.vertices, k=model.config.k)
    pair = model.predict_pair(graph, build_hierarchy(graph, model.config))
    os.makedirs(args.out, exist_ok=True)
    l_path = os.path.join(args.out, "L.mtx")
    m_path = os.path.join(args.out, "M.txt")
    save_matrix_market(l_path, pair.stiffness)
    save_vector(m_path, pair.mass)
    sidecar = os.path.join(args.out, "pair.json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"tag": pair.tag, "n": pair.n, "k": model.config.k,
                   "sparsity": pair.sparsity()}, f, indent=1, sort_keys=True)
    write_manifest(args.out, "predict", vars(args), args.seed,
                   [l_path, m_path, sidecar], time.perf_counter() - t0)
    print(f"predicted operator for {pair.n} points -> {args.out}")
    return 0


def _pair_for_sample(sample, source: str, model, heat_t: float | None):
    from .laplacian import heat_kernel_laplacian, uniform_laplacian

    if source == "learned":
        return model.predict_pair(sample.graph, sample.hier)
    if source == "uniform":
        return uniform_laplacian(sample.graph)
    if source == "heat":
        if heat_t is None:
            import numpy as np
            g = sample.graph
            ui, uj = g.undirected_pairs()
            heat_t = float(np.mean(np.sum((g.positions[ui] - g.positions[uj]) ** 2, axis=1)))
        return heat_kernel_laplacian(sample.graph, heat_t)
    if source == "cotangent":
        return sample.gt
    raise ValueError(f"unknown operator source {source!r}")


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg = _read_config(args.config)
    model = None
    if args.checkpoint:
        from .model import load_model
        model, _ = load_model(args.checkpoint)
        model_cfg = model.config
        source = "learned"
    else:
        model_cfg = model_config_from_ini(cfg, args.paper_scale)
        source = args.baseline
    samples = load_dataset(args.dataset, model_cfg, limit=args.limit)

    from .probes import eval_probe_set
    from .training import evaluate

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for s in samples:
        pair = _pair_for_sample(s, source, model, args.heat_t)
        probes = eval_probe_set(s.gt, s.points, spectral=s.spectral)
        res = evaluate(pair, s.gt, probes)
        rows.append((s.kind, s.name, res.mse, res.r_gt1, res.sparsity))

    path = os.path.join(args.out, "metrics.csv")
    with open(path, "w", encoding="ascii") as f:
        f.write("category,name,mse,r_gt1,sparsity\n")
        for kind, name, mse, r, sp in rows:
            f.write(f"{kind},{name},{float(mse)!r},{float(r)!r},{float(sp)!r}\n")
        by_kind: dict[str, list] = {}
        for kind, _, mse, r, sp in rows:
            by_kind.setdefault(kind, []).append((mse, r, sp))
        import numpy as np
        for kind in sorted(by_kind):
            m = np.mean(by_kind[kind], axis=0)
            f.write(f"{kind},(mean),{float(m[0])!r},{float(m[1])!r},{float(m[2])!r}\n")
        m = np.mean([(r[2], r[3], r[4]) for r in rows], axis=0)
        f.write(f"total,,{float(m[0])!r},{float(m[1])!r},{float(m[2])!r}\n")
    write_manifest(args.out, "eval", vars(args), args.seed, [path],
                   time.perf_counter() - t0)
    print(f"evaluated {len(rows)} shapes with source={source}: "
          f"total mse {m[0]:.4f}, r>1 {m[1]:.3%}, sparsity {m[2]:.2f}")
    return 0


def cmd_app(args) -> int:
    t0 = time.perf_counter()
    import numpy as np

    from .apps import (DeformationConstraints, arap_deform, geodesic_heat,
                       heat_diffuse, laplacian_smooth, spectral_filter)
    from .knn import build_knn
    from .laplacian import cotangent_laplacian, heat_kernel_laplacian, uniform_laplacian
    from .meshio import load_mesh, save_ply, scalar_to_colors

    mesh = load_mesh(args.mesh) if args.mesh else None
    if mesh is None and args.cloud:
        mesh = load_mesh(args.cloud)
    if mesh is None:
        print("error: --mesh or --cloud is required", file=sys.stderr)
        return 2
    points = mesh.vertices
    graph = None
    model = None
    if args.checkpoint:
        from .model import load_model
        model, _ = load_model(args.checkpoint)
        graph = build_knn(points, k=model.config.k)
        pair = model.predict_pair(graph)
    elif args.operator == "cotangent":
        if mesh.num_triangles == 0:
            print("error: cotangent operator needs a triangle mesh", file=sys.stderr)
            return 2
        pair = cotangent_laplacian(mesh)
    else:
        graph = build_knn(points, k=args.k)
        if args.operator == "uniform":
            pair = uniform_laplacian(graph)
        else:
            ui, uj = graph.undirected_pairs()
            t_param = args.heat_t or float(
                np.mean(np.sum((points[ui] - points[uj]) ** 2, axis=1)))
            pair = heat_kernel_laplacian(graph, t_param)

    os.makedirs(args.out, exist_ok=True)
    outputs = []

    def dump_field(stem: str, field: np.ndarray):
        ply = os.path.join(args.out, stem + ".ply")
        csv = os.path.join(args.out, stem + ".csv")
        save_ply(ply, points, colors=scalar_to_colors(field))
        with open(csv, "w", encoding="ascii") as f:
            f.write("vertex,value\n")
            for i, val in enumerate(field):
                f.write(f"{i},{float(val)!r}\n")
        outputs.extend([ply, csv])

    if args.subcommand == "heat":
        u0 = np.zeros(pair.n)
        u0[args.source] = 1.0
        u = heat_diffuse(pair, u0, dt=args.dt, steps=args.steps)
        dump_field("heat", u)
    elif args.subcommand == "geodesic":
        if mesh.num_triangles == 0:
            print("error: geodesic needs a companion triangle mesh", file=sys.stderr)
            return 2
        phi = geodesic_heat(mesh, pair, args.source)
        dump_field("geodesic", phi)
    elif args.subcommand == "smooth":
        cloud = laplacian_smooth(points, pair, step=args.step, iters=args.iters)
        out_ply = os.path.join(args.out, "smoothed.ply")
        save_ply(out_ply, cloud)
        outputs.append(out_ply)
    elif args.subcommand == "filter":
        n_modes = args.n_modes
        if args.mode == "lowpass":
            filtered = spectral_filter(pair, points, 1.0, n_modes, residual="drop")
        elif args.mode == "highpass":
            filtered = spectral_filter(pair, points, 0.7, n_modes, residual="keep")
        elif args.mode == "amplify":
            gains = np.ones(n_modes)
            gains[args.band_start:] = 2.0
            filtered = spectral_filter(pair, points, gains, n_modes, residual="keep")
        else:
            filtered = spectral_filter(pair, points, 1.0, n_modes, residual="keep")
        out_ply = os.path.join(args.out, "filtered.ply")
        save_ply(out_ply, filtered)
        outputs.append(out_ply)
    elif args.subcommand == "arap":
        with open(args.constraints, "r", encoding="utf-8") as f:
            spec = json.load(f)
        fixed = np.asarray(spec["fixed"], dtype=np.int64)
        handles = np.asarray(spec.get("handle_indices", []), dtype=np.int64)
        targets = np.asarray(spec.get("handle_targets", []), dtype=np.float64).reshape(-1, 3)
        constraints = DeformationConstraints(fixed, points[fixed], handles, targets)
        if graph is None:
            graph = build_knn(points, k=args.k)
        cloud = arap_deform(points, graph, pair, constraints, iters=args.iters)
        out_ply = os.path.join(args.out, "deformed.ply")
        save_ply(out_ply, cloud)
        outputs.append(out_ply)
    write_manifest(args.out, f"app {args.subcommand}", vars(args), args.seed,
                   outputs, time.perf_counter() - t0)
    print(f"app {args.subcommand}: wrote {len(outputs)} files to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointlap",
        description="Learned Laplacian operators for point clouds on KNN graphs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--paper-scale", action="store_true",
                       help="use full-size network and training settings")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-shapes", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the operator network")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="use only the first N shapes")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict L and M for a point cloud")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="evaluate an operator source on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--baseline", choices=("uniform", "heat", "cotangent"))
    p.add_argument("--heat-t", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("app", help="run a geometry-processing application")
    common(p)
    p.add_argument("subcommand", choices=("heat", "geodesic", "smooth", "filter", "arap"))
    p.add_argument("--out", required=True)
    p.add_argument("--mesh", default=None)
    p.add_argument("--cloud", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--operator", choices=("cotangent", "uniform", "heat"), default="cotangent")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--heat-t", type=float, default=None)
    p.add_argument("--source", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--n-modes", type=int, default=20)
    p.add_argument("--band-start", type=int, default=20)
    p.add_argument("--mode", choices=("lowpass", "highpass", "amplify", "allpass"),
                   default="lowpass")
    p.add_argument("--constraints", default=None, help="JSON constraint file for arap")
    p.set_defaults(fn=cmd_app)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
