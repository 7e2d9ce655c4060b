import json
import os

import numpy as np
import pytest

from pointlap.cli import generate_dataset, load_dataset, main
from pointlap.model import ModelConfig

TINY_CFG = """
[model]
enc_channels = 16,16,16
dec_channels = 16,16,16
blocks = 1,1,1
mlp_hidden = 16

[dataset]
num_shapes = 3
min_resolution = 120
max_resolution = 180

[training]
epochs = 2
batch_size = 2
spectral_count = 8
holdout_fraction = 0.34
checkpoint_every = 0
"""


@pytest.fixture(scope="module")
def tiny_cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_CFG)
    return str(path)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, tiny_cfg_file):
    out = str(tmp_path_factory.mktemp("data") / "ds")
    rc = main(["gen", "--out", out, "--seed", "3", "--config", tiny_cfg_file,
               "--threads", "1"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint_dir(tmp_path_factory, dataset_dir, tiny_cfg_file):
    out = str(tmp_path_factory.mktemp("run") / "train")
    rc = main(["train", "--dataset", dataset_dir, "--out", out,
               "--seed", "0", "--config", tiny_cfg_file, "--threads", "1"])
    assert rc == 0
    return os.path.join(out, "checkpoint_final")


def test_gen_layout(dataset_dir):
    with open(os.path.join(dataset_dir, "index.json")) as f:
        index = json.load(f)
    assert len(index["shapes"]) == 3
    for entry in index["shapes"]:
        shape_dir = os.path.join(dataset_dir, "shapes", entry["name"])
        for fname in ("mesh.obj", "points.ply", "gt_L.mtx", "gt_M.txt",
                      "probes_spectral.probes"):
            assert os.path.exists(os.path.join(shape_dir, fname)), fname
    assert os.path.exists(os.path.join(dataset_dir, "run_manifest.json"))


def test_gen_rerun_identical_index(dataset_dir, tiny_cfg_file, tmp_path):
    out2 = str(tmp_path / "ds2")
    assert main(["gen", "--out", out2, "--seed", "3", "--config", tiny_cfg_file]) == 0
    a = open(os.path.join(dataset_dir, "index.json"), "rb").read()
    b = open(os.path.join(out2, "index.json"), "rb").read()
    assert a == b


def test_load_validates_row_sums(dataset_dir, tmp_path):
    import shutil

    broken = str(tmp_path / "broken")
    shutil.copytree(dataset_dir, broken)
    with open(os.path.join(broken, "index.json")) as f:
        name = json.load(f)["shapes"][0]["name"]
    mtx = os.path.join(broken, "shapes", name, "gt_L.mtx")
    lines = open(mtx).read().splitlines()
    head, (i, j, v) = lines[:2], lines[2].split()
    lines[2] = f"{i} {j} {float(v) + 0.5!r}"
    open(mtx, "w").write("\n".join(lines) + "\n")
    with pytest.raises(ValueError):
        load_dataset(broken, ModelConfig())


def test_train_outputs(checkpoint_dir):
    run_dir = os.path.dirname(checkpoint_dir)
    log = open(os.path.join(run_dir, "log.csv")).read().splitlines()
    assert log[0] == "epoch,lr,loss_laplacian,loss_mass,loss_total,holdout_mse"
    assert len(log) == 3
    assert os.path.exists(os.path.join(checkpoint_dir, "manifest.json"))
    manifest = json.load(open(os.path.join(run_dir, "run_manifest.json")))
    assert manifest["command"] == "train"
    assert manifest["seed"] == 0


def test_predict_round_trip(checkpoint_dir, dataset_dir, tmp_path):
    from pointlap.sparse import load_matrix_market

    with open(os.path.join(dataset_dir, "index.json")) as f:
        name = json.load(f)["shapes"][0]["name"]
    cloud = os.path.join(dataset_dir, "shapes", name, "points.ply")
    out = str(tmp_path / "pred")
    rc = main(["predict", "--checkpoint", checkpoint_dir, "--cloud", cloud,
               "--out", out, "--threads", "1"])
    assert rc == 0
    stiffness = load_matrix_market(os.path.join(out, "L.mtx"))
    assert stiffness.max_asymmetry() == 0.0
    sidecar = json.load(open(os.path.join(out, "pair.json")))
    assert sidecar["tag"] == "learned"
    assert sidecar["n"] == stiffness.n


def test_eval_schema_and_total(dataset_dir, tiny_cfg_file, tmp_path):
    out = str(tmp_path / "eval")
    rc = main(["eval", "--dataset", dataset_dir, "--out", out,
               "--baseline", "uniform", "--config", tiny_cfg_file])
    assert rc == 0
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0] == "category,name,mse,r_gt1,sparsity"
    assert lines[-1].startswith("total,,")
    per_shape = [ln for ln in lines[1:] if "(mean)" not in ln and not ln.startswith("total")]
    assert len(per_shape) == 3
    for ln in per_shape:
        cat, name, mse, r, sp = ln.split(",")
        assert 0.0 <= float(mse) <= 1.0
        assert 9.0 <= float(sp) <= 11.0


def test_eval_cotangent_is_exact(dataset_dir, tiny_cfg_file, tmp_path):
    out = str(tmp_path / "evalc")
    rc = main(["eval", "--dataset", dataset_dir, "--out", out,
               "--baseline", "cotangent", "--config", tiny_cfg_file])
    assert rc == 0
    total = open(os.path.join(out, "metrics.csv")).read().splitlines()[-1]
    assert float(total.split(",")[2]) == 0.0


def test_app_geodesic_delegated_oracle(tmp_path):
    # cotangent geodesic on a saved flat grid reproduces Euclidean distance
    from pointlap.geometry import grid_plane
    from pointlap.meshio import save_obj

    mesh = grid_plane(24, 24)
    mesh_path = str(tmp_path / "plane.obj")
    save_obj(mesh_path, mesh)
    out = str(tmp_path / "geo")
    src = (12 * 25 + 12)
    rc = main(["app", "geodesic", "--mesh", mesh_path, "--operator", "cotangent",
               "--source", str(src), "--out", out])
    assert rc == 0
    rows = open(os.path.join(out, "geodesic.csv")).read().splitlines()[1:]
    phi = np.array([float(r.split(",")[1]) for r in rows])
    d = np.linalg.norm(mesh.vertices - mesh.vertices[src], axis=1)
    interior = np.all(np.abs(mesh.vertices[:, :2]) < 1.0 - 1.5 / 12, axis=1)
    mask = interior & (d > 1e-12)
    rel = np.abs(phi[mask] - d[mask]) / d[mask]
    assert rel.mean() < 0.03
    assert os.path.exists(os.path.join(out, "geodesic.ply"))


def test_app_smooth_and_filter(dataset_dir, tmp_path):
    with open(os.path.join(dataset_dir, "index.json")) as f:
        name = json.load(f)["shapes"][0]["name"]
    mesh_path = os.path.join(dataset_dir, "shapes", name, "mesh.obj")
    out1 = str(tmp_path / "smooth")
    assert main(["app", "smooth", "--mesh", mesh_path, "--operator", "cotangent",
                 "--iters", "5", "--out", out1]) == 0
    assert os.path.exists(os.path.join(out1, "smoothed.ply"))
    out2 = str(tmp_path / "filt")
    assert main(["app", "filter", "--mesh", mesh_path, "--operator", "uniform",
                 "--n-modes", "10", "--mode", "lowpass", "--out", out2]) == 0
    assert os.path.exists(os.path.join(out2, "filtered.ply"))


def test_app_arap(dataset_dir, tmp_path):
    with open(os.path.join(dataset_dir, "index.json")) as f:
        name = json.load(f)["shapes"][0]["name"]
    mesh_path = os.path.join(dataset_dir, "shapes", name, "mesh.obj")
    from pointlap.meshio import load_obj

    n = load_obj(mesh_path).num_vertices
    spec = {"fixed": list(range(0, 10)),
            "handle_indices": [n - 1],
            "handle_targets": [[0.0, 0.0, 1.5]]}
    cpath = tmp_path / "cons.json"
    cpath.write_text(json.dumps(spec))
    out = str(tmp_path / "arap")
    rc = main(["app", "arap", "--mesh", mesh_path, "--operator", "cotangent",
               "--constraints", str(cpath), "--iters", "3", "--out", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "deformed.ply"))


def test_missing_input_fails_cleanly(tmp_path):
    rc = main(["eval", "--dataset", str(tmp_path / "nope"), "--out",
               str(tmp_path / "o"), "--baseline", "uniform"])
    assert rc == 1


def test_app_requires_geometry(tmp_path):
    rc = main(["app", "heat", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
