"""Learned Laplacian operators for unoriented point clouds on KNN graphs."""

__version__ = "0.1.0"

from .geometry import (Mesh, PointCloud, make_shape, normalize_unit_box,
                       points_from_mesh)
from .knn import KnnGraph, build_knn, coarsen_by_voxel, pool_features, unpool_features
from .laplacian import (LaplacianPair, assemble_learned, cotangent_laplacian,
                        heat_kernel_laplacian, uniform_laplacian)
from .model import LaplacianNet, ModelConfig, build_hierarchy
from .probes import ProbeSet, eval_probe_set, spatial_probes, spectral_probes
from .sparse import SparseMatrix, cg_solve, eig_smallest, spmv
from .training import TrainConfig, evaluate, loss_laplacian, loss_mass, train

__all__ = [
    "Mesh", "PointCloud", "make_shape", "normalize_unit_box", "points_from_mesh",
    "KnnGraph", "build_knn", "coarsen_by_voxel", "pool_features", "unpool_features",
    "LaplacianPair", "assemble_learned", "cotangent_laplacian",
    "heat_kernel_laplacian", "uniform_laplacian",
    "LaplacianNet", "ModelConfig", "build_hierarchy",
    "ProbeSet", "eval_probe_set", "spatial_probes", "spectral_probes",
    "SparseMatrix", "cg_solve", "eig_smallest", "spmv",
    "TrainConfig", "evaluate", "loss_laplacian", "loss_mass", "train",
]
