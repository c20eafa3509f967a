"""Shared fixtures: small phantoms, their graphs, tiny encoder configs."""

import numpy as np
import pytest
import torch

from src.config import ModelConfig, PreprocessConfig
from src.preprocessing.build_graph_dataset import preprocess_volume
from src.preprocessing.graph_builder import SupervoxelGraph, laplacian_pe, mutual_knn
from src.preprocessing.synthetic_phantoms import PhantomSpec, generate_phantom
from src.preprocessing.volume_io import MultiModalVolume

SMALL_PREPROCESS = PreprocessConfig(n_sv=64, n_patch=2, patch_size=4, k_nn=4, k_pe=3)


@pytest.fixture(scope="session")
def small_phantom() -> MultiModalVolume:
    spec = PhantomSpec(dims=(24, 24, 24), n_lesions=1, lesion_radius_range=(3.0, 4.0), seed=7)
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def small_preprocessed(small_phantom):
    return preprocess_volume(small_phantom, SMALL_PREPROCESS)


@pytest.fixture(scope="session")
def small_partition(small_preprocessed):
    return small_preprocessed.partition


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        d_model=8,
        n_transformer_layers=1,
        n_attn_heads=2,
        n_gat_layers=2,
        n_gat_heads=2,
        k_pe=3,
        n_pred_heads=3,
        head_hidden_dim=8,
        dropout=0.0,
        n_modalities=2,
        n_patch=2,
        patch_size=3,
    )


def make_random_graph(cfg: ModelConfig, n_nodes: int = 6, seed: int = 0, k_nn: int = 2,
                      graph_id: str = "random", with_targets: bool = True) -> SupervoxelGraph:
    """Random node tensors on random positions, linked and encoded like a real graph."""
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0, 10, size=(n_nodes, 3))
    adjacency = mutual_knn(centroids, k_nn=min(k_nn, n_nodes - 1))
    pe, _ = laplacian_pe(adjacency, cfg.k_pe)
    y_reg = rng.uniform(0, 1, size=n_nodes) if with_targets else None
    return SupervoxelGraph(
        node_ids=np.arange(n_nodes),
        patches=rng.normal(size=(n_nodes, cfg.patch_rows, cfg.row_width)),
        centroids=centroids,
        edges=adjacency.edges,
        isolated=adjacency.isolated,
        lap_pe=pe,
        y_reg=y_reg,
        y_cls=(y_reg > 0.5).astype(np.uint8) if with_targets else None,
        meta={"graph_id": graph_id, "modalities": [f"M{i}" for i in range(cfg.n_modalities)]},
    )


@pytest.fixture
def random_graph_factory(tiny_model_config):
    def factory(**kwargs):
        return make_random_graph(tiny_model_config, **kwargs)
    return factory


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield
