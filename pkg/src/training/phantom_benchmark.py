"""
Phantom End-to-End Benchmark

Generates a phantom cohort, converts it to supervoxel graphs, trains one
classification and one regression encoder (toy profile) on the training
split and scores both on the held-out split, including Dice from the
regression outputs. Each pooled metric is checked against a fixed bar.

Default cohort: 60 volumes of 48^3 (40 train / 20 test) at 64 supervoxels.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import DEFAULT_SEED, PreprocessConfig, TrainConfig
from src.preprocessing.build_graph_dataset import PreprocessResult, preprocess_volume
from src.preprocessing.synthetic_phantoms import PhantomSpec, generate_phantom
from src.preprocessing.volume_io import MultiModalVolume
from src.training.trainer import build_model, evaluate, model_config_for_graphs, train

N_VOLUMES = 60
N_TRAIN = 40
DIMS = (48, 48, 48)
N_SV = 64
MAX_EPOCHS = 200

# metric -> (direction, bar)
ACCEPTANCE_BARS: Dict[str, Tuple[str, float]] = {
    "f1": ("min", 0.85),
    "roc_auc": ("min", 0.95),
    "mae": ("max", 0.06),
    "r2": ("min", 0.60),
    "dice_mean": ("min", 0.60),
}


@dataclass
class BenchmarkResult:
    """Pooled test metrics of both tasks and their acceptance table."""

    metrics: Dict[str, float]
    acceptance: pd.DataFrame
    n_train_nodes: int
    n_test_nodes: int
    train_positive_fraction: float

    @property
    def passed(self) -> bool:
        return bool(self.acceptance["passed"].all())


def acceptance_table(metrics: Dict[str, float],
                     bars: Optional[Dict[str, Tuple[str, float]]] = None) -> pd.DataFrame:
    """
    One row per bar: metric, value, direction, bar, passed.

    A missing or NaN metric fails its bar.
    """
    rows = []
    for name, (direction, bar) in (bars or ACCEPTANCE_BARS).items():
        value = float(metrics.get(name, np.nan))
        if np.isnan(value):
            passed = False
        elif direction == "min":
            passed = value >= bar
        elif direction == "max":
            passed = value <= bar
        else:
            raise ValueError(f"unknown bar direction '{direction}' for {name}")
        rows.append({"metric": name, "value": value, "direction": direction,
                     "bar": bar, "passed": passed})
    return pd.DataFrame(rows, columns=["metric", "value", "direction", "bar", "passed"])


def phantom_cohort(n_volumes: int, dims=DIMS, seed: int = DEFAULT_SEED,
                   lesion_radius_range: Optional[Tuple[float, float]] = None) -> List[MultiModalVolume]:
    """Volumes phantom_000 ... with seeds seed, seed + 1, ..."""
    extra = {} if lesion_radius_range is None else {"lesion_radius_range": tuple(lesion_radius_range)}
    return [
        generate_phantom(PhantomSpec(dims=tuple(dims), seed=seed + i, **extra),
                         volume_id=f"phantom_{i:03d}")
        for i in range(n_volumes)
    ]


def _train_and_score(train_graphs, test_graphs, task, max_epochs, seed, dice_inputs, verbose):
    model_cfg = model_config_for_graphs(train_graphs, profile="toy", task=task)
    train_cfg = TrainConfig.from_profile("toy", max_epochs=max_epochs, task=task, seed=seed)
    model = build_model(model_cfg, seed=seed, dtype=train_cfg.dtype)
    result = train(train_graphs, model, train_cfg, verbose=verbose)
    report = evaluate(test_graphs, result.model, dtype=train_cfg.dtype,
                      dice_inputs=dice_inputs if task == "regression" else None)
    return report["pooled"]


def run_phantom_benchmark(
    n_volumes: int = N_VOLUMES,
    n_train: int = N_TRAIN,
    dims=DIMS,
    preprocess: Optional[PreprocessConfig] = None,
    max_epochs: int = MAX_EPOCHS,
    seed: int = DEFAULT_SEED,
    lesion_radius_range: Optional[Tuple[float, float]] = None,
    verbose: bool = False,
) -> BenchmarkResult:
    """
    Run the phantom benchmark end to end.

    Args:
        n_volumes: Cohort size
        n_train: Volumes used for training; the rest are the test split
        dims: Phantom dims
        preprocess: Volume -> graph parameters (default: n_sv=64)
        max_epochs: Epochs for each of the two models
        seed: Seed for phantoms, preprocessing and training
        lesion_radius_range: Overrides the phantom default lesion size
        verbose: Print progress

    Returns:
        BenchmarkResult

    Raises:
        ValueError: when either split would be empty
    """
    if not 0 < n_train < n_volumes:
        raise ValueError(f"n_train must lie in [1, {n_volumes - 1}], got {n_train}")
    cfg = preprocess or PreprocessConfig(n_sv=N_SV, seed=seed)

    if verbose:
        print("=" * 70)
        print("PHANTOM BENCHMARK")
        print("=" * 70)
        print(f"Volumes: {n_volumes} ({n_train} train / {n_volumes - n_train} test), "
              f"dims {tuple(dims)}, n_sv {cfg.n_sv}")

    volumes = phantom_cohort(n_volumes, dims=dims, seed=seed, lesion_radius_range=lesion_radius_range)
    results: List[PreprocessResult] = [preprocess_volume(v, cfg) for v in volumes]
    graphs = [r.graph for r in results]
    train_graphs, test_graphs = graphs[:n_train], graphs[n_train:]
    dice_inputs = {
        r.graph.graph_id: (r.partition, v.mask)
        for v, r in zip(volumes[n_train:], results[n_train:])
    }

    metrics: Dict[str, float] = {}
    for task in ("classification", "regression"):
        if verbose:
            print(f"\nTraining {task} model ({max_epochs} epochs)...")
        metrics.update(_train_and_score(train_graphs, test_graphs, task, max_epochs, seed,
                                        dice_inputs, verbose))

    table = acceptance_table(metrics)
    y_cls_train = np.concatenate([g.y_cls for g in train_graphs])

    if verbose:
        print("\n" + "=" * 70)
        print("BENCHMARK SUMMARY")
        print("=" * 70)
        print(table.to_string(index=False))

    return BenchmarkResult(
        metrics=metrics,
        acceptance=table,
        n_train_nodes=int(sum(g.n_nodes for g in train_graphs)),
        n_test_nodes=int(sum(g.n_nodes for g in test_graphs)),
        train_positive_fraction=float(y_cls_train.mean()),
    )
