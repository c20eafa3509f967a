"""
k-Fold Split Manifests

Assigns graphs to folds, stratified by whether a graph contains any tumor
node, and writes one CSV manifest per fold (columns: path, fold, split).
"""

import os
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold, StratifiedKFold

from src.preprocessing.graph_builder import read_graph

MANIFEST_COLUMNS = ["path", "fold", "split"]


def _strata(graph_paths: Sequence[Union[str, Path]]) -> np.ndarray:
    labels = []
    for path in graph_paths:
        g = read_graph(path)
        labels.append(int(g.has_targets and bool(g.y_cls.any())))
    return np.asarray(labels)


def make_split_manifests(
    graph_paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    n_folds: int = 4,
    seed: int = 42,
) -> List[Path]:
    """
    Write `fold_<k>.csv` for k in [0, n_folds).

    Every graph is in the test split of exactly one fold. Stratification
    falls back to plain shuffled folds when a stratum is smaller than
    n_folds.

    Returns:
        Manifest paths in fold order
    """
    paths = [str(p) for p in graph_paths]
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    if len(paths) < n_folds:
        raise ValueError(f"{len(paths)} graphs cannot fill {n_folds} folds")

    strata = _strata(paths)
    if np.bincount(strata, minlength=2).min() >= n_folds:
        splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
        splits = splitter.split(np.zeros(len(paths)), strata)
    else:
        splitter = KFold(n_splits=n_folds, shuffle=True, random_state=seed)
        splits = splitter.split(np.zeros(len(paths)))

    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for fold, (train_idx, test_idx) in enumerate(splits):
        split = np.full(len(paths), "train", dtype=object)
        split[test_idx] = "test"
        manifest = pd.DataFrame({"path": paths, "fold": fold, "split": split})
        target = out_dir / f"fold_{fold}.csv"
        manifest[MANIFEST_COLUMNS].to_csv(target, index=False)
        written.append(target)
    return written


def read_split_manifest(path: Union[str, Path]) -> Tuple[List[str], List[str]]:
    """(train paths, test paths) of one manifest."""
    manifest = pd.read_csv(path)
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise ValueError(f"split manifest {path} lacks column(s) {sorted(missing)}")
    train = manifest.loc[manifest["split"] == "train", "path"].tolist()
    test = manifest.loc[manifest["split"] == "test", "path"].tolist()
    return train, test
