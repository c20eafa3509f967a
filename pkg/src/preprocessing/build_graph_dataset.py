#!/usr/bin/env python3
"""
Build Supervoxel Graph Dataset

This script:
1. Loads multi-modal volumes (.mmv)
2. Normalizes every modality and over-segments with 3D SLIC
3. Prunes background supervoxels at the largest gap of the raw T1 means
4. Extracts per-node patch tensors and tumor-fraction targets
5. Links nodes by mutual kNN and adds Laplacian positional encodings
6. Saves one .svg2 graph per volume and granularity, plus a manifest

Failed volumes are collected and written next to the outputs instead of
stopping the run.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.config import PreprocessConfig
from src.preprocessing.background_pruning import (
    RetainedSet,
    compute_targets,
    retain_foreground,
)
from src.preprocessing.graph_builder import (
    SupervoxelGraph,
    laplacian_pe,
    mutual_knn,
    node_centroids,
    write_graph,
)
from src.preprocessing.patch_extraction import node_patch_tensor
from src.preprocessing.slic_supervoxels import SupervoxelPartition, partition_stats, slic
from src.preprocessing.volume_io import MultiModalVolume, normalize, read_mmv

GRAPH_SUFFIX = ".svg2"
MANIFEST_NAME = "graphs_manifest.csv"
FAILURES_NAME = "preprocess_failures.csv"


@dataclass
class PreprocessResult:
    """Graph plus the intermediate products needed to map it back to voxels."""

    graph: SupervoxelGraph
    partition: SupervoxelPartition
    retained: RetainedSet


def supervoxel_partition(vol: MultiModalVolume, cfg: PreprocessConfig, verbose: bool = False):
    """Normalized volume and its SLIC partition; statistics on the normalized data."""
    normed = normalize(vol)
    partition = slic(
        normed,
        reference_modality=cfg.reference_modality,
        n_sv=min(cfg.n_sv, vol.n_voxels),
        compactness=cfg.compactness,
        max_iters=cfg.max_iters,
        seed=cfg.seed,
        verbose=verbose,
    )
    return normed, partition


def pruning_means(vol: MultiModalVolume, partition: SupervoxelPartition, modality: str) -> np.ndarray:
    """
    Per-supervoxel means of the raw (un-normalized) reference modality.

    Normalization maps the zero background into the middle of the
    foreground distribution, so the gap is searched on raw intensities.
    """
    raw = partition_stats(partition.labels, vol)
    return raw.mean_intensity[:, vol.channel_index(modality)]


def preprocess_volume(
    vol: MultiModalVolume,
    cfg: Optional[PreprocessConfig] = None,
    source: str = "",
    verbose: bool = False,
) -> PreprocessResult:
    """
    Convert one volume into a SupervoxelGraph.

    Args:
        vol: Raw multi-modal volume; its mask (if any) provides targets
        cfg: Preprocessing parameters
        source: Path of the source volume, stored in the graph meta
        verbose: Print stage progress

    Returns:
        PreprocessResult

    Raises:
        DegenerateModalityError: a modality is all zero
        InsufficientForegroundError: pruning kept fewer than 2 supervoxels
    """
    cfg = cfg or PreprocessConfig()
    normed, partition = supervoxel_partition(vol, cfg, verbose=verbose)
    retained = retain_foreground(pruning_means(vol, partition, cfg.reference_modality))

    if verbose:
        print(f"  {vol.volume_id}: {partition.n_sv_actual} supervoxels, "
              f"{retained.indices.size} retained (theta={retained.theta:.4f})")

    voxel_index = partition.voxel_index()
    tensors = [
        node_patch_tensor(
            normed,
            partition,
            int(label),
            n_patch=cfg.n_patch,
            s=cfg.patch_size,
            seed=cfg.seed + int(label),
            voxel_indices=voxel_index[label],
        )
        for label in retained.indices
    ]

    centroids = node_centroids(tensors)
    adjacency = mutual_knn(centroids, k_nn=cfg.k_nn, rule=cfg.knn_rule)
    pe, _ = laplacian_pe(adjacency, cfg.k_pe)

    y_reg = y_cls = None
    if vol.mask is not None:
        targets = compute_targets(partition, vol.mask, retained, tau_cls=cfg.tau_cls)
        y_reg, y_cls = targets.y_reg, targets.y_cls

    meta = {
        "graph_id": f"{vol.volume_id}_sv{cfg.n_sv}",
        "volume_id": vol.volume_id,
        "source_volume": str(source),
        "n_sv_requested": cfg.n_sv,
        "n_sv_actual": partition.n_sv_actual,
        "theta": retained.theta,
        "modalities": list(vol.modalities),
        "preprocess": cfg.to_dict(),
    }

    graph = SupervoxelGraph(
        node_ids=retained.indices,
        patches=np.stack([t.values for t in tensors]),
        centroids=centroids,
        edges=adjacency.edges,
        isolated=adjacency.isolated,
        lap_pe=pe,
        y_reg=y_reg,
        y_cls=y_cls,
        meta=meta,
    )
    return PreprocessResult(graph=graph, partition=partition, retained=retained)


def rebuild_partition(vol: MultiModalVolume, graph: SupervoxelGraph) -> SupervoxelPartition:
    """
    Recompute the partition a graph was built from.

    Preprocessing is deterministic, so the graph meta is enough to get
    the voxel -> supervoxel map back from the source volume.

    Raises:
        ValueError: meta lacks preprocessing parameters or the rebuilt
            partition does not match the graph
    """
    if "preprocess" not in graph.meta:
        raise ValueError(f"graph {graph.graph_id!r} carries no preprocessing parameters")
    cfg = PreprocessConfig.from_dict(graph.meta["preprocess"])
    _, partition = supervoxel_partition(vol, cfg)

    expected = graph.meta.get("n_sv_actual")
    if expected is not None and partition.n_sv_actual != int(expected):
        raise ValueError(
            f"rebuilt partition has {partition.n_sv_actual} supervoxels, graph expects {expected}; "
            "is this the graph's source volume?"
        )
    return partition


def graph_path_for(volume_path: Union[str, Path], out_dir: Union[str, Path], n_sv: int) -> Path:
    return Path(out_dir) / f"{Path(volume_path).stem}_sv{n_sv}{GRAPH_SUFFIX}"


def _process_one(volume_path: Path, out_dir: Path, cfg: PreprocessConfig, verbose: bool):
    vol = read_mmv(volume_path)
    result = preprocess_volume(vol, cfg, source=str(volume_path), verbose=verbose)
    out = write_graph(result.graph, graph_path_for(volume_path, out_dir, cfg.n_sv))
    g = result.graph
    return {
        "graph_path": str(out),
        "source_volume": str(volume_path),
        "volume_id": vol.volume_id,
        "n_sv_requested": cfg.n_sv,
        "n_sv_actual": result.partition.n_sv_actual,
        "n_nodes": g.n_nodes,
        "n_edges": int(g.edges.shape[0]),
        "n_isolated": int(g.isolated.sum()),
        "tumor_nodes": int(g.y_cls.sum()) if g.has_targets else -1,
    }


def build_graph_dataset(
    volume_paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    cfg: Optional[PreprocessConfig] = None,
    granularities: Optional[Sequence[int]] = None,
    n_workers: int = 1,
    verbose: bool = True,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Preprocess many volumes at one or more granularities.

    Args:
        volume_paths: .mmv files
        out_dir: Output directory for graphs, manifest and failures
        cfg: Base preprocessing parameters
        granularities: n_sv values; defaults to [cfg.n_sv]
        n_workers: Worker threads (results are ordered independently of scheduling)
        verbose: Print progress and summary

    Returns:
        (manifest, failures) DataFrames, also saved as CSV in out_dir
    """
    cfg = cfg or PreprocessConfig()
    granularities = list(granularities or [cfg.n_sv])
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    jobs = [(Path(p), cfg.updated(n_sv=int(n))) for n in granularities for p in volume_paths]

    if verbose:
        print("=" * 70)
        print("BUILDING SUPERVOXEL GRAPH DATASET")
        print("=" * 70)
        print(f"Timestamp: {datetime.now().isoformat()}")
        print(f"Volumes: {len(volume_paths)}")
        print(f"Granularities: {', '.join(str(n) for n in granularities)}")
        print(f"Output: {out_dir}")
        print("=" * 70)

    def run(job):
        path, job_cfg = job
        try:
            return _process_one(path, out_dir, job_cfg, verbose=False), None
        except Exception as e:
            return None, {"source_volume": str(path), "n_sv_requested": job_cfg.n_sv,
                          "error": f"{type(e).__name__}: {e}"}

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as executor:
            outcomes = list(executor.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]

    results: List[dict] = []
    failed: List[dict] = []
    for i, (row, failure) in enumerate(outcomes):
        if row is not None:
            results.append(row)
            if verbose:
                print(f"  [{i + 1}/{len(jobs)}] {Path(row['graph_path']).name}: "
                      f"{row['n_nodes']} nodes, {row['n_edges']} edges")
        else:
            failed.append(failure)
            if verbose:
                print(f"  [{i + 1}/{len(jobs)}] FAILED {failure['source_volume']}: {failure['error']}")

    manifest = pd.DataFrame(results)
    failures = pd.DataFrame(failed, columns=["source_volume", "n_sv_requested", "error"])
    manifest.to_csv(out_dir / MANIFEST_NAME, index=False)
    if len(failures):
        failures.to_csv(out_dir / FAILURES_NAME, index=False)

    if verbose:
        print("\n" + "=" * 70)
        print("SUMMARY")
        print("=" * 70)
        print(f"Graphs written: {len(manifest)}")
        print(f"Failed: {len(failures)}")
        if len(manifest):
            print(f"Average nodes per graph: {manifest['n_nodes'].mean():.1f}")
            print(f"Average edges per graph: {manifest['n_edges'].mean():.1f}")

    return manifest, failures
