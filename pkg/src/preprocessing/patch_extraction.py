"""
Supervoxel Patch Extraction

Each retained supervoxel is summarized by n_patch patches. Patch centres
come from k-means++ over the supervoxel's voxel world coordinates; every
patch is the s voxels of the same supervoxel nearest to its centre, read
across all modalities and followed by the centre's normalized coordinates.

Resulting node tensor (patch-major, modality-minor rows):
    values.shape == (n_patch * n_modalities, s + 3)
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from src.preprocessing.slic_supervoxels import SupervoxelPartition
from src.preprocessing.volume_io import MultiModalVolume

DEFAULT_N_PATCH = 16
DEFAULT_PATCH_SIZE = 24
LLOYD_ITERATIONS = 3


@dataclass(frozen=True)
class PatchTensor:
    """
    Node tensor of one supervoxel.

    Args:
        values: float32 (n_patch * n_modalities, s + 3)
        n_patch: patches per node
        s: voxels per patch
        n_modalities: channels per patch
        centroids_world: (n_patch, 3) patch centres in mm
        voxel_ids: (n_patch, s) flat voxel indices, nearest first
    """

    values: np.ndarray
    n_patch: int
    s: int
    n_modalities: int
    centroids_world: np.ndarray
    voxel_ids: np.ndarray

    def modality_of_row(self) -> np.ndarray:
        return np.tile(np.arange(self.n_modalities), self.n_patch)


def voxel_world_coords(flat_ids: np.ndarray, dims, spacing) -> np.ndarray:
    """World coordinates (mm) of flat voxel indices."""
    idx = np.column_stack(np.unravel_index(flat_ids, dims)).astype(np.float64)
    return idx * np.asarray(spacing, dtype=np.float64)


def kmeanspp_centroids(voxel_coords, n_patch: int, seed: int = 42) -> np.ndarray:
    """
    Pick n_patch patch centres with k-means++ seeding and 3 Lloyd steps.

    Coordinates are sorted lexicographically first, so the result does
    not depend on the order the voxels are enumerated in.

    Args:
        voxel_coords: (V, 3) world coordinates of one supervoxel
        n_patch: number of centres
        seed: RNG seed

    Returns:
        (n_patch, 3) centres; duplicates when V < n_patch

    Raises:
        ValueError: empty voxel list or n_patch < 1
    """
    coords = np.asarray(voxel_coords, dtype=np.float64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise ValueError("cannot place patch centroids in an empty supervoxel")
    if n_patch < 1:
        raise ValueError(f"n_patch must be >= 1, got {n_patch}")

    coords = coords[np.lexsort(coords.T[::-1])]

    if coords.shape[0] < n_patch:
        rng = np.random.default_rng(seed)
        return coords[rng.choice(coords.shape[0], size=n_patch, replace=True)]

    with warnings.catch_warnings():
        # duplicate points or an early stop are expected on tiny supervoxels
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(
            n_clusters=n_patch,
            init="k-means++",
            n_init=1,
            max_iter=LLOYD_ITERATIONS,
            tol=0.0,
            algorithm="lloyd",
            random_state=seed,
        ).fit(coords)

    return km.cluster_centers_.astype(np.float64)


def nearest_voxels(
    centroid: np.ndarray, flat_ids: np.ndarray, coords: np.ndarray, s: int
) -> np.ndarray:
    """
    Flat ids of the s voxels nearest to `centroid`, ties broken by voxel index.

    Fewer than s voxels: the nearest-first list is repeated cyclically.
    """
    d2 = ((coords - centroid) ** 2).sum(axis=1)
    order = np.lexsort((flat_ids, d2))
    if order.size >= s:
        return flat_ids[order[:s]]
    return flat_ids[np.resize(order, s)]


def extract_patches(
    vol: MultiModalVolume,
    partition: SupervoxelPartition,
    label: int,
    centroids: np.ndarray,
    s: int = DEFAULT_PATCH_SIZE,
    voxel_indices: Optional[np.ndarray] = None,
) -> PatchTensor:
    """
    Build the node tensor of supervoxel `label`.

    Args:
        vol: Volume to read intensities from (all modalities)
        partition: Partition that owns `label`
        label: Supervoxel id
        centroids: (n_patch, 3) world-space patch centres
        s: Voxels per patch
        voxel_indices: Optional precomputed flat voxel ids of `label`

    Returns:
        PatchTensor

    Raises:
        ValueError: empty centroid list, s < 1, or empty supervoxel
    """
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if centroids.shape[0] == 0:
        raise ValueError("centroid list is empty")
    if s < 1:
        raise ValueError(f"patch size s must be >= 1, got {s}")

    if voxel_indices is None:
        voxel_indices = np.flatnonzero(partition.labels.ravel() == label)
    flat_ids = np.asarray(voxel_indices, dtype=np.int64)
    if flat_ids.size == 0:
        raise ValueError(f"supervoxel {label} has no voxels")

    coords = voxel_world_coords(flat_ids, vol.dims, vol.spacing)
    patch_ids = np.stack([nearest_voxels(c, flat_ids, coords, s) for c in centroids])

    extent = vol.world_extent()
    safe = np.where(extent > 0, extent, 1.0)
    norm_centroids = np.clip(np.where(extent > 0, centroids / safe, 0.0), 0.0, 1.0)

    n_mod = len(vol.modalities)
    n_patch = centroids.shape[0]
    flat_data = vol.data.reshape(n_mod, -1)

    values = np.empty((n_patch * n_mod, s + 3), dtype=np.float32)
    for p in range(n_patch):
        rows = slice(p * n_mod, (p + 1) * n_mod)
        values[rows, :s] = flat_data[:, patch_ids[p]]
        values[rows, s:] = norm_centroids[p]

    return PatchTensor(
        values=values,
        n_patch=n_patch,
        s=s,
        n_modalities=n_mod,
        centroids_world=centroids,
        voxel_ids=patch_ids,
    )


def node_patch_tensor(
    vol: MultiModalVolume,
    partition: SupervoxelPartition,
    label: int,
    n_patch: int = DEFAULT_N_PATCH,
    s: int = DEFAULT_PATCH_SIZE,
    seed: int = 42,
    voxel_indices: Optional[np.ndarray] = None,
) -> PatchTensor:
    """k-means++ centres then patch extraction for one supervoxel."""
    if voxel_indices is None:
        voxel_indices = np.flatnonzero(partition.labels.ravel() == label)
    coords = voxel_world_coords(voxel_indices, vol.dims, vol.spacing)
    centroids = kmeanspp_centroids(coords, n_patch, seed=seed)
    return extract_patches(vol, partition, label, centroids, s, voxel_indices=voxel_indices)
