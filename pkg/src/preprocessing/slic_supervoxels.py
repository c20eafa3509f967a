"""
3D SLIC Supervoxels

Lloyd-style clustering in joint (intensity, voxel position) space on a
single reference modality, followed by a connectivity pass that leaves
every supervoxel as one 26-connected component.

Distance between a voxel and a cluster centre:
    D = sqrt(d_intensity^2 + (compactness / S)^2 * d_spatial^2)
with S = (n_voxels / n_sv) ** (1/3) in voxel units, searched inside a
2S-wide window around each centre.
"""

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from src.preprocessing.volume_io import MultiModalVolume

DEFAULT_COMPACTNESS = 0.1
DEFAULT_MAX_ITERS = 10
CONVERGENCE_FACTOR = 1e-4   # stop when centres move less than this * S
MIN_SEGMENT_FRACTION = 0.25  # fragments below this * expected size are merged
COUNT_TOLERANCE = 0.30

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class SupervoxelStats:
    """
    Per-supervoxel statistics.

    Args:
        mean_intensity: (n_sv, n_modalities) exact mean per modality
        voxel_count: (n_sv,) voxels owned by each supervoxel
        centroid_world: (n_sv, 3) mean voxel world coordinate in mm
    """

    mean_intensity: np.ndarray
    voxel_count: np.ndarray
    centroid_world: np.ndarray


@dataclass(frozen=True)
class SupervoxelPartition:
    """Voxel -> supervoxel label grid with statistics over all modalities."""

    labels: np.ndarray
    stats: SupervoxelStats
    modalities: Tuple[str, ...]

    @property
    def n_sv_actual(self) -> int:
        return int(self.stats.voxel_count.shape[0])

    def mean_of(self, modality: str) -> np.ndarray:
        return self.stats.mean_intensity[:, self.modalities.index(modality)]

    def voxel_index(self):
        """Flat voxel indices of every supervoxel, ascending within each label."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.cumsum(np.bincount(flat, minlength=self.n_sv_actual))[:-1]
        return np.split(order, bounds)


def partition_stats(labels: np.ndarray, vol: MultiModalVolume) -> SupervoxelStats:
    """
    Compute mean intensity, voxel count and world centroid per supervoxel.

    Args:
        labels: Integer label grid with contiguous ids starting at 0
        vol: Volume whose dims match `labels`

    Returns:
        SupervoxelStats
    """
    if labels.shape != vol.dims:
        raise ValueError(f"label grid {labels.shape} does not match volume dims {vol.dims}")

    flat = labels.ravel().astype(np.int64)
    n_sv = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=n_sv)

    means = np.empty((n_sv, len(vol.modalities)), dtype=np.float64)
    for m in range(len(vol.modalities)):
        sums = np.bincount(flat, weights=vol.data[m].ravel().astype(np.float64), minlength=n_sv)
        means[:, m] = sums / counts

    centroids = np.empty((n_sv, 3), dtype=np.float64)
    for axis, coords in enumerate(np.indices(vol.dims, dtype=np.float64)):
        sums = np.bincount(flat, weights=coords.ravel() * vol.spacing[axis], minlength=n_sv)
        centroids[:, axis] = sums / counts

    return SupervoxelStats(mean_intensity=means, voxel_count=counts, centroid_world=centroids)


def _lattice_shape(dims, n_sv: int) -> Tuple[int, int, int]:
    """Seeds per axis: product as close to n_sv as possible, cells as cubic as possible."""
    best, best_score = (1, 1, 1), None
    for nx in range(1, min(dims[0], n_sv) + 1):
        for ny in range(1, min(dims[1], n_sv // nx) + 1):
            nz = int(np.clip(round(n_sv / (nx * ny)), 1, dims[2]))
            steps = np.asarray(dims, dtype=np.float64) / (nx, ny, nz)
            score = (abs(nx * ny * nz - n_sv), steps.max() / steps.min())
            if best_score is None or score < best_score:
                best, best_score = (nx, ny, nz), score
    return best


def _seed_centres(intensity: np.ndarray, n_sv: int, seed: Optional[int] = None) -> np.ndarray:
    """
    Regular lattice seeds, each moved to the lowest-gradient voxel of its
    3^3 neighbourhood when that voxel is strictly flatter than the seed.

    Ties between equally flat voxels go to the lowest raster index when
    `seed` is None, otherwise to a voxel drawn with `seed`.
    """
    dims = intensity.shape
    shape = _lattice_shape(dims, n_sv)
    axes = [
        (np.arange(n) * (d / n)) + (d / n - 1.0) / 2.0
        for d, n in zip(dims, shape)
    ]
    positions = np.array(list(itertools.product(*axes)), dtype=np.float64)

    # Perturbation only when neighbouring seeds are >= 3 voxels apart, so
    # two seeds can never land on the same voxel.
    if min(d / n for d, n in zip(dims, shape)) >= 3.0:
        rng = None if seed is None else np.random.default_rng(seed)
        grad = sum(g ** 2 for g in np.gradient(intensity.astype(np.float64)))
        for k, pos in enumerate(positions):
            voxel = np.clip(np.round(pos).astype(int), 0, np.asarray(dims) - 1)
            lo = np.maximum(voxel - 1, 0)
            hi = np.minimum(voxel + 2, dims)
            window = grad[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            if window.min() >= grad[tuple(voxel)]:
                continue
            flattest = np.flatnonzero(window.ravel() == window.min())
            pick = flattest[0] if rng is None else rng.choice(flattest)
            positions[k] = lo + np.asarray(np.unravel_index(pick, window.shape))

    values = ndimage.map_coordinates(
        intensity.astype(np.float64), positions.T, order=0, mode="nearest"
    )
    return np.column_stack([values, positions])


def _assign(intensity, centres, step, spatial_weight, coords):
    """One SLIC assignment sweep; ties go to the lowest cluster id."""
    dims = intensity.shape
    best = np.full(dims, np.inf)
    labels = np.full(dims, -1, dtype=np.int64)
    half = int(np.ceil(step))

    for k, (value, *pos) in enumerate(centres):
        pos = np.asarray(pos)
        lo = np.maximum(np.floor(pos).astype(int) - half, 0)
        hi = np.minimum(np.ceil(pos).astype(int) + half + 1, dims)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))

        d_int = (intensity[box] - value) ** 2
        d_sp = sum((coords[a][box] - pos[a]) ** 2 for a in range(3))
        dist = d_int + spatial_weight * d_sp

        closer = dist < best[box]
        best[box][closer] = dist[closer]
        labels[box][closer] = k

    unassigned = labels < 0
    if unassigned.any():
        tree = cKDTree(centres[:, 1:])
        points = np.column_stack([c[unassigned] for c in coords])
        labels[unassigned] = tree.query(points)[1]

    return labels


def _update(intensity, labels, centres, coords):
    flat = labels.ravel()
    k = centres.shape[0]
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    updated = centres.copy()
    filled = counts > 0
    for col, grid in enumerate([intensity] + list(coords)):
        sums = np.bincount(flat, weights=grid.ravel(), minlength=k)
        updated[filled, col] = sums[filled] / counts[filled]
    return updated


def enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """
    Split every label into its 26-connected components, merge components
    smaller than `min_size` into the largest adjacent segment, and relabel
    contiguously in raster order of first appearance.
    """
    segments = np.zeros(labels.shape, dtype=np.int64)
    n_segments = 0
    for lab, box in enumerate(ndimage.find_objects(labels + 1)):
        if box is None:
            continue
        comp, n = ndimage.label(labels[box] == lab, structure=CONNECTIVITY_26)
        region = segments[box]
        region[comp > 0] = comp[comp > 0] + n_segments - 1
        n_segments += n

    sizes = np.bincount(segments.ravel(), minlength=n_segments)
    boxes = ndimage.find_objects(segments + 1)
    for seg in np.argsort(sizes, kind="stable"):
        if sizes[seg] == 0 or sizes[seg] >= min_size:
            continue
        lo = [max(s.start - 1, 0) for s in boxes[seg]]
        hi = [min(s.stop + 1, d) for s, d in zip(boxes[seg], labels.shape)]
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        own = segments[box] == seg
        ring = ndimage.binary_dilation(own, structure=CONNECTIVITY_26) & ~own
        neighbours = np.unique(segments[box][ring])
        if neighbours.size == 0:
            continue
        # largest neighbour, lowest id on ties
        target = int(neighbours[np.argmax(sizes[neighbours])])
        segments[box][own] = target
        sizes[target] += sizes[seg]
        sizes[seg] = 0
        boxes[target] = tuple(
            slice(min(a.start, b.start), max(a.stop, b.stop))
            for a, b in zip(boxes[target], boxes[seg])
        )

    _, first, inverse = np.unique(segments.ravel(), return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse].reshape(labels.shape)


def slic(
    vol: MultiModalVolume,
    reference_modality: str = "T1",
    n_sv: int = 1000,
    compactness: float = DEFAULT_COMPACTNESS,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: Optional[int] = 42,
    verbose: bool = False,
) -> SupervoxelPartition:
    """
    Partition a volume into ~n_sv supervoxels from one reference modality.

    The label map is computed on `reference_modality` and applied to all
    modalities; statistics cover every modality.

    Args:
        vol: Input volume (normally already normalized)
        reference_modality: Channel that drives the clustering
        n_sv: Requested number of supervoxels
        compactness: Weight of spatial distance relative to intensity
        max_iters: Upper bound on Lloyd iterations
        seed: Breaks ties when lattice seeds move to the flattest
            neighbouring voxel; None takes the lowest index. Equal
            inputs and seed always give equal labels
        verbose: Print per-iteration centre movement

    Returns:
        SupervoxelPartition with contiguous labels

    Raises:
        ValueError: n_sv outside [1, n_voxels] or unknown modality
    """
    intensity = vol.channel(reference_modality).astype(np.float64)
    n_voxels = intensity.size
    if not 1 <= n_sv <= n_voxels:
        raise ValueError(f"n_sv={n_sv} must be within [1, {n_voxels}] voxels")

    step = (n_voxels / n_sv) ** (1.0 / 3.0)
    spatial_weight = (compactness / step) ** 2
    coords = np.indices(intensity.shape, dtype=np.float64)

    centres = _seed_centres(intensity, n_sv, seed)
    labels = _assign(intensity, centres, step, spatial_weight, coords)

    for it in range(max_iters):
        updated = _update(intensity, labels, centres, coords)
        movement = float(np.sqrt(((updated[:, 1:] - centres[:, 1:]) ** 2).sum(axis=1)).max())
        centres = updated
        labels = _assign(intensity, centres, step, spatial_weight, coords)
        if verbose:
            print(f"  SLIC iteration {it + 1}: max centre movement {movement:.5f}")
        if movement < CONVERGENCE_FACTOR * step:
            break

    labels = enforce_connectivity(labels, MIN_SEGMENT_FRACTION * n_voxels / n_sv)
    stats = partition_stats(labels, vol)

    n_actual = stats.voxel_count.shape[0]
    if abs(n_actual - n_sv) > COUNT_TOLERANCE * n_sv:
        warnings.warn(
            f"SLIC produced {n_actual} supervoxels for n_sv={n_sv} "
            f"(outside +/-{COUNT_TOLERANCE:.0%})"
        )

    return SupervoxelPartition(labels=labels, stats=stats, modalities=vol.modalities)
