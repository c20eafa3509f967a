"""
Dynamic Background Pruning and Supervoxel Targets

Background supervoxels are removed with a data-driven cut: the means are
sorted, the largest gap between neighbours is located, and the threshold
sits halfway across it. Retained supervoxels then get a tumor-fraction
regression target and a thresholded classification target.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from src.preprocessing.slic_supervoxels import SupervoxelPartition

DEFAULT_TAU_CLS = 0.15
MIN_RETAINED = 2


class NoGapError(ValueError):
    """All means are equal, so there is no gap to cut at."""


class InsufficientForegroundError(ValueError):
    """Pruning left fewer supervoxels than a graph needs."""


@dataclass(frozen=True)
class RetainedSet:
    """
    Supervoxels kept after pruning.

    Args:
        indices: sorted retained supervoxel ids
        theta: threshold; retained means are strictly above it
        gap_index: position g in the ascending means of the gap's lower side
    """

    indices: np.ndarray
    theta: float
    gap_index: int


@dataclass(frozen=True)
class NodeTargets:
    """Per-retained-supervoxel targets, aligned with RetainedSet.indices."""

    y_reg: np.ndarray
    y_cls: np.ndarray
    tumor_voxels: np.ndarray
    tau_cls: float = DEFAULT_TAU_CLS


def prune_background(means) -> RetainedSet:
    """
    Keep the supervoxels above the largest gap in the sorted means.

    Args:
        means: mean reference-modality intensity per supervoxel

    Returns:
        RetainedSet

    Raises:
        ValueError: fewer than two means
        NoGapError: every mean is identical
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 1 or means.size < 2:
        raise ValueError(f"need at least 2 supervoxel means, got {means.size}")

    ordered = np.sort(means, kind="stable")
    gaps = np.diff(ordered)
    g = int(np.argmax(gaps))
    if not gaps[g] > 0:
        raise NoGapError("no gap: all supervoxel means are equal")

    theta = 0.5 * (ordered[g] + ordered[g + 1])
    return RetainedSet(indices=np.flatnonzero(means > theta), theta=float(theta), gap_index=g)


def retain_foreground(means, min_retained: int = MIN_RETAINED) -> RetainedSet:
    """
    prune_background with the caller-side policy: fall back to retaining
    everything on "no gap", and reject samples left with too few nodes.

    Raises:
        InsufficientForegroundError: fewer than `min_retained` supervoxels kept
    """
    means = np.asarray(means, dtype=np.float64)
    try:
        retained = prune_background(means)
    except NoGapError:
        warnings.warn("no gap in supervoxel means; retaining all supervoxels")
        retained = RetainedSet(
            indices=np.arange(means.size), theta=float("-inf"), gap_index=-1
        )

    if retained.indices.size < min_retained:
        raise InsufficientForegroundError(
            f"pruning retained {retained.indices.size} supervoxel(s); need at least {min_retained}"
        )
    return retained


def compute_targets(
    partition: SupervoxelPartition,
    mask: np.ndarray,
    retained: RetainedSet,
    tau_cls: float = DEFAULT_TAU_CLS,
) -> NodeTargets:
    """
    Tumor fraction per retained supervoxel and its binarized class.

    y_reg = (# voxels with mask > 0) / voxel_count; y_cls = y_reg > tau_cls.

    Args:
        partition: Supervoxel partition
        mask: Voxel class labels, same dims as the partition
        retained: Supervoxels to build targets for
        tau_cls: Classification threshold (strict)

    Returns:
        NodeTargets aligned with retained.indices
    """
    if mask is None:
        raise ValueError("compute_targets needs a ground-truth mask")
    if mask.shape != partition.labels.shape:
        raise ValueError(f"mask shape {mask.shape} != label grid {partition.labels.shape}")

    ids = np.asarray(retained.indices, dtype=np.int64)
    n_sv = partition.n_sv_actual
    if ids.size and (ids.min() < 0 or ids.max() >= n_sv):
        raise ValueError(f"retained id outside partition of {n_sv} supervoxels")

    tumor = np.bincount(partition.labels[mask > 0].ravel(), minlength=n_sv)
    tumor_voxels = tumor[ids]
    y_reg = tumor_voxels / partition.stats.voxel_count[ids]
    y_cls = (y_reg > tau_cls).astype(np.uint8)

    return NodeTargets(y_reg=y_reg, y_cls=y_cls, tumor_voxels=tumor_voxels, tau_cls=tau_cls)
