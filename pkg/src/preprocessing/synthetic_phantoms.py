"""
Synthetic Multi-Modal Brain Phantoms

Deterministic stand-in for real multi-modal MRI: a two-tissue brain
ellipsoid (inner "white matter" core, outer "gray matter" shell) on an
exact-zero background, with ellipsoidal lesions whose contrast differs
per modality. Lesion voxels are marked with class 1 in the mask.

Tissues are piecewise constant with sharp edges; only the additive noise
is smoothed. Default lesions are sized for a 48^3 volume cut into 64
supervoxels: every lesion is larger than one supervoxel.

Every phantom is a pure function of its PhantomSpec.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from src.preprocessing.volume_io import DEFAULT_MODALITIES, MultiModalVolume

BRAIN_SEMI_AXES = (0.42, 0.38, 0.40)  # fraction of dims
CORE_SCALE = 0.8                      # inner core holds ~half the brain volume
NOISE_SMOOTHING_SIGMA = 1.0           # voxels
MAX_PLACEMENT_ATTEMPTS = 200

# Intensity signatures per modality: (gray matter, white matter, lesion).
# Lesions are darker than tissue in T1 and brighter in T1ce, T2, FLAIR.
TISSUE_SIGNATURES: Dict[str, Tuple[float, float, float]] = {
    "T1": (0.80, 1.20, 0.55),
    "T1ce": (0.80, 1.00, 1.60),
    "T2": (1.10, 0.80, 1.60),
    "FLAIR": (1.00, 0.90, 1.90),
}


@dataclass(frozen=True)
class PhantomSpec:
    """
    Recipe for one synthetic volume.

    Args:
        dims: voxel counts (nx, ny, nz)
        n_lesions: number of ellipsoidal lesions
        lesion_radius_range: (min, max) lesion semi-axis in voxels
        noise_sigma: std of additive Gaussian noise before it is smoothed
        seed: RNG seed; equal specs give bit-identical volumes
        spacing: voxel size in mm
    """

    dims: Tuple[int, int, int] = (48, 48, 48)
    n_lesions: int = 1
    lesion_radius_range: Tuple[float, float] = (9.0, 12.0)
    noise_sigma: float = 0.05
    seed: int = 42
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 4 for d in self.dims):
            raise ValueError(f"dims must be 3 values >= 4, got {self.dims}")
        if self.n_lesions < 0:
            raise ValueError(f"n_lesions must be >= 0, got {self.n_lesions}")
        r_min, r_max = self.lesion_radius_range
        if not 0 < r_min <= r_max:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius_range}")
        if self.n_lesions and 2 * r_max >= min(self.dims):
            raise ValueError(
                f"lesion radius {r_max} does not fit in a volume of dims {self.dims}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    """Voxels whose centres lie inside the axis-aligned ellipsoid."""
    X, Y, Z = np.indices(shape, dtype=np.float64)
    return (
        ((X - center[0]) / semi_axes[0]) ** 2
        + ((Y - center[1]) / semi_axes[1]) ** 2
        + ((Z - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _place_lesion(rng, brain, spec: PhantomSpec) -> np.ndarray:
    """Draw lesion ellipsoids until one lies fully inside the brain."""
    r_min, r_max = spec.lesion_radius_range
    dims = np.asarray(spec.dims, dtype=np.float64)

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        radii = rng.uniform(r_min, r_max, size=3)
        center = rng.uniform(radii, dims - 1.0 - radii)
        lesion = ellipsoid_mask(spec.dims, center, radii)
        if lesion.any() and not (lesion & ~brain).any():
            return lesion

    raise ValueError(
        f"lesion of radius up to {r_max} cannot fit inside the brain of a {spec.dims} phantom"
    )


def generate_phantom(spec: PhantomSpec, volume_id: str = "") -> MultiModalVolume:
    """
    Generate one synthetic multi-modal volume with a lesion mask.

    Args:
        spec: Phantom recipe
        volume_id: Identifier stored on the returned volume

    Returns:
        MultiModalVolume with the four default modalities and a mask

    Raises:
        ValueError: when a lesion cannot be placed inside the brain
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=np.float64)
    center = (dims - 1.0) / 2.0
    brain_axes = dims * np.asarray(BRAIN_SEMI_AXES)

    brain = ellipsoid_mask(spec.dims, center, brain_axes)
    core = ellipsoid_mask(spec.dims, center, brain_axes * CORE_SCALE)

    lesion_mask = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.n_lesions):
        lesion_mask |= _place_lesion(rng, brain, spec)

    grids = []
    for name in DEFAULT_MODALITIES:
        gray, white, lesion = TISSUE_SIGNATURES[name]
        grid = np.where(core, white, gray) * brain
        grid = np.where(lesion_mask, lesion, grid)
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
            grid = grid + gaussian_filter(noise, sigma=NOISE_SMOOTHING_SIGMA)
        grid[~brain] = 0.0
        grids.append(grid.astype(np.float32))

    return MultiModalVolume(
        data=np.stack(grids),
        spacing=spec.spacing,
        modalities=DEFAULT_MODALITIES,
        mask=lesion_mask.astype(np.uint8),
        volume_id=volume_id or f"phantom_seed{spec.seed}",
    )
