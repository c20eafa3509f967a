"""
Multi-Modal Volume I/O and Normalization

Holds the in-memory volume model shared by every preprocessing stage,
the per-modality z-score normalization, and the `.mmv` container.

Grid layout is row-major with z fastest: `data[m, x, y, z]`.

.mmv layout:
    line 1   magic "MMV1"
    line 2   JSON header, keys in fixed order:
             dims, spacing, modalities, has_mask, dtype, volume_id
    payload  per-modality little-endian float32 grids (modality order),
             then an optional uint8 mask grid
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
VARIANCE_FLOOR = 1e-8  # keeps near-constant modalities finite

MMV_MAGIC = b"MMV1"
MMV_DTYPE_TAG = "f32le"


class DegenerateModalityError(ValueError):
    """A modality has no nonzero voxel to normalize over."""


class PayloadSizeError(ValueError):
    """Container payload length disagrees with the header dims."""


class VolumeFormatError(ValueError):
    """Container header is malformed or uses an unknown tag."""


@dataclass(frozen=True)
class MultiModalVolume:
    """
    Aligned multi-channel 3D scalar grid.

    Args:
        data: float32 array of shape (n_modalities, nx, ny, nz)
        spacing: voxel size in mm along (x, y, z)
        modalities: channel names, one per leading axis entry of `data`
        mask: optional uint8 grid of voxel class labels (0 = healthy)
        volume_id: free-form identifier carried into derived graphs
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modalities: Tuple[str, ...] = DEFAULT_MODALITIES
    mask: Optional[np.ndarray] = None
    volume_id: str = ""

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"data must be 4D (modality, x, y, z), got shape {data.shape}")

        modalities = tuple(str(m) for m in self.modalities)
        if not modalities:
            raise ValueError("modalities list is empty")
        if len(set(modalities)) != len(modalities):
            raise ValueError(f"duplicate modality names: {modalities}")
        if len(modalities) != data.shape[0]:
            raise ValueError(
                f"{len(modalities)} modality names for {data.shape[0]} channels"
            )

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 strictly positive values, got {spacing}")

        mask = self.mask
        if mask is not None:
            mask = np.ascontiguousarray(mask, dtype=np.uint8)
            if mask.shape != data.shape[1:]:
                raise ValueError(f"mask shape {mask.shape} != volume dims {data.shape[1:]}")

        object.__setattr__(self, "data", data)
        object.__setattr__(self, "modalities", modalities)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[1:])

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def channel_index(self, name: str) -> int:
        try:
            return self.modalities.index(name)
        except ValueError:
            raise ValueError(f"modality '{name}' not in {list(self.modalities)}") from None

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channel_index(name)]

    def world_extent(self) -> np.ndarray:
        """World-space size of the voxel-centre bounding box, (dims - 1) * spacing."""
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) * np.asarray(self.spacing)

    def with_data(self, data: np.ndarray) -> "MultiModalVolume":
        return replace(self, data=data)


def normalize(vol: MultiModalVolume) -> MultiModalVolume:
    """
    Z-score each modality over its nonzero voxels.

    Zero voxels stay exactly zero so background pruning downstream still
    sees the background. The variance is floored at VARIANCE_FLOOR.

    Args:
        vol: Input volume

    Returns:
        New volume with normalized data; mask and metadata untouched

    Raises:
        DegenerateModalityError: a modality is entirely zero
    """
    out = np.zeros_like(vol.data, dtype=np.float32)

    for m, name in enumerate(vol.modalities):
        grid = vol.data[m].astype(np.float64)
        nonzero = grid != 0
        if not nonzero.any():
            raise DegenerateModalityError(f"degenerate modality: '{name}' has no nonzero voxel")

        values = grid[nonzero]
        mean = values.mean()
        var = max(values.var(), VARIANCE_FLOOR)
        out[m][nonzero] = ((values - mean) / np.sqrt(var)).astype(np.float32)

    return vol.with_data(out)


def _header_dict(vol: MultiModalVolume) -> dict:
    # Insertion order is the on-disk field order.
    return {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "modalities": list(vol.modalities),
        "has_mask": vol.mask is not None,
        "dtype": MMV_DTYPE_TAG,
        "volume_id": vol.volume_id,
    }


def write_mmv(vol: MultiModalVolume, path: Union[str, Path]) -> Path:
    """
    Write a volume to an `.mmv` container.

    Args:
        vol: Volume to store
        path: Output file path

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = json.dumps(_header_dict(vol)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MMV_MAGIC + b"\n")
        f.write(header + b"\n")
        f.write(vol.data.astype("<f4").tobytes(order="C"))
        if vol.mask is not None:
            f.write(vol.mask.astype(np.uint8).tobytes(order="C"))

    return path


def read_mmv(path: Union[str, Path]) -> MultiModalVolume:
    """
    Read a volume from an `.mmv` container.

    Args:
        path: Container path

    Returns:
        The stored volume, bit-identical to what was written

    Raises:
        VolumeFormatError: bad magic, bad header, or unknown dtype tag
        PayloadSizeError: payload length does not match the header dims
    """
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != MMV_MAGIC:
            raise VolumeFormatError(f"not an MMV container (magic {magic!r})")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VolumeFormatError(f"unreadable header: {e}") from e
        payload = f.read()

    if header.get("dtype") != MMV_DTYPE_TAG:
        raise VolumeFormatError(f"unknown data type tag: {header.get('dtype')!r}")

    try:
        dims = tuple(int(d) for d in header["dims"])
        modalities = tuple(header["modalities"])
        spacing = tuple(float(s) for s in header["spacing"])
        has_mask = bool(header["has_mask"])
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"incomplete header: {e}") from e

    if len(dims) != 3 or any(d < 1 for d in dims):
        raise VolumeFormatError(f"invalid dims {dims}")

    n_voxels = int(np.prod(dims))
    data_bytes = len(modalities) * n_voxels * 4
    expected = data_bytes + (n_voxels if has_mask else 0)
    if len(payload) != expected:
        raise PayloadSizeError(
            f"payload size mismatch: expected {expected} bytes for dims {dims}, got {len(payload)}"
        )

    data = np.frombuffer(payload, dtype="<f4", count=len(modalities) * n_voxels)
    data = data.reshape((len(modalities),) + dims).astype(np.float32)
    mask = None
    if has_mask:
        mask = np.frombuffer(payload, dtype=np.uint8, offset=data_bytes).reshape(dims).copy()

    return MultiModalVolume(
        data=data,
        spacing=spacing,
        modalities=modalities,
        mask=mask,
        volume_id=str(header.get("volume_id", "")),
    )


def stack_modalities(
    grids: Sequence[np.ndarray],
    modalities: Sequence[str] = DEFAULT_MODALITIES,
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    mask: Optional[np.ndarray] = None,
    volume_id: str = "",
) -> MultiModalVolume:
    """Build a volume from one 3D grid per modality; grids must share dims."""
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"modality grids disagree on dims: {sorted(shapes)}")
    return MultiModalVolume(
        data=np.stack([np.asarray(g, dtype=np.float32) for g in grids]),
        spacing=spacing,
        modalities=tuple(modalities),
        mask=mask,
        volume_id=volume_id,
    )
