"""Volume and label-mask containers plus resampling between voxel grids.

A volume is a channel-first float32 array with a physical voxel spacing in
millimetres; a label mask is an integer array over the classes
{0: background, 1: GTVp, 2: GTVn}. Resampling maps voxel centers between
grids: the physical position of index ``i`` is ``(i + 0.5) * spacing``,
and coordinates are clamped to the valid input domain at the borders.
Output grids use ``ceil(dim_in * spacing_in / spacing_out)`` voxels per
axis so the input field of view is fully covered.
"""

from dataclasses import dataclass, field

import numpy as np

from ._kernels import trilinear_core

Spacing = tuple[float, float, float]

LABELS = (0, 1, 2)


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    """Multi-channel scalar grid, shape (C, X, Y, Z), float32."""

    data: np.ndarray
    spacing: Spacing
    intensity_kind: str = "continuous"  # or "binary"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be (C, X, Y, Z), got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        if self.intensity_kind not in ("continuous", "binary"):
            raise ValueError(f"unknown intensity_kind {self.intensity_kind!r}")
        if self.intensity_kind == "binary" and not np.isin(self.data, (0.0, 1.0)).all():
            raise ValueError("binary volume contains values outside {0, 1}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class LabelMask:
    """Integer class grid, shape (X, Y, Z), labels in {0, 1, 2}."""

    labels: np.ndarray
    spacing: Spacing = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("mask labels must be integers")
        self.labels = self.labels.astype(np.uint8, copy=False)
        if self.labels.ndim != 3:
            raise ValueError(f"mask must be (X, Y, Z), got shape {self.labels.shape}")
        if self.labels.max(initial=0) > max(LABELS):
            raise ValueError("mask contains labels outside {0, 1, 2}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


def _output_dims(dims, spacing_in, spacing_out) -> tuple[int, int, int]:
    return tuple(
        int(np.ceil(d * si / so - 1e-9))
        for d, si, so in zip(dims, spacing_in, spacing_out)
    )


def _center_coords(n_out: int, spacing_out: float, spacing_in: float) -> np.ndarray:
    # physical position of output voxel centers, expressed in input voxel units
    phys = (np.arange(n_out, dtype=np.float64) + 0.5) * spacing_out
    return phys / spacing_in - 0.5


def resample_linear(vol: Volume3D, target_spacing) -> Volume3D:
    """Trilinear resample of a volume onto a new voxel spacing."""
    target = _check_spacing(target_spacing)
    if target == vol.spacing:
        return Volume3D(vol.data.copy(), vol.spacing, vol.intensity_kind)
    out_dims = _output_dims(vol.dims, vol.spacing, target)
    coords = [
        np.clip(_center_coords(n, so, si), 0.0, d - 1.0)
        for n, so, si, d in zip(out_dims, target, vol.spacing, vol.dims)
    ]
    out = np.empty((vol.channels, *out_dims), dtype=np.float32)
    for c in range(vol.channels):
        out[c] = trilinear_core(vol.data[c], *coords)
    # interpolation produces fractional values, so the result is continuous
    return Volume3D(out, target, "continuous")


def _nearest_indices(n_out: int, spacing_out: float, n_in: int, spacing_in: float) -> np.ndarray:
    coords = _center_coords(n_out, spacing_out, spacing_in)
    # nearest input center; exact ties go to the lower index
    idx = np.ceil(coords - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_nearest(mask: LabelMask, target_spacing) -> LabelMask:
    """Nearest-neighbor resample of a label mask onto a new voxel spacing."""
    target = _check_spacing(target_spacing)
    if target == mask.spacing:
        return LabelMask(mask.labels.copy(), mask.spacing)
    out_dims = _output_dims(mask.dims, mask.spacing, target)
    ix, iy, iz = (
        _nearest_indices(n, so, d, si)
        for n, so, si, d in zip(out_dims, target, mask.spacing, mask.dims)
    )
    return LabelMask(mask.labels[np.ix_(ix, iy, iz)], target)


def restore_resolution(mask: LabelMask, reference: Volume3D) -> LabelMask:
    """Map a working-grid mask back onto the grid of ``reference``.

    The output has exactly the reference dims; each reference voxel takes
    the label of the nearest mask voxel center in physical coordinates.
    """
    ix, iy, iz = (
        _nearest_indices(n, so, d, si)
        for n, so, si, d in zip(reference.dims, reference.spacing, mask.spacing, mask.dims)
    )
    return LabelMask(mask.labels[np.ix_(ix, iy, iz)], reference.spacing)
