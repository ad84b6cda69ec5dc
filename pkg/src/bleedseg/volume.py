"""Dense volumetric containers and shape algebra.

A Volume is a channel-major (C, D, H, W) scalar grid stored C-contiguous,
so the flat layout is channel, then depth, row, column. A LabelVolume is a
single-channel (D, H, W) grid of uint8 class IDs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import LabelError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Shape(NamedTuple):
    channels: int
    depth: int
    height: int
    width: int

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    @property
    def num_elements(self) -> int:
        return self.channels * self.depth * self.height * self.width


def _check_shape(shape: Shape) -> Shape:
    shape = Shape(*shape)
    if any(int(e) < 1 for e in shape):
        raise ShapeError(f"all extents must be >= 1, got {tuple(shape)}")
    return shape


def crop_center_array(data: np.ndarray, spatial: tuple[int, int, int]) -> np.ndarray:
    """Centered spatial crop of a (C, D, H, W) array; channels untouched.

    Odd margins keep the lower half: offset = floor((src - dst) / 2).
    """
    src = data.shape[1:]
    if any(t > s for t, s in zip(spatial, src)):
        raise ShapeError(f"crop target {spatial} exceeds source {src}")
    if any(t < 1 for t in spatial):
        raise ShapeError(f"crop target {spatial} has empty extent")
    off = [(s - t) // 2 for s, t in zip(src, spatial)]
    return data[
        :,
        off[0] : off[0] + spatial[0],
        off[1] : off[1] + spatial[1],
        off[2] : off[2] + spatial[2],
    ]


def pad_to_center_array(data: np.ndarray, spatial: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of crop_center_array: zero-pad back to the source extents."""
    src = data.shape[1:]
    if any(t < s for t, s in zip(spatial, src)):
        raise ShapeError(f"pad target {spatial} smaller than source {src}")
    off = [(t - s) // 2 for s, t in zip(src, spatial)]
    out = np.zeros((data.shape[0],) + tuple(spatial), dtype=data.dtype)
    out[
        :,
        off[0] : off[0] + src[0],
        off[1] : off[1] + src[1],
        off[2] : off[2] + src[2],
    ] = data
    return out


@dataclass
class Volume:
    """Multi-channel 3D scalar grid, C-order (channel, depth, row, column)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"Volume data must be 4-D (C,D,H,W), got {self.data.ndim}-D")
        if self.data.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"Volume dtype must be float32/float64, got {self.data.dtype}")
        _check_shape(Shape(*self.data.shape))

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def astype(self, dtype) -> "Volume":
        return Volume(self.data.astype(dtype), self.spacing)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


@dataclass
class LabelVolume:
    """Single-channel grid of uint8 class IDs in 0..num_classes-1."""

    data: np.ndarray
    num_classes: int = field(default=2)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ShapeError(f"LabelVolume data must be 3-D (D,H,W), got {self.data.ndim}-D")
        _check_shape(Shape(1, *self.data.shape))
        if self.data.size and int(self.data.max()) >= self.num_classes:
            raise LabelError(
                f"label {int(self.data.max())} >= declared class count {self.num_classes}"
            )

    @property
    def shape(self) -> Shape:
        return Shape(1, *self.data.shape)

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "LabelVolume":
        return LabelVolume(self.data.copy(), self.num_classes)


def create(shape: Shape, fill: float = 0.0, dtype=np.float32) -> Volume:
    """Constant-filled Volume of the given shape."""
    shape = _check_shape(shape)
    return Volume(np.full(tuple(shape), fill, dtype=dtype))


def crop_center(v: Volume, spatial: tuple[int, int, int]) -> Volume:
    return Volume(crop_center_array(v.data, spatial).copy(), v.spacing)


def concat_channels(a: Volume, b: Volume) -> Volume:
    """Stack b's channels after a's; spatial extents and dtype must agree."""
    if a.spatial != b.spatial:
        raise ShapeError(f"spatial mismatch {a.spatial} vs {b.spatial}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    return Volume(np.concatenate([a.data, b.data], axis=0), a.spacing)
