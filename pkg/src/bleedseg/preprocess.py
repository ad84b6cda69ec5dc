"""Preprocessing and augmentation: CLAHE, intensity normalization, ROI
thresholding, trilinear resizing, elastic/affine/intensity augmentation,
and per-voxel loss weight maps.

Images are resampled trilinearly; label volumes always use nearest
neighbor (class IDs are categorical). Out-of-bounds samples fill 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import LabelError, ParameterError, ShapeError
from .volume import LabelVolume, Volume


@dataclass
class ClaheParams:
    tiles_y: int = 8
    tiles_x: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_y < 1 or self.tiles_x < 1:
            raise ParameterError("tile counts must be >= 1")
        if self.clip_limit < 1.0:
            raise ParameterError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bins < 2:
            raise ParameterError(f"bins must be >= 2, got {self.bins}")


def _clahe_slice(img: np.ndarray, p: ClaheParams) -> np.ndarray:
    h, w = img.shape
    bins = p.bins
    q = np.minimum((img * bins).astype(np.int64), bins - 1)
    q = np.maximum(q, 0)

    ty = min(p.tiles_y, h)
    tx = min(p.tiles_x, w)
    ey = np.round(np.linspace(0, h, ty + 1)).astype(int)
    ex = np.round(np.linspace(0, w, tx + 1)).astype(int)
    centers_y = (ey[:-1] + ey[1:] - 1) / 2.0
    centers_x = (ex[:-1] + ex[1:] - 1) / 2.0

    lut = np.empty((ty, tx, bins), dtype=np.float64)
    for iy in range(ty):
        for ix in range(tx):
            tile = q[ey[iy] : ey[iy + 1], ex[ix] : ex[ix + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            clip_at = p.clip_limit * n / bins
            excess = np.maximum(hist - clip_at, 0.0).sum()
            hist = np.minimum(hist, clip_at) + excess / bins
            lut[iy, ix] = np.cumsum(hist) / n

    def interp_axis(coords: np.ndarray, centers: np.ndarray):
        idx = np.searchsorted(centers, coords, side="right") - 1
        lo = np.clip(idx, 0, len(centers) - 1)
        hi = np.clip(idx + 1, 0, len(centers) - 1)
        span = centers[hi] - centers[lo]
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1), 0.0)
        return lo, hi, np.clip(frac, 0.0, 1.0)

    y0, y1, wy = interp_axis(np.arange(h, dtype=np.float64), centers_y)
    x0, x1, wx = interp_axis(np.arange(w, dtype=np.float64), centers_x)
    wy = wy[:, None]
    wx = wx[None, :]
    out = (
        (1 - wy) * (1 - wx) * lut[y0[:, None], x0[None, :], q]
        + (1 - wy) * wx * lut[y0[:, None], x1[None, :], q]
        + wy * (1 - wx) * lut[y1[:, None], x0[None, :], q]
        + wy * wx * lut[y1[:, None], x1[None, :], q]
    )
    return out


def clahe_volume(v: Volume, p: ClaheParams | None = None) -> Volume:
    """Contrast-limited adaptive histogram equalization, applied
    independently to every axial slice. Input values must lie in [0, 1]."""
    if v.channels != 1:
        raise ShapeError(f"CLAHE expects a single channel, got {v.channels}")
    p = p or ClaheParams()
    out = np.empty_like(v.data)
    for z in range(v.data.shape[1]):
        out[0, z] = _clahe_slice(v.data[0, z], p).astype(v.data.dtype)
    return Volume(out, v.spacing)


def normalize_intensity(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp to [lo, hi], then map affinely to [0, 1]. A volume that is
    constant after clamping maps to all zeros."""
    if lo >= hi:
        raise ParameterError(f"need lo < hi, got {lo} >= {hi}")
    clamped = np.clip(v.data, lo, hi)
    if clamped.max() == clamped.min():
        return Volume(np.zeros_like(v.data), v.spacing)
    out = (clamped - lo) / (hi - lo)
    return Volume(out.astype(v.data.dtype), v.spacing)


def threshold_roi(v: Volume, lo: float, hi: float) -> LabelVolume:
    """Binary mask: 1 where lo <= value <= hi (channel 0)."""
    if lo > hi:
        raise ParameterError(f"need lo <= hi, got {lo} > {hi}")
    mask = ((v.data[0] >= lo) & (v.data[0] <= hi)).astype(np.uint8)
    return LabelVolume(mask, num_classes=2)


def apply_mask(v: Volume, mask: LabelVolume) -> Volume:
    if v.spatial != mask.spatial:
        raise ShapeError(f"mask extents {mask.spatial} vs volume {v.spatial}")
    return Volume(v.data * (mask.data > 0)[None].astype(v.data.dtype), v.spacing)


def _corner_aligned_coords(src: tuple, dst: tuple) -> list[np.ndarray]:
    axes = []
    for s, d in zip(src, dst):
        if d == 1:
            axes.append(np.zeros(1))
        else:
            axes.append(np.linspace(0.0, s - 1.0, d))
    return axes


def resize_volume(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Corner-aligned trilinear resampling; same-size resize is the identity."""
    if any(t < 1 for t in target):
        raise ShapeError(f"target extents must be >= 1, got {target}")
    if tuple(target) == v.spatial:
        return v.copy()
    axes = _corner_aligned_coords(v.spatial, target)
    coords = np.meshgrid(*axes, indexing="ij")
    out = np.stack(
        [
            ndimage.map_coordinates(v.data[c], coords, order=1, mode="constant", cval=0.0)
            for c in range(v.channels)
        ]
    )
    return Volume(out.astype(v.data.dtype), v.spacing)


@dataclass
class DeformField:
    """3x3x3 control grid of (dz, dy, dx) displacement vectors (voxels)."""

    control: np.ndarray  # (3, 3, 3, 3)
    sigma: float
    seed: int

    @classmethod
    def random(cls, sigma: float, seed: int) -> "DeformField":
        if sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {sigma}")
        rng = np.random.default_rng(seed)
        control = rng.normal(0.0, sigma, size=(3, 3, 3, 3))
        return cls(control, sigma, seed)


def _dense_displacement(field: DeformField, spatial: tuple) -> np.ndarray:
    """Trilinearly interpolate the control grid over the full extent."""
    disp = np.empty((3,) + tuple(spatial))
    axes = []
    for s in spatial:
        # map voxel positions onto control-grid coordinates 0..2
        axes.append(np.zeros(s) if s == 1 else np.linspace(0.0, 2.0, s))
    coords = np.meshgrid(*axes, indexing="ij")
    for comp in range(3):
        disp[comp] = ndimage.map_coordinates(
            field.control[..., comp], coords, order=1, mode="nearest"
        )
    return disp


def _warp(
    v: Volume, labels: LabelVolume | None, coords: list[np.ndarray]
) -> tuple[Volume, LabelVolume | None]:
    img = np.stack(
        [
            ndimage.map_coordinates(v.data[c], coords, order=1, mode="constant", cval=0.0)
            for c in range(v.channels)
        ]
    ).astype(v.data.dtype)
    out_labels = None
    if labels is not None:
        lab = ndimage.map_coordinates(
            labels.data, coords, order=0, mode="constant", cval=0
        ).astype(np.uint8)
        out_labels = LabelVolume(lab, labels.num_classes)
    return Volume(img, v.spacing), out_labels


def elastic_deform(
    v: Volume, labels: LabelVolume | None, field: DeformField
) -> tuple[Volume, LabelVolume | None]:
    """Warp by a dense displacement interpolated from the control grid.
    Output voxel x takes the value at x + d(x); out-of-bounds reads 0."""
    if labels is not None and labels.spatial != v.spatial:
        raise ShapeError(f"label extents {labels.spatial} vs volume {v.spatial}")
    if not field.control.any():
        return v.copy(), labels.copy() if labels is not None else None
    disp = _dense_displacement(field, v.spatial)
    base = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in v.spatial], indexing="ij")
    coords = [base[i] + disp[i] for i in range(3)]
    return _warp(v, labels, coords)


def rotate_z(
    v: Volume, labels: LabelVolume | None, angle_deg: float,
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[Volume, LabelVolume | None]:
    """Rotate about the z axis around the spatial center, then shift."""
    if angle_deg == 0.0 and not any(shift):
        return v.copy(), labels.copy() if labels is not None else None
    d, h, w = v.spatial
    cz, cy, cx = (d - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0
    a = np.deg2rad(angle_deg)
    cos_a, sin_a = np.cos(a), np.sin(a)
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    yc, xc = yy - cy, xx - cx
    src_y = cos_a * yc - sin_a * xc + cy - shift[1]
    src_x = sin_a * yc + cos_a * xc + cx - shift[2]
    src_z = zz - shift[0]
    return _warp(v, labels, [src_z, src_y, src_x])


def random_affine(
    v: Volume, labels: LabelVolume | None, seed: int,
    max_shift: float = 0.0, max_rotate: float = 0.0,
) -> tuple[Volume, LabelVolume | None]:
    """Random z-axis rotation (degrees) plus per-axis shift (voxels)."""
    if max_shift < 0 or max_rotate < 0:
        raise ParameterError("ranges must be >= 0")
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-max_rotate, max_rotate)
    shift = tuple(rng.uniform(-max_shift, max_shift, size=3))
    return rotate_z(v, labels, angle, shift)


def intensity_jitter(
    v: Volume, seed: int,
    scale_range: tuple[float, float] = (1.0, 1.0),
    offset_range: tuple[float, float] = (0.0, 0.0),
) -> Volume:
    """v' = clip(a*v + b, 0, 1) with a, b drawn uniformly from the ranges."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(*scale_range)
    b = rng.uniform(*offset_range)
    if a == 1.0 and b == 0.0:
        return v.copy()
    out = np.clip(a * v.data + b, 0.0, 1.0)
    return Volume(out.astype(v.data.dtype), v.spacing)


@dataclass
class WeightMap:
    """Per-voxel loss weights: class-frequency balancing plus a border
    bonus between nearby distinct foreground components."""

    data: np.ndarray  # (D, H, W), positive
    w0: float
    sigma_b: float


def compute_weight_map(
    labels: LabelVolume, class_counts: dict[int, int],
    w0: float = 10.0, sigma_b: float = 5.0,
) -> WeightMap:
    """w(x) = N_total/(C_present * N_label(x)) + w0*exp(-d(x)^2/(2*sigma_b^2)),
    where d is the summed distance to the two nearest distinct foreground
    components. The border term is 0 with fewer than two components."""
    present = sorted(int(c) for c in np.unique(labels.data))
    for c in present:
        if class_counts.get(c, 0) <= 0:
            raise LabelError(f"class {c} present in labels but has no positive count")
    counted = {c: n for c, n in class_counts.items() if n > 0}
    n_total = float(sum(counted.values()))
    c_present = len(counted)
    class_w = np.zeros(max(counted) + 1, dtype=np.float64)
    for c, n in counted.items():
        class_w[c] = n_total / (c_present * n)
    w = class_w[labels.data.astype(np.int64)]

    fg = labels.data > 0
    comps, ncomp = ndimage.label(fg)
    if ncomp >= 2:
        dists = np.stack(
            [ndimage.distance_transform_edt(comps != i) for i in range(1, ncomp + 1)]
        )
        dists.sort(axis=0)
        d = dists[0] + dists[1]
        w = w + w0 * np.exp(-(d**2) / (2.0 * sigma_b**2))
    return WeightMap(w, w0, sigma_b)


def apply_pipeline(
    image: Volume, labels: LabelVolume | None, steps: list[dict], seed: int
) -> tuple[Volume, LabelVolume | None]:
    """Replay a declarative list of preprocessing steps. Each step is a dict
    with an "op" key; random steps derive their seed from (seed, index)."""
    for i, step in enumerate(steps):
        op = step.get("op")
        step_seed = int(np.random.default_rng((seed, i)).integers(2**63))
        if op == "clahe":
            image = clahe_volume(
                image,
                ClaheParams(
                    tiles_y=step.get("tiles_y", 8),
                    tiles_x=step.get("tiles_x", 8),
                    clip_limit=step.get("clip_limit", 2.0),
                    bins=step.get("bins", 256),
                ),
            )
        elif op == "normalize":
            image = normalize_intensity(image, step["lo"], step["hi"])
        elif op == "mask":
            mask = threshold_roi(image, step["lo"], step["hi"])
            image = apply_mask(image, mask)
        elif op == "resize":
            target = tuple(step["target"])
            image = resize_volume(image, target)
            if labels is not None:
                coords = np.meshgrid(
                    *_corner_aligned_coords(labels.spatial, target), indexing="ij"
                )
                lab = ndimage.map_coordinates(
                    labels.data, coords, order=0, mode="constant", cval=0
                ).astype(np.uint8)
                labels = LabelVolume(lab, labels.num_classes)
        elif op == "elastic":
            field = DeformField.random(step.get("sigma", 2.0), step_seed)
            image, labels = elastic_deform(image, labels, field)
        elif op == "affine":
            image, labels = random_affine(
                image, labels, step_seed,
                max_shift=step.get("max_shift", 0.0),
                max_rotate=step.get("max_rotate", 0.0),
            )
        elif op == "jitter":
            image = intensity_jitter(
                image, step_seed,
                scale_range=tuple(step.get("scale_range", (1.0, 1.0))),
                offset_range=tuple(step.get("offset_range", (0.0, 0.0))),
            )
        else:
            raise ParameterError(f"unknown pipeline op {op!r}")
    return image, labels
