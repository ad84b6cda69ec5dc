"""Synthetic CT-like phantoms: an ellipsoidal skull shell, a mid-intensity
brain interior, and per-class lesions with distinguishable geometry and
intensity bands. Generation is deterministic per spec (seed included).

Lesion intensity bands are separated by gaps comparable to the additive
noise scale, so borders stay ambiguous voxel-by-voxel while the task
remains learnable at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PlacementError
from .volume import LabelVolume, Volume

SHELL_FRAC = 0.10  # skull shell thickness as a fraction of the head radius


@dataclass
class LesionRecipe:
    kind: str  # blob | lens | crescent | sheet | speckle
    intensity: tuple[float, float]
    count: tuple[int, int] = (1, 2)
    size: tuple[float, float] = (4.0, 6.0)


DEFAULT_RECIPES: dict[int, LesionRecipe] = {
    1: LesionRecipe("blob", (0.44, 0.50), (1, 2), (4.5, 6.5)),
    2: LesionRecipe("lens", (0.55, 0.61), (1, 2), (6.5, 8.5)),
    3: LesionRecipe("crescent", (0.66, 0.72), (1, 1), (5.5, 7.5)),
    4: LesionRecipe("sheet", (0.77, 0.83), (1, 2), (5.0, 7.0)),
    5: LesionRecipe("speckle", (0.51, 0.55), (1, 1), (4.0, 6.0)),
    6: LesionRecipe("blob", (0.84, 0.87), (1, 1), (3.0, 5.0)),
}


@dataclass
class PhantomSpec:
    extents: tuple[int, int, int] = (60, 60, 60)
    recipes: dict[int, LesionRecipe] = field(
        default_factory=lambda: {c: DEFAULT_RECIPES[c] for c in (1, 2, 3, 4)}
    )
    brain_intensity: tuple[float, float] = (0.30, 0.38)
    skull_intensity: tuple[float, float] = (0.88, 1.0)
    noise: float = 0.015
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return (max(self.recipes) if self.recipes else 0) + 1


def _sphere_mask(zz, yy, xx, center, radius) -> np.ndarray:
    return (
        (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    ) <= radius**2


def _lesion_mask(kind, rng, rho, zz, yy, xx, center, size, brain_limit) -> np.ndarray:
    if kind == "blob":
        return _sphere_mask(zz, yy, xx, center, size)
    if kind == "lens":
        # cap near the inner skull surface
        return _sphere_mask(zz, yy, xx, center, size) & (rho <= brain_limit)
    if kind == "crescent":
        # curved patch hugging a shell band under the skull
        band = (rho >= brain_limit - 0.20) & (rho <= brain_limit - 0.01)
        return _sphere_mask(zz, yy, xx, center, 2.2 * size) & band
    if kind == "sheet":
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        dist = n[0] * (zz - center[0]) + n[1] * (yy - center[1]) + n[2] * (xx - center[2])
        return (np.abs(dist) <= 1.6) & _sphere_mask(zz, yy, xx, center, 1.3 * size)
    if kind == "speckle":
        mask = np.zeros(rho.shape, dtype=bool)
        for _ in range(int(rng.integers(6, 12))):
            off = rng.uniform(-1.5 * size, 1.5 * size, size=3)
            mask |= _sphere_mask(
                zz, yy, xx, (center[0] + off[0], center[1] + off[1], center[2] + off[2]),
                float(rng.uniform(1.2, 2.2)),
            )
        return mask
    raise PlacementError(f"unknown lesion kind {kind!r}")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.extents
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    center = ((d - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0)
    radii = (0.45 * (d - 1), 0.45 * (h - 1), 0.45 * (w - 1))
    rho = np.sqrt(
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    brain_limit = 1.0 - SHELL_FRAC

    image = np.zeros(spec.extents, dtype=np.float64)
    skull = (rho > brain_limit) & (rho <= 1.0)
    brain = rho <= brain_limit
    image[brain] = rng.uniform(*spec.brain_intensity, size=int(brain.sum()))
    image[skull] = rng.uniform(*spec.skull_intensity, size=int(skull.sum()))

    labels = np.zeros(spec.extents, dtype=np.uint8)
    min_radius = min(radii)
    interior = rho <= brain_limit - 0.08

    # shrink lesions on small heads so crowding stays comparable
    size_scale = min(1.0, min_radius / 26.0)
    for class_id in sorted(spec.recipes):
        recipe = spec.recipes[class_id]
        n_lesions = int(rng.integers(recipe.count[0], recipe.count[1] + 1))
        for _ in range(n_lesions):
            placed = False
            for _ in range(100):
                size = float(rng.uniform(*recipe.size)) * size_scale
                if recipe.kind == "lens":
                    # deeper centers give fatter caps against the shell
                    region = (rho >= brain_limit - 0.18) & (rho <= brain_limit - 0.08)
                elif recipe.kind == "crescent":
                    region = (rho >= brain_limit - 0.14) & (rho <= brain_limit - 0.04)
                else:
                    margin = min(size / min_radius + 0.02, 0.5)
                    region = rho <= brain_limit - 0.08 - margin
                cand = np.argwhere(region)
                if len(cand) == 0:
                    continue
                c = cand[int(rng.integers(len(cand)))]
                mask = _lesion_mask(
                    recipe.kind, rng, rho, zz, yy, xx, tuple(c.astype(float)),
                    size, brain_limit,
                )
                mask &= brain
                if recipe.kind not in ("lens", "crescent"):
                    mask &= interior
                if mask.sum() < 20:
                    continue
                if (labels[mask] != 0).any():
                    continue
                labels[mask] = class_id
                image[mask] = rng.uniform(*recipe.intensity, size=int(mask.sum()))
                placed = True
                break
            if not placed:
                raise PlacementError(
                    f"could not place a {recipe.kind} lesion for class {class_id} "
                    f"within extents {spec.extents}"
                )

    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return (
        Volume(image[None].astype(np.float32)),
        LabelVolume(labels, num_classes=spec.num_classes),
    )
