"""Volume file format (VVOL), dataset manifests, and training-tile sampling.

VVOL layout, all integers little-endian:
  magic "VVOL" | version u32 | dtype u32 (0 = float32 LE, 1 = uint8)
  | channels, depth, height, width u32 | spacing 3 x float32 LE
  | raw C-order payload
Header is exactly 40 bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, TilingError
from .model import ModelConfig, valid_tile_shapes
from .volume import LabelVolume, Volume

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
_HEADER = struct.Struct("<4sII4I3f")


def write_vvol(path, v: Volume | LabelVolume) -> None:
    """Write a float32 Volume or a uint8 LabelVolume; round-trips bitwise."""
    path = Path(path)
    if isinstance(v, Volume):
        if v.data.dtype != np.float32:
            raise FormatError(
                f"VVOL stores float32; cast the {v.data.dtype} volume first"
            )
        dtype_code, payload = 0, v.data.astype("<f4", copy=False)
        c, d, h, w = v.data.shape
        spacing = v.spacing
    elif isinstance(v, LabelVolume):
        dtype_code, payload = 1, v.data
        c, (d, h, w) = 1, v.data.shape
        spacing = (1.0, 1.0, 1.0)
    else:
        raise FormatError(f"cannot write {type(v)} as VVOL")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VVOL_MAGIC, VVOL_VERSION, dtype_code, c, d, h, w, *spacing))
        f.write(payload.tobytes())


def read_vvol(path) -> Volume | LabelVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 40-byte header")
    magic, version, dtype_code, c, d, h, w, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != VVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = c * d * h * w
    body = raw[_HEADER.size :]
    if dtype_code == 0:
        if len(body) < 4 * n:
            raise FormatError(f"{path}: truncated payload ({len(body)} < {4 * n} bytes)")
        data = np.frombuffer(body[: 4 * n], dtype="<f4").astype(np.float32)
        return Volume(data.reshape(c, d, h, w), (sz, sy, sx))
    if dtype_code == 1:
        if c != 1:
            raise FormatError(f"{path}: uint8 payload must be single-channel, got {c}")
        if len(body) < n:
            raise FormatError(f"{path}: truncated payload ({len(body)} < {n} bytes)")
        data = np.frombuffer(body[:n], dtype=np.uint8)
        arr = data.reshape(d, h, w)
        return LabelVolume(arr.copy(), num_classes=int(arr.max()) + 1 if arr.size else 1)
    raise FormatError(f"{path}: unknown dtype code {dtype_code}")


@dataclass
class ManifestEntry:
    image: str
    label: str
    split: str  # train | val | test


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    num_classes: int = 2
    class_names: list[str] = field(default_factory=list)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def save(self, path) -> None:
        doc = {
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "entries": [
                {"image": e.image, "label": e.label, "split": e.split}
                for e in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid manifest JSON: {e}") from e
        return cls(
            entries=[ManifestEntry(**e) for e in doc["entries"]],
            num_classes=int(doc["num_classes"]),
            class_names=list(doc.get("class_names", [])),
        )

    def validate_files(self, root) -> None:
        root = Path(root)
        for e in self.entries:
            img_p, lab_p = root / e.image, root / e.label
            if not img_p.exists() or not lab_p.exists():
                raise FormatError(f"manifest references missing files: {e.image}, {e.label}")
            img, lab = read_vvol(img_p), read_vvol(lab_p)
            if img.spatial != lab.spatial:
                raise FormatError(
                    f"{e.image} extents {img.spatial} disagree with {e.label} {lab.spatial}"
                )


def largest_valid_tile(config: ModelConfig, spatial: tuple[int, int, int]) -> tuple[int, ...]:
    """Largest valid input extent per axis that fits inside the volume."""
    tile = []
    for ext in spatial:
        valid = valid_tile_shapes(config, (1, ext))
        if not valid:
            raise TilingError(f"no valid tile fits in extent {ext}")
        tile.append(valid[-1][0])
    return tuple(tile)


def tile_output_geometry(
    config: ModelConfig, tile: tuple[int, ...]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(output extents, per-axis offset of the output region inside the tile)."""
    outs, offs = [], []
    for ext in tile:
        match = [o for s, o in valid_tile_shapes(config, (ext, ext)) if s == ext]
        if not match:
            raise TilingError(f"{ext} is not a valid tile extent")
        outs.append(match[0])
        offs.append((ext - match[0]) // 2)
    return tuple(outs), tuple(offs)


def sample_training_tile(
    image: Volume,
    labels: LabelVolume,
    weights: np.ndarray,
    config: ModelConfig,
    seed: int,
    tile: tuple[int, int, int] | None = None,
    bias_prob: float = 0.5,
    max_tries: int = 20,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random valid-extent training tile plus the aligned label/weight tiles
    covering exactly the network's output region.

    With probability bias_prob the tile is resampled (up to max_tries) until
    its label region contains at least one foreground voxel.
    """
    if image.spatial != labels.spatial or weights.shape != labels.spatial:
        raise ShapeError("image, labels, and weights must share extents")
    if tile is None:
        tile = largest_valid_tile(config, image.spatial)
    if any(t > s for t, s in zip(tile, image.spatial)):
        raise TilingError(f"tile {tile} does not fit in volume {image.spatial}")
    outs, offs = tile_output_geometry(config, tile)

    rng = np.random.default_rng(seed)
    want_fg = bias_prob > 0 and rng.random() < bias_prob

    def draw():
        return tuple(
            int(rng.integers(0, s - t + 1)) for s, t in zip(image.spatial, tile)
        )

    origin = draw()
    if want_fg:
        for _ in range(max_tries):
            lab = _label_region(labels, origin, offs, outs)
            if (lab > 0).any():
                break
            origin = draw()

    lab = _label_region(labels, origin, offs, outs)
    x = image.data[
        :,
        origin[0] : origin[0] + tile[0],
        origin[1] : origin[1] + tile[1],
        origin[2] : origin[2] + tile[2],
    ]
    w = weights[
        origin[0] + offs[0] : origin[0] + offs[0] + outs[0],
        origin[1] + offs[1] : origin[1] + offs[1] + outs[1],
        origin[2] + offs[2] : origin[2] + offs[2] + outs[2],
    ]
    return x.copy(), lab.copy(), w.copy()


def _label_region(labels: LabelVolume, origin, offs, outs) -> np.ndarray:
    return labels.data[
        origin[0] + offs[0] : origin[0] + offs[0] + outs[0],
        origin[1] + offs[1] : origin[1] + offs[1] + outs[1],
        origin[2] + offs[2] : origin[2] + offs[2] + outs[2],
    ]
