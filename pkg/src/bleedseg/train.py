"""Training loop (batch size 1), tiled prediction with stitching, and
dataset evaluation. Every run is deterministic given its seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import ops, optim
from .data import (
    Manifest,
    read_vvol,
    sample_training_tile,
    tile_output_geometry,
)
from .errors import ConfigError, TilingError
from .metrics import MetricsReport, build_report, confusion, mean_average_precision
from .model import Model, ModelConfig, valid_tile_shapes
from .preprocess import compute_weight_map
from .volume import LabelVolume, Volume


@dataclass
class RunConfig:
    model: ModelConfig
    manifest: str
    seed: int
    steps: int
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.001
    momentum: float = 0.99
    tile: tuple[int, int, int] | None = None
    bias_prob: float = 0.5
    w0: float = 10.0
    sigma_b: float = 5.0
    checkpoint: str = "model.ckpt"
    checkpoint_every: int = 100
    loss_csv: str = "loss.csv"

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if "seed" not in doc:
            raise ConfigError(f"{path}: a seed is mandatory in run configs")
        model_cfg = ModelConfig(**doc.pop("model", {}))
        tile = doc.get("tile")
        if tile is not None:
            doc["tile"] = tuple(tile)
        return cls(model=model_cfg, **doc)


def load_pairs(manifest: Manifest, root, split: str) -> list[tuple[Volume, LabelVolume]]:
    root = Path(root)
    pairs = []
    for e in manifest.split(split):
        img = read_vvol(root / e.image)
        lab = read_vvol(root / e.label)
        lab.num_classes = manifest.num_classes
        pairs.append((img, lab))
    return pairs


def dataset_class_counts(pairs, num_classes: int) -> dict[int, int]:
    counts = np.zeros(num_classes, dtype=np.int64)
    for _, lab in pairs:
        counts += np.bincount(lab.data.ravel(), minlength=num_classes)
    return {c: int(n) for c, n in enumerate(counts)}


def train_model(
    model: Model,
    pairs: list[tuple[Volume, LabelVolume]],
    run: RunConfig,
    opt_state=None,
    start_step: int = 0,
    on_step=None,
) -> tuple[list[float], object]:
    """Run `run.steps` single-tile training steps; returns the per-step loss
    list and the final optimizer state. Deterministic per (run.seed, step)."""
    if opt_state is None:
        if run.optimizer == "adam":
            opt_state = optim.AdamState.for_model(model, run.lr)
        elif run.optimizer == "sgd":
            opt_state = optim.SgdState.for_model(model, run.lr, run.momentum)
        else:
            raise ConfigError(f"unknown optimizer {run.optimizer!r}")

    counts = dataset_class_counts(pairs, model.config.num_classes)
    weight_maps = [
        compute_weight_map(lab, counts, run.w0, run.sigma_b).data for _, lab in pairs
    ]

    losses = []
    for step in range(start_step, start_step + run.steps):
        rng = np.random.default_rng((run.seed, step))
        vol_idx = int(rng.integers(len(pairs)))
        img, lab = pairs[vol_idx]
        tile_seed = int(rng.integers(2**63))
        x, y, w = sample_training_tile(
            img, lab, weight_maps[vol_idx], model.config, tile_seed,
            tile=run.tile, bias_prob=run.bias_prob,
        )
        x = x.astype(model.config.np_dtype)
        dropout_seed = int(rng.integers(2**63))
        logits, tape = model_mod.forward(model, x, training=True, seed=dropout_seed)
        probs = ops.softmax_voxelwise(logits)
        loss, grad_logits = ops.weighted_cross_entropy(
            probs, y, w.astype(model.config.np_dtype)
        )
        grads = model_mod.backward(model, tape, grad_logits)
        if run.optimizer == "adam":
            optim.adam_step(model, grads, opt_state)
        else:
            optim.sgd_step(model, grads, opt_state)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss, opt_state)
    return losses, opt_state


def write_loss_csv(path, losses: list[float], start_step: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([start_step + i, repr(loss)])


def _tile_positions(extent: int, out: int) -> list[int]:
    """Output-region origins covering [0, extent): stride `out`, final
    position shifted inward; overlap resolved later by last-write-wins."""
    if out >= extent:
        return [0]
    pos = list(range(0, extent - out + 1, out))
    if pos[-1] != extent - out:
        pos.append(extent - out)
    return pos


def class_weight_vector(counts: dict[int, int], num_classes: int) -> np.ndarray:
    """Per-class N_total/(C_present * N_c) weights as a dense vector (1.0 for
    classes with no voxels). Matches the weight-map class-frequency term."""
    counted = {c: n for c, n in counts.items() if n > 0}
    n_total = float(sum(counted.values()))
    w = np.ones(num_classes, dtype=np.float64)
    for c, n in counted.items():
        w[c] = n_total / (len(counted) * n)
    return w


def predict_volume(
    model: Model, image: Volume, class_weights: np.ndarray | None = None
) -> tuple[LabelVolume, np.ndarray]:
    """Dense prediction of a whole volume by tiling with valid input tiles.

    The input is reflect-padded by the network margin so output regions
    cover every voxel; overlapping edge tiles resolve by last write.
    Returns the argmax labels and the (C, D, H, W) probability maps.

    A model trained on class-weighted cross-entropy produces probabilities
    skewed toward rare classes; passing the training class weights divides
    them out before the argmax (prior correction). The returned probability
    maps are always the uncorrected softmax outputs.
    """
    cfg = model.config
    tile, outs, offs = [], [], []
    for ext in image.spatial:
        valid = valid_tile_shapes(cfg, (1, max(ext + 64, 32)))
        fitting = [(s, o) for s, o in valid if o <= ext]
        if not fitting:
            raise TilingError(f"no valid tile has an output region <= extent {ext}")
        s, o = fitting[-1]
        tile.append(s)
        outs.append(o)
        offs.append((s - o) // 2)

    pad = [(off, off) for off in offs]
    padded = np.pad(image.data, [(0, 0)] + pad, mode="reflect")

    c = cfg.num_classes
    probs_full = np.zeros((c,) + image.spatial, dtype=np.float32)
    for pz in _tile_positions(image.spatial[0], outs[0]):
        for py in _tile_positions(image.spatial[1], outs[1]):
            for px in _tile_positions(image.spatial[2], outs[2]):
                x = padded[
                    :, pz : pz + tile[0], py : py + tile[1], px : px + tile[2]
                ].astype(cfg.np_dtype)
                logits, _ = model_mod.forward(model, x, training=False)
                p = ops.softmax_voxelwise(logits)
                probs_full[
                    :, pz : pz + outs[0], py : py + outs[1], px : px + outs[2]
                ] = p.astype(np.float32)
    decision = probs_full
    if class_weights is not None:
        if class_weights.shape != (c,):
            raise ConfigError(
                f"class_weights must have shape ({c},), got {class_weights.shape}"
            )
        decision = probs_full / class_weights[:, None, None, None]
    labels = decision.argmax(axis=0).astype(np.uint8)
    return LabelVolume(labels, num_classes=c), probs_full


def evaluate_pairs(
    model: Model,
    pairs: list[tuple[Volume, LabelVolume]],
    class_names: list[str] | None = None,
    class_weights: np.ndarray | None = None,
) -> MetricsReport:
    """Aggregate confusion and AP over a list of (image, truth) pairs."""
    c = model.config.num_classes
    total = np.zeros((c, c), dtype=np.int64)
    all_scores = {cls: [] for cls in range(1, c)}
    all_truth = []
    for img, truth in pairs:
        pred, probs = predict_volume(model, img, class_weights)
        total += confusion(pred, truth, c)
        for cls in range(1, c):
            all_scores[cls].append(probs[cls].ravel())
        all_truth.append(truth.data.ravel())
    truth_flat = LabelVolume(
        np.concatenate(all_truth).reshape(1, 1, -1), num_classes=c
    )
    scores = {cls: np.concatenate(chunks) for cls, chunks in all_scores.items()}
    report = build_report(total, class_names, scores, truth_flat)
    report.map_score = mean_average_precision(scores, truth_flat)
    return report


def mean_foreground_iou(model: Model, pairs) -> float:
    """Grid-search selection metric: mean foreground IoU over a split."""
    report = evaluate_pairs(model, pairs)
    return report.mean_iou
