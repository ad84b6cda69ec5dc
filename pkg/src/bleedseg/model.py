"""U-shaped encoder/decoder network: construction, tiling arithmetic,
forward/backward orchestration, and checkpoint I/O.

The architecture is a contracting path (two valid convs + ReLU per level,
then max pooling that doubles the channel count), a two-conv bottleneck
with optional dropout, an expansive path (transposed conv that halves the
channels, concatenation with the center-cropped encoder map, two convs),
and a final 1x1x1 conv producing class logits.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError, StateError, TilingError
from .ops import ConvKernel
from .volume import crop_center_array, pad_to_center_array

CHECKPOINT_MAGIC = b"VUNT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 8
    base_channels: int = 64
    depth: int = 4
    conv_kernel: int = 3
    pool_kernel: int = 2
    dropout_p: float = 0.3
    dtype: str = "float32"
    # literal (sqrt 2)/N init instead of He sqrt(2/N), for comparison runs
    init_literal: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError(f"depth/base_channels/in_channels must be >= 1: {self}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv_kernel < 1 or self.pool_kernel < 1:
            raise ConfigError("kernel extents must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, ConvKernel]  # insertion order is the canonical block order


@dataclass
class Tape:
    """Activation record owned by the caller; consumed by backward()."""

    model: Model
    conv_io: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    pool_indices: list[ops.PoolIndices] = field(default_factory=list)
    skip_shapes: list[tuple[int, int, int]] = field(default_factory=list)
    dropout_mask: ops.DropoutMask | None = None
    input_shape: tuple[int, ...] = ()


def layer_plan(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """Ordered (name, c_in, c_out, kernel_extent) for every weighted layer."""
    k, p, base = config.conv_kernel, config.pool_kernel, config.base_channels
    plan = []
    c_in = config.in_channels
    for lvl in range(config.depth):
        c_out = base * 2**lvl
        plan.append((f"enc{lvl}_conv1", c_in, c_out, k))
        plan.append((f"enc{lvl}_conv2", c_out, c_out, k))
        c_in = c_out
    c_bot = base * 2**config.depth
    plan.append(("bottleneck_conv1", c_in, c_bot, k))
    plan.append(("bottleneck_conv2", c_bot, c_bot, k))
    c_in = c_bot
    for lvl in reversed(range(config.depth)):
        c_out = base * 2**lvl
        plan.append((f"dec{lvl}_up", c_in, c_out, p))
        plan.append((f"dec{lvl}_conv1", 2 * c_out, c_out, k))
        plan.append((f"dec{lvl}_conv2", c_out, c_out, k))
        c_in = c_out
    plan.append(("final", c_in, config.num_classes, 1))
    return plan


def build(config: ModelConfig, seed: int) -> Model:
    """Materialize parameters: weights ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    params: dict[str, ConvKernel] = {}
    for name, c_in, c_out, k in layer_plan(config):
        fan_in = c_in * k**3
        sigma = np.sqrt(2.0) / fan_in if config.init_literal else np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, sigma, size=(c_out, c_in, k, k, k)).astype(dtype)
        b = np.zeros(c_out, dtype=dtype)
        params[name] = ConvKernel(w, b)
    return Model(config, params)


def num_weighted_layers(model: Model) -> int:
    return len(model.params)


def parameter_count(model: Model) -> int:
    return sum(k.weights.size + k.bias.size for k in model.params.values())


def _propagate_axis(config: ModelConfig, extent: int) -> int | None:
    """Per-axis extent through the whole network, or None if invalid."""
    k, p = config.conv_kernel, config.pool_kernel
    shrink = 2 * (k - 1)
    s = extent
    skips = []
    for _ in range(config.depth):
        s -= shrink
        if s < 1:
            return None
        skips.append(s)
        if s % p:
            return None
        s //= p
        if s < k:
            return None
    s -= shrink
    if s < 1:
        return None
    for lvl in reversed(range(config.depth)):
        s *= p
        if skips[lvl] < s:
            return None
        if s < k:
            return None
        s -= shrink
        if s < 1:
            return None
    return s


def output_extent(config: ModelConfig, extent: int) -> int | None:
    return _propagate_axis(config, extent)


def valid_tile_shapes(
    config: ModelConfig, axis_range: tuple[int, int]
) -> list[tuple[int, int]]:
    """All (input_extent, output_extent) pairs in [lo, hi] for which every
    pooled extent divides evenly and every intermediate extent is usable."""
    lo, hi = axis_range
    out = []
    for s in range(max(lo, 1), hi + 1):
        o = _propagate_axis(config, s)
        if o is not None:
            out.append((s, o))
    return out


def _nearest_valid(config: ModelConfig, extent: int) -> tuple[int | None, int | None]:
    below = None
    for s in range(extent - 1, 0, -1):
        if _propagate_axis(config, s) is not None:
            below = s
            break
    above = None
    for s in range(extent + 1, extent + 4 * config.pool_kernel**config.depth
                   + 8 * config.conv_kernel * (config.depth + 1) + 2):
        if _propagate_axis(config, s) is not None:
            above = s
            break
    return below, above


def check_tile_shape(config: ModelConfig, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
    """Output extents for the given input extents, or TilingError naming the
    nearest valid extents per offending axis."""
    outs = []
    for axis, s in zip("zyx", spatial):
        o = _propagate_axis(config, s)
        if o is None:
            below, above = _nearest_valid(config, s)
            raise TilingError(
                f"input extent {s} on axis {axis} is not a valid tile size "
                f"(nearest valid: {below} below, {above} above)"
            )
        outs.append(o)
    return tuple(outs)


def _conv_relu_forward(tape: Tape, name: str, x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    pre = ops.conv3d_forward(x, kernel)
    tape.conv_io[name] = (x, pre)
    return ops.relu_forward(pre)


def forward(
    model: Model, x: np.ndarray, training: bool = False, seed: int = 0
) -> tuple[np.ndarray, Tape]:
    """Full forward pass; returns logits and the tape backward() consumes."""
    cfg = model.config
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(
            f"expected ({cfg.in_channels},D,H,W) input, got {x.shape}"
        )
    check_tile_shape(cfg, x.shape[1:])
    x = np.ascontiguousarray(x, dtype=cfg.np_dtype)

    tape = Tape(model=model, input_shape=x.shape)
    p = model.params
    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = _conv_relu_forward(tape, f"enc{lvl}_conv1", h, p[f"enc{lvl}_conv1"])
        h = _conv_relu_forward(tape, f"enc{lvl}_conv2", h, p[f"enc{lvl}_conv2"])
        skips.append(h)
        tape.skip_shapes.append(h.shape[1:])
        h, idx = ops.maxpool3d_forward(h, cfg.pool_kernel)
        tape.pool_indices.append(idx)
    h = _conv_relu_forward(tape, "bottleneck_conv1", h, p["bottleneck_conv1"])
    h = _conv_relu_forward(tape, "bottleneck_conv2", h, p["bottleneck_conv2"])
    if training and cfg.dropout_p > 0:
        h, tape.dropout_mask = ops.dropout_forward(h, cfg.dropout_p, seed, training=True)
    for lvl in reversed(range(cfg.depth)):
        name = f"dec{lvl}_up"
        tape.conv_io[name] = (h, None)
        h = ops.upconv3d_forward(h, p[name])
        skip = crop_center_array(skips[lvl], h.shape[1:])
        assert skip.shape[1:] == h.shape[1:]
        h = np.concatenate([skip, h], axis=0)
        h = _conv_relu_forward(tape, f"dec{lvl}_conv1", h, p[f"dec{lvl}_conv1"])
        h = _conv_relu_forward(tape, f"dec{lvl}_conv2", h, p[f"dec{lvl}_conv2"])
    tape.conv_io["final"] = (h, None)
    logits = ops.conv3d_forward(h, p["final"])
    return logits, tape


def _conv_relu_backward(
    tape: Tape, name: str, kernel: ConvKernel, grad: np.ndarray,
    grads: dict[str, tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    x, pre = tape.conv_io[name]
    grad = ops.relu_backward(pre, grad)
    gx, gw, gb = ops.conv3d_backward(x, kernel, grad)
    grads[name] = (gw, gb)
    return gx


def backward(
    model: Model, tape: Tape, grad_logits: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact adjoint composition in reverse order; returns per-block
    (grad_weights, grad_bias) keyed like model.params."""
    if tape.model is not model:
        raise StateError("tape was recorded for a different model instance")
    cfg = model.config
    p = model.params
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    x, _ = tape.conv_io["final"]
    g, gw, gb = ops.conv3d_backward(x, p["final"], grad_logits)
    grads["final"] = (gw, gb)

    skip_grads: list[np.ndarray | None] = [None] * cfg.depth
    for lvl in range(cfg.depth):
        g = _conv_relu_backward(tape, f"dec{lvl}_conv2", p[f"dec{lvl}_conv2"], g, grads)
        g = _conv_relu_backward(tape, f"dec{lvl}_conv1", p[f"dec{lvl}_conv1"], g, grads)
        skip_ch = g.shape[0] // 2
        g_skip, g_up = g[:skip_ch], g[skip_ch:]
        skip_grads[lvl] = pad_to_center_array(g_skip, tape.skip_shapes[lvl])
        name = f"dec{lvl}_up"
        x_up, _ = tape.conv_io[name]
        g, gw, gb = ops.upconv3d_backward(x_up, p[name], g_up)
        grads[name] = (gw, gb)

    if tape.dropout_mask is not None:
        g = ops.dropout_backward(tape.dropout_mask, g)
    g = _conv_relu_backward(tape, "bottleneck_conv2", p["bottleneck_conv2"], g, grads)
    g = _conv_relu_backward(tape, "bottleneck_conv1", p["bottleneck_conv1"], g, grads)

    for lvl in reversed(range(cfg.depth)):
        g = ops.maxpool3d_backward(tape.pool_indices[lvl], g)
        g = g + skip_grads[lvl]
        g = _conv_relu_backward(tape, f"enc{lvl}_conv2", p[f"enc{lvl}_conv2"], g, grads)
        g = _conv_relu_backward(tape, f"enc{lvl}_conv1", p[f"enc{lvl}_conv1"], g, grads)
    return grads


# --- checkpoint I/O ---------------------------------------------------------

def _flatten_opt_state(opt_state: dict | None) -> tuple[dict, dict[str, np.ndarray]]:
    """Split optimizer state into a JSON-safe header and named buffers."""
    if opt_state is None:
        return {}, {}
    header = {k: v for k, v in opt_state.items() if k != "buffers"}
    buffers = dict(opt_state.get("buffers", {}))
    return header, buffers


def save_checkpoint(
    model: Model, path, optimizer_state: dict | None = None, step: int = 0
) -> None:
    blocks = []
    payloads = []
    offset = 0

    def add_block(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        le = arr.astype("<" + arr.dtype.str[1:], copy=False)
        raw = le.tobytes()
        blocks.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)

    for name, kern in model.params.items():
        add_block(name + "/w", kern.weights)
        add_block(name + "/b", kern.bias)
    opt_header, opt_buffers = _flatten_opt_state(optimizer_state)
    for name in sorted(opt_buffers):
        add_block("opt:" + name, opt_buffers[name])

    header = {
        "config": dataclasses.asdict(model.config),
        "step": int(step),
        "blocks": blocks,
        "optimizer": opt_header or None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> tuple[Model, dict | None, int]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e

    config = ModelConfig(**header["config"])
    body = raw[12 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for blk in header["blocks"]:
        dt = np.dtype(blk["dtype"])
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        start, end = blk["offset"], blk["offset"] + n * dt.itemsize
        if end > len(body):
            raise FormatError(f"{path}: truncated payload for block {blk['name']}")
        arr = np.frombuffer(body[start:end], dtype="<" + dt.str[1:]).astype(dt)
        arrays[blk["name"]] = arr.reshape(blk["shape"])

    params: dict[str, ConvKernel] = {}
    for name, c_in, c_out, k in layer_plan(config):
        try:
            w, b = arrays[name + "/w"], arrays[name + "/b"]
        except KeyError as e:
            raise FormatError(f"{path}: missing parameter block {e}") from e
        if w.shape != (c_out, c_in, k, k, k) or b.shape != (c_out,):
            raise FormatError(
                f"{path}: block {name} shape {w.shape} disagrees with config"
            )
        params[name] = ConvKernel(w, b)
    model = Model(config, params)

    opt_state = None
    if header.get("optimizer"):
        buffers = {
            name[len("opt:"):]: arr for name, arr in arrays.items() if name.startswith("opt:")
        }
        opt_state = dict(header["optimizer"])
        opt_state["buffers"] = buffers
    return model, opt_state, int(header["step"])
