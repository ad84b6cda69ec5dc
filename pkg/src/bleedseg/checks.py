"""Finite-difference verification of every backward op and of the whole
network, in 64-bit mode. Used by the test suite and the gradcheck command.
"""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from . import ops
from .model import ModelConfig
from .ops import ConvKernel

EPS = 1e-5


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    denom = max(abs(a), abs(b), floor)
    return abs(a - b) / denom


def _fd_grad(f, x: np.ndarray, idx: tuple, eps: float = EPS) -> float:
    """Central finite difference of scalar f w.r.t. x[idx]."""
    orig = x[idx]
    x[idx] = orig + eps
    up = f()
    x[idx] = orig - eps
    down = f()
    x[idx] = orig
    return (up - down) / (2 * eps)


def _sample_indices(rng, shape, n):
    flat = rng.choice(np.prod(shape), size=min(n, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_conv3d(seed: int, n_samples: int = 6) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5, 5))
    kern = ConvKernel(rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2))
    r = rng.normal(size=(2, 3, 3, 3))

    def loss():
        return float((ops.conv3d_forward(x, kern) * r).sum())

    gx, gw, gb = ops.conv3d_backward(x, kern, r)
    worst = 0.0
    for arr, g in ((x, gx), (kern.weights, gw), (kern.bias, gb)):
        for idx in _sample_indices(rng, arr.shape, n_samples):
            worst = max(worst, rel_err(_fd_grad(loss, arr, idx), g[idx]))
    return worst


def check_relu(seed: int, n_samples: int = 10) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)

    def loss():
        return float((ops.relu_forward(x) * r).sum())

    g = ops.relu_backward(x, r)
    worst = 0.0
    for idx in _sample_indices(rng, x.shape, n_samples):
        worst = max(worst, rel_err(_fd_grad(loss, x, idx), g[idx]))
    return worst


def check_maxpool(seed: int, n_samples: int = 10) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 4, 4)) * 10  # widely spread: no near-ties
    r = rng.normal(size=(2, 2, 2, 2))

    def loss():
        out, _ = ops.maxpool3d_forward(x)
        return float((out * r).sum())

    _, idx_rec = ops.maxpool3d_forward(x)
    g = ops.maxpool3d_backward(idx_rec, r)
    worst = 0.0
    for idx in _sample_indices(rng, x.shape, n_samples):
        worst = max(worst, rel_err(_fd_grad(loss, x, idx), g[idx]))
    return worst


def check_upconv3d(seed: int, n_samples: int = 6) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3, 3, 3))
    kern = ConvKernel(rng.normal(size=(2, 4, 2, 2, 2)), rng.normal(size=2))
    r = rng.normal(size=(2, 6, 6, 6))

    def loss():
        return float((ops.upconv3d_forward(x, kern) * r).sum())

    gx, gw, gb = ops.upconv3d_backward(x, kern, r)
    worst = 0.0
    for arr, g in ((x, gx), (kern.weights, gw), (kern.bias, gb)):
        for idx in _sample_indices(rng, arr.shape, n_samples):
            worst = max(worst, rel_err(_fd_grad(loss, arr, idx), g[idx]))
    return worst


def check_softmax_ce(seed: int, n_samples: int = 10) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4, 4, 4))
    labels = rng.integers(0, 3, size=(4, 4, 4)).astype(np.uint8)
    weights = rng.uniform(0.5, 2.0, size=(4, 4, 4))

    def loss():
        probs = ops.softmax_voxelwise(logits)
        return ops.weighted_cross_entropy(probs, labels, weights)[0]

    probs = ops.softmax_voxelwise(logits)
    _, g = ops.weighted_cross_entropy(probs, labels, weights)
    worst = 0.0
    for idx in _sample_indices(rng, logits.shape, n_samples):
        worst = max(worst, rel_err(_fd_grad(loss, logits, idx), g[idx]))
    return worst


def check_dropout(seed: int, n_samples: int = 10) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 4, 4))
    r = rng.normal(size=x.shape)
    out, mask = ops.dropout_forward(x, 0.3, seed, training=True)

    def loss():
        o, _ = ops.dropout_forward(x, 0.3, seed, training=True)
        return float((o * r).sum())

    g = ops.dropout_backward(mask, r)
    worst = 0.0
    for idx in _sample_indices(rng, x.shape, n_samples):
        worst = max(worst, rel_err(_fd_grad(loss, x, idx), g[idx]))
    return worst


def check_network(seed: int, n_params: int = 30, extent: int = 20) -> float:
    """Whole-network gradient check: depth-1 base-2 model, 64-bit."""
    cfg = ModelConfig(
        in_channels=1, num_classes=2, base_channels=2, depth=1,
        dropout_p=0.0, dtype="float64",
    )
    m = model_mod.build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(1, extent, extent, extent))
    out_ext = model_mod.check_tile_shape(cfg, (extent,) * 3)
    labels = rng.integers(0, 2, size=out_ext).astype(np.uint8)
    weights = np.ones(out_ext)

    def loss_and_signature():
        logits, tape = model_mod.forward(m, x, training=False)
        probs = ops.softmax_voxelwise(logits)
        loss = ops.weighted_cross_entropy(probs, labels, weights)[0]
        gates = tuple(
            (pre > 0).tobytes() for _, pre in tape.conv_io.values() if pre is not None
        )
        pools = tuple(p.indices.tobytes() for p in tape.pool_indices)
        return loss, (gates, pools)

    logits, tape = model_mod.forward(m, x, training=False)
    probs = ops.softmax_voxelwise(logits)
    _, grad_logits = ops.weighted_cross_entropy(probs, labels, weights)
    grads = model_mod.backward(m, tape, grad_logits)

    names = list(m.params)
    worst = 0.0
    checked = 0
    while checked < n_params:
        name = names[int(rng.integers(len(names)))]
        kern = m.params[name]
        arr = kern.weights if rng.random() < 0.8 else kern.bias
        g = grads[name][0] if arr is kern.weights else grads[name][1]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + EPS
        up, sig_up = loss_and_signature()
        arr[idx] = orig - EPS
        down, sig_down = loss_and_signature()
        arr[idx] = orig
        if sig_up != sig_down:
            # the perturbation crossed a ReLU kink or pool tie; the check
            # only applies away from nondifferentiable points
            continue
        worst = max(worst, rel_err((up - down) / (2 * EPS), g[idx]))
        checked += 1
    return worst


OP_CHECKS = {
    "conv3d": check_conv3d,
    "relu": check_relu,
    "maxpool3d": check_maxpool,
    "upconv3d": check_upconv3d,
    "softmax_cross_entropy": check_softmax_ce,
    "dropout": check_dropout,
}


def run_suite(seeds, op_tol: float = 1e-4, net_tol: float = 1e-3,
              network_seeds=(0, 1)) -> dict[str, float]:
    """Worst relative error per check over the given seeds. Raises nothing;
    callers compare against the tolerances."""
    results = {}
    for name, fn in OP_CHECKS.items():
        results[name] = max(fn(s) for s in seeds)
    results["network"] = max(check_network(s) for s in network_seeds)
    results["_op_tol"] = op_tol
    results["_net_tol"] = net_tol
    return results


def suite_passed(results: dict[str, float]) -> bool:
    for name, worst in results.items():
        if name.startswith("_"):
            continue
        tol = results["_net_tol"] if name == "network" else results["_op_tol"]
        if worst >= tol:
            return False
    return True
