"""Parameter-update rules (SGD with momentum, Adam) and grid search.

Both optimizers mutate the model's parameter arrays in place and keep
per-block state buffers keyed like Model.params.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .model import Model


def _init_buffers(model: Model) -> dict[str, np.ndarray]:
    bufs = {}
    for name, kern in model.params.items():
        bufs[name + "/w"] = np.zeros_like(kern.weights)
        bufs[name + "/b"] = np.zeros_like(kern.bias)
    return bufs


def _pairs(model: Model, grads: dict) -> list[tuple[str, np.ndarray, np.ndarray]]:
    out = []
    for name, kern in model.params.items():
        gw, gb = grads[name]
        if gw.shape != kern.weights.shape or gb.shape != kern.bias.shape:
            raise ShapeError(f"gradient shape mismatch for block {name}")
        out.append((name + "/w", kern.weights, gw))
        out.append((name + "/b", kern.bias, gb))
    return out


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.99
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_model(cls, model: Model, lr: float, momentum: float = 0.99) -> "SgdState":
        return cls(lr=lr, momentum=momentum, velocity=_init_buffers(model))


def sgd_step(model: Model, grads: dict, state: SgdState) -> None:
    """Heavy-ball momentum: v <- mu*v - lr*g; w <- w + v."""
    for key, param, g in _pairs(model, grads):
        v = state.velocity[key]
        v *= state.momentum
        v -= param.dtype.type(state.lr) * g.astype(param.dtype, copy=False)
        param += v


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=_init_buffers(model), v=_init_buffers(model), **kw)


def adam_step(model: Model, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, param, g in _pairs(model, grads):
        g = g.astype(param.dtype, copy=False)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


def optimizer_state_dict(state) -> dict:
    """Serializable form used by checkpointing."""
    if isinstance(state, SgdState):
        return {
            "kind": "sgd", "lr": state.lr, "momentum": state.momentum,
            "buffers": {"v/" + k: a for k, a in state.velocity.items()},
        }
    if isinstance(state, AdamState):
        bufs = {"m/" + k: a for k, a in state.m.items()}
        bufs.update({"v/" + k: a for k, a in state.v.items()})
        return {
            "kind": "adam", "lr": state.lr, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps, "t": state.t, "buffers": bufs,
        }
    raise ParameterError(f"unknown optimizer state {type(state)}")


def optimizer_state_from_dict(d: dict):
    bufs = d.get("buffers", {})
    if d["kind"] == "sgd":
        vel = {k[len("v/"):]: a for k, a in bufs.items() if k.startswith("v/")}
        return SgdState(lr=d["lr"], momentum=d["momentum"], velocity=vel)
    if d["kind"] == "adam":
        m = {k[len("m/"):]: a for k, a in bufs.items() if k.startswith("m/")}
        v = {k[len("v/"):]: a for k, a in bufs.items() if k.startswith("v/")}
        return AdamState(
            lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
            t=int(d["t"]), m=m, v=v,
        )
    raise ParameterError(f"unknown optimizer kind {d.get('kind')}")


# --- grid search ------------------------------------------------------------

@dataclass
class GridSpec:
    learning_rates: tuple[float, ...] = (0.1, 0.001, 0.0001)
    dropouts: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    conv_kernels: tuple[int, ...] = (1, 2, 3, 5)
    pool_kernels: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        for name in ("learning_rates", "dropouts", "conv_kernels", "pool_kernels"):
            if not getattr(self, name):
                raise ParameterError(f"grid axis {name} is empty")

    def cells(self) -> list[dict]:
        return [
            {"lr": lr, "dropout": dp, "conv_kernel": kc, "pool_kernel": kp}
            for lr, dp, kc, kp in itertools.product(
                self.learning_rates, self.dropouts, self.conv_kernels, self.pool_kernels
            )
        ]


def grid_search(spec: GridSpec, budget: int, objective) -> list[dict]:
    """Evaluate objective(cell, budget) -> metric over the full Cartesian
    product. Returns all cells sorted best-first; failed cells sort last.
    Metric ties break toward smaller learning rate, then smaller dropout.
    """
    results = []
    for cell in spec.cells():
        row = dict(cell)
        try:
            row["metric"] = float(objective(cell, budget))
            row["status"] = "ok"
        except Exception as e:  # a failing cell must not abort the search
            row["metric"] = math.nan
            row["status"] = f"failed: {e}"
        results.append(row)
    results.sort(
        key=lambda r: (
            r["status"] != "ok",
            -(r["metric"] if r["status"] == "ok" else -math.inf),
            r["lr"],
            r["dropout"],
        )
    )
    return results


def write_grid_csv(results: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["lr", "dropout", "k_conv", "k_pool", "metric", "status"])
        for r in results:
            writer.writerow(
                [r["lr"], r["dropout"], r["conv_kernel"], r["pool_kernel"],
                 "" if math.isnan(r["metric"]) else repr(r["metric"]), r["status"]]
            )
