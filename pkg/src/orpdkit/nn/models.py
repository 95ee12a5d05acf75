"""Dispatch prediction models: fully-connected and graph-convolutional.

Both families map the (N, 5) per-bus input matrix to an (N, 2) control
prediction in normalized target space. The graph family mixes node features
with polynomials of a symmetric-normalized, admittance-weighted shift
operator derived from the grid topology.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..grid import Grid
from .autodiff import Tensor, graph_aggregate

_FAMILIES = ("fcnn", "gnn")
_NONLINEARITIES = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    family: str = "fcnn"
    hidden: tuple[int, ...] = (64, 64)  # dense widths (fcnn) / feature widths per layer (gnn)
    nonlinearity: str = "relu"
    dropout: float = 0.0
    taps: int = 3  # gnn: polynomial order of the shift operator per layer

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {_NONLINEARITIES}")
        if not self.hidden or any(w <= 0 for w in self.hidden):
            raise ValueError(f"layer widths must be positive, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.taps < 1:
            raise ValueError(f"taps must be >= 1, got {self.taps}")


@dataclass
class Model:
    config: ModelConfig
    n_buses: int
    params: dict[str, Tensor]
    shift: Optional[np.ndarray]  # (N, N), gnn only
    seed: int
    norm_stats: Optional[dict] = None
    # Per-channel input scale (5,), fitted on the training split; shared across
    # buses so it cannot break permutation equivariance, and multiplicative so
    # undefined entries stay exactly zero.
    input_scale: Optional[np.ndarray] = None
    training_manifest: dict = field(default_factory=dict)

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].value = v.copy()
            self.params[k].grad = None


def build_shift_operator(grid: Grid) -> np.ndarray:
    """Symmetric-normalized admittance-magnitude adjacency, zero diagonal.

    A[i, j] accumulates |y_series| over parallel lines; S = D^-1/2 A D^-1/2
    with D the row-sum degree. Rows and columns of isolated buses stay zero.
    """
    n = grid.n_buses
    a = np.zeros((n, n))
    for ln in grid.lines:
        w = abs(ln.y_series)
        a[ln.from_bus, ln.to_bus] += w
        a[ln.to_bus, ln.from_bus] += w
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros(n)
    nz = deg > 0.0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    # Scale by the (exactly symmetric) outer product so S inherits A's symmetry
    # bit for bit.
    return a * (inv_sqrt[:, None] * inv_sqrt[None, :])


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def build_model(config: ModelConfig, grid: Grid, seed: int) -> Model:
    """Seeded parameter initialization; uniform fan-in scaling per layer."""
    rng = np.random.default_rng(seed)
    n = grid.n_buses
    params: dict[str, Tensor] = {}
    if config.family == "fcnn":
        widths = [5 * n, *config.hidden, 2 * n]
        for li in range(len(widths) - 1):
            fan_in = widths[li]
            params[f"w{li}"] = Tensor(_uniform_init(rng, (widths[li], widths[li + 1]), fan_in))
            params[f"b{li}"] = Tensor(_uniform_init(rng, (widths[li + 1],), fan_in))
        shift = None
    else:
        feats = [5, *config.hidden]
        for li in range(len(feats) - 1):
            fan_in = feats[li] * config.taps
            for k in range(config.taps):
                params[f"w{li}_k{k}"] = Tensor(_uniform_init(rng, (feats[li], feats[li + 1]), fan_in))
            params[f"b{li}"] = Tensor(_uniform_init(rng, (feats[li + 1],), fan_in))
        fan_in = feats[-1]
        params["w_head"] = Tensor(_uniform_init(rng, (feats[-1], 2), fan_in))
        params["b_head"] = Tensor(_uniform_init(rng, (2,), fan_in))
        shift = build_shift_operator(grid)
    return Model(config=config, n_buses=n, params=params, shift=shift, seed=seed)


def _nonlin(z: Tensor, kind: str) -> Tensor:
    return z.relu() if kind == "relu" else z.tanh()


def _dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], p: float) -> np.ndarray:
    keep = rng.uniform(size=shape) >= p
    return keep.astype(float) / (1.0 - p)


def forward(
    model: Model,
    x: np.ndarray,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    shift: Optional[np.ndarray] = None,
) -> Tensor:
    """Run the model on a batch (B, N, 5) or single (N, 5) input.

    Dropout draws from rng in train mode only. In eval mode the graph
    aggregation reduces neighbor terms in canonical value order, making the
    output exactly equivariant to node relabeling. An explicit shift operator
    overrides the model's own (used by equivariance checks).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 2
    if single:
        arr = arr[None, :, :]
    b, n, f = arr.shape
    if n != model.n_buses or f != 5:
        raise ValueError(f"expected input (*, {model.n_buses}, 5), got {arr.shape}")
    if model.input_scale is not None:
        arr = arr * model.input_scale[None, None, :]
    cfg = model.config
    train_mode = mode == "train"
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout requires an rng")

    h = Tensor(arr)
    if cfg.family == "fcnn":
        h = h.reshape(b, 5 * n)
        n_layers = len(cfg.hidden) + 1
        for li in range(n_layers):
            h = h @ model.params[f"w{li}"] + model.params[f"b{li}"]
            if li < n_layers - 1:
                h = _nonlin(h, cfg.nonlinearity)
                if train_mode and cfg.dropout > 0.0:
                    h = h.mul_const(_dropout_mask(rng, h.shape, cfg.dropout))
        out = h.reshape(b, n, 2)
    else:
        s = model.shift if shift is None else np.asarray(shift, dtype=float)
        exact = not train_mode
        for li in range(len(cfg.hidden)):
            term = h
            acc = term @ model.params[f"w{li}_k0"]
            for k in range(1, cfg.taps):
                term = graph_aggregate(s, term, exact=exact)
                acc = acc + term @ model.params[f"w{li}_k{k}"]
            h = _nonlin(acc + model.params[f"b{li}"], cfg.nonlinearity)
            if train_mode and cfg.dropout > 0.0:
                h = h.mul_const(_dropout_mask(rng, h.shape, cfg.dropout))
        out = h @ model.params["w_head"] + model.params["b_head"]
    return out.reshape(n, 2) if single else out


def masked_loss(yhat: Tensor, ystar: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over entries where mask is true.

    Masked-out entries contribute nothing to the value or the gradient.
    """
    target = np.asarray(ystar, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if yhat.value.shape != target.shape:
        raise ValueError(f"prediction {yhat.value.shape} vs target {target.shape}")
    m = np.broadcast_to(m, target.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("mask selects no entries")
    diff = (yhat - Tensor(target)).mul_const(m.astype(float))
    return (diff * diff).sum().scale(1.0 / count)


def save_checkpoint(model: Model, path) -> None:
    """Self-describing JSON checkpoint: config, shift, parameters, stats, seed."""
    payload = {
        "config": asdict(model.config),
        "n_buses": model.n_buses,
        "seed": model.seed,
        "norm_stats": model.norm_stats,
        "training": model.training_manifest,
        "input_scale": None if model.input_scale is None else model.input_scale.tolist(),
        "shift": None if model.shift is None else model.shift.tolist(),
        "params": {
            k: {"shape": list(v.value.shape), "data": v.value.ravel().tolist()}
            for k, v in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    cfg_dict = dict(payload["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    config = ModelConfig(**cfg_dict)
    params = {
        k: Tensor(np.array(spec["data"], dtype=float).reshape(spec["shape"]))
        for k, spec in payload["params"].items()
    }
    shift = None if payload["shift"] is None else np.array(payload["shift"], dtype=float)
    scale = payload.get("input_scale")
    model = Model(
        config=config,
        n_buses=payload["n_buses"],
        params=params,
        shift=shift,
        seed=payload["seed"],
        norm_stats=payload["norm_stats"],
        input_scale=None if scale is None else np.array(scale, dtype=float),
        training_manifest=payload.get("training", {}),
    )
    return model
