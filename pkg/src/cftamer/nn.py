"""Minimal dense-network core: exact analytic gradients, Adam, cosine similarity.

Everything runs in float64. Networks are plain dataclasses over numpy arrays,
small enough that determinism and gradient-check precision matter more than
throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "linear")

NORM_FLOOR = 1e-8


class ShapeError(ValueError):
    """Dimension mismatch between arrays that must be shape-congruent."""


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or inf; the run must abort."""


class DegenerateEmbeddingError(ValueError):
    """A vector norm fell below NORM_FLOOR; cosine similarity is undefined."""


class StaleCacheError(ValueError):
    """Backward called with a cache produced by a different forward."""


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(f"layer shapes {self.w.shape}/{self.b.shape} inconsistent")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def out_size(self) -> int:
        return self.w.shape[0]

    @property
    def in_size(self) -> int:
        return self.w.shape[1]


@dataclass
class NetworkParams:
    layers: list[Layer]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_size != prev.out_size:
                raise ShapeError(
                    f"layer input {cur.in_size} does not chain with previous output {prev.out_size}"
                )

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers]
        )


@dataclass
class LayerGrad:
    dw: np.ndarray
    db: np.ndarray


@dataclass
class GradientSet:
    layers: list[LayerGrad]

    def scale(self, factor: float) -> "GradientSet":
        return GradientSet([LayerGrad(g.dw * factor, g.db * factor) for g in self.layers])

    def add_(self, other: "GradientSet") -> "GradientSet":
        for mine, theirs in zip(self.layers, other.layers, strict=True):
            mine.dw += theirs.dw
            mine.db += theirs.db
        return self

    def is_zero(self) -> bool:
        return all(not g.dw.any() and not g.db.any() for g in self.layers)


def zero_gradients(params: NetworkParams) -> GradientSet:
    return GradientSet(
        [LayerGrad(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params.layers]
    )


def init_network(sizes: list[int], activations: list[str], rng: np.random.Generator) -> NetworkParams:
    """Scaled uniform init (+-sqrt(6/(fan_in+fan_out))), zero biases.

    `sizes` is [input, h1, ..., output]; activations has one entry per layer.
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return NetworkParams(layers)


@dataclass
class ForwardCache:
    source: NetworkParams
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer


def forward(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a single input vector; cache enough for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.in_size:
        raise ShapeError(f"input length {x.shape} != expected ({params.in_size},)")
    inputs, pre = [], []
    h = x
    for layer in params.layers:
        inputs.append(h)
        z = layer.w @ h + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, ForwardCache(params, inputs, pre)


def backward(
    params: NetworkParams, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[np.ndarray, GradientSet]:
    """Exact gradients of a scalar loss whose gradient at the output is output_grad."""
    if cache.source is not params:
        raise StaleCacheError("cache was not produced by a forward pass of these params")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != (params.out_size,):
        raise ShapeError(f"output_grad shape {g.shape} != ({params.out_size},)")
    grads: list[LayerGrad] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        gz = np.where(cache.pre[k] > 0.0, g, 0.0) if layer.activation == "relu" else g
        grads[k] = LayerGrad(np.outer(gz, cache.inputs[k]), gz.copy())
        g = layer.w.T @ gz
    return g, GradientSet(grads)


@dataclass
class AdamConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    algorithm: str = "adam"  # "adam" or plain "sgd" (step_size only)


@dataclass
class OptimizerState:
    m: list[LayerGrad]
    v: list[LayerGrad]
    step: int
    config: AdamConfig = field(default_factory=AdamConfig)


def adam_init(params: NetworkParams, config: AdamConfig | None = None) -> OptimizerState:
    zeros = lambda: [
        LayerGrad(np.zeros_like(l.w), np.zeros_like(l.b)) for l in params.layers
    ]
    return OptimizerState(zeros(), zeros(), 0, config or AdamConfig())


def adam_update(
    params: NetworkParams, grads: GradientSet, state: OptimizerState
) -> tuple[NetworkParams, OptimizerState]:
    """Bias-corrected adaptive-moment step.

    An all-zero gradient decays the moments and advances the step counter but
    leaves the parameters untouched, so a perfectly fit sample never drifts
    the network through stale momentum.
    """
    if len(grads.layers) != len(params.layers):
        raise ShapeError("gradient set does not match network")
    for g, l in zip(grads.layers, params.layers):
        if g.dw.shape != l.w.shape or g.db.shape != l.b.shape:
            raise ShapeError("gradient shapes do not match network")
        if not (np.isfinite(g.dw).all() and np.isfinite(g.db).all()):
            raise NonFiniteGradientError("non-finite gradient; aborting update")
    cfg = state.config
    t = state.step + 1
    if cfg.algorithm == "sgd":
        new_layers = [
            Layer(l.w - cfg.step_size * g.dw, l.b - cfg.step_size * g.db, l.activation)
            for l, g in zip(params.layers, grads.layers)
        ]
        return NetworkParams(new_layers), OptimizerState(state.m, state.v, t, cfg)
    skip_params = grads.is_zero()
    new_m, new_v, new_layers = [], [], []
    corr1 = 1.0 - cfg.beta1**t
    corr2 = 1.0 - cfg.beta2**t
    for layer, g, m, v in zip(params.layers, grads.layers, state.m, state.v):
        mw = cfg.beta1 * m.dw + (1.0 - cfg.beta1) * g.dw
        mb = cfg.beta1 * m.db + (1.0 - cfg.beta1) * g.db
        vw = cfg.beta2 * v.dw + (1.0 - cfg.beta2) * g.dw**2
        vb = cfg.beta2 * v.db + (1.0 - cfg.beta2) * g.db**2
        new_m.append(LayerGrad(mw, mb))
        new_v.append(LayerGrad(vw, vb))
        if skip_params:
            new_layers.append(Layer(layer.w.copy(), layer.b.copy(), layer.activation))
        else:
            w = layer.w - cfg.step_size * (mw / corr1) / (np.sqrt(vw / corr2) + cfg.epsilon)
            b = layer.b - cfg.step_size * (mb / corr1) / (np.sqrt(vb / corr2) + cfg.epsilon)
            new_layers.append(Layer(w, b, layer.activation))
    return NetworkParams(new_layers), OptimizerState(new_m, new_v, t, cfg)


def cosine_similarity(
    u: np.ndarray, v: np.ndarray
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """cos(u, v) clamped to [-1, 1], with exact analytic partials."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"vector shapes {u.shape}/{v.shape} differ")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise DegenerateEmbeddingError(f"norms ({nu:.3g}, {nv:.3g}) below floor")
    c = float(u @ v / (nu * nv))
    du = v / (nu * nv) - c * u / nu**2
    dv = u / (nu * nv) - c * v / nv**2
    return min(1.0, max(-1.0, c)), (du, dv)
