"""Convolutional capsule network: squash, routing-by-agreement, margin loss.

The network is a stack of valid strided convolutions (each followed by an
activation), a primary capsule layer formed by reshaping and squashing the
last feature map, and one class-capsule layer reached by routing-by-agreement.
Forward and backward passes work on a batch ``[B, C, S, S]``; a single
``[C, S, S]`` image is treated as a batch of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    ConvSpec,
    check_finite,
    conv2d,
    conv2d_backward,
    dtype_of,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)

CLASS_NAMES = ("normal", "benign", "insitu", "invasive")

# (out_maps, kernel, stride) for each convolution of the published architecture
TABLE1_CONV = ((64, 4, 2), (128, 4, 2), (256, 6, 2), (256, 6, 2), (256, 8, 2))

ACTIVATIONS = ("relu", "none")


class CacheMismatchError(RuntimeError):
    """Backward was called with caches from a different or since-updated network."""


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("margins must satisfy 0 < m_minus < m_plus < 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


def parse_conv_layers(text: str) -> tuple[tuple[int, int, int], ...]:
    """Parse ``"64/4/2,128/4/2"`` into (out_maps, kernel, stride) triples."""
    layers = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split("/")
        if len(parts) != 3:
            raise ValueError(f"conv layer {item!r} is not out/kernel/stride")
        layers.append(tuple(int(p) for p in parts))
    if not layers:
        raise ValueError("at least one convolutional layer is required")
    return tuple(layers)


def format_conv_layers(layers: Sequence[tuple[int, int, int]]) -> str:
    return ",".join(f"{o}/{k}/{s}" for o, k, s in layers)


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    input_side: int = 512
    conv: tuple[tuple[int, int, int], ...] = TABLE1_CONV
    primary_capsule_dim: int = 8
    class_capsules: int = 4
    class_capsule_dim: int = 16
    routing_iterations: int = 3
    activation: str = "relu"
    routing_init_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in layer) for layer in self.conv))
        self.validate()

    @property
    def conv_layers(self) -> list[ConvSpec]:
        specs, maps = [], self.input_channels
        for out_maps, kernel, stride in self.conv:
            specs.append(ConvSpec(maps, out_maps, kernel, stride))
            maps = out_maps
        return specs

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(maps, height, width) after the input and after each convolution."""
        shapes = [(self.input_channels, self.input_side, self.input_side)]
        side = self.input_side
        for spec in self.conv_layers:
            if spec.kernel > side:
                raise ValueError(
                    f"conv chain collapses: kernel {spec.kernel} exceeds spatial extent {side}"
                )
            side = spec.output_size(side)
            shapes.append((spec.out_maps, side, side))
        return shapes

    @property
    def primary_capsules(self) -> int:
        maps, h, w = self.layer_shapes()[-1]
        return maps * h * w // self.primary_capsule_dim

    def validate(self) -> None:
        if self.input_channels < 1 or self.input_side < 1:
            raise ValueError("input shape must be positive")
        if not self.conv:
            raise ValueError("at least one convolutional layer is required")
        if min(self.primary_capsule_dim, self.class_capsules, self.class_capsule_dim) < 1:
            raise ValueError("capsule counts and dimensions must be positive")
        if self.class_capsules != len(CLASS_NAMES):
            raise ValueError(f"class_capsules must equal the number of classes ({len(CLASS_NAMES)})")
        if self.routing_iterations < 1:
            raise ValueError("routing_iterations must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        maps, h, w = self.layer_shapes()[-1]
        if (maps * h * w) % self.primary_capsule_dim:
            raise ValueError(
                f"last conv output {maps}x{h}x{w} not divisible into {self.primary_capsule_dim}-d capsules"
            )

    def to_string(self) -> str:
        """Canonical serialization (sorted-key compact JSON)."""
        d = {
            "input_channels": self.input_channels,
            "input_side": self.input_side,
            "conv": format_conv_layers(self.conv),
            "primary_capsule_dim": self.primary_capsule_dim,
            "class_capsules": self.class_capsules,
            "class_capsule_dim": self.class_capsule_dim,
            "routing_iterations": self.routing_iterations,
            "activation": self.activation,
            "routing_init_std": self.routing_init_std,
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_string(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["conv"] = parse_conv_layers(d["conv"])
        return cls(**d)


# --------------------------------------------------------------------------
# capsule kernels


def squash(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """v = |s|^2 / (1 + |s|^2) * s / |s|, with squash(0) = 0."""
    sq = np.sum(s * s, axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    # |s| / (1 + |s|^2) * s equals the formula and is 0 at s = 0 without a division
    return s * (norm / (1.0 + sq))


def squash_backward(s: np.ndarray, dv: np.ndarray, axis: int = -1) -> np.ndarray:
    sq = np.sum(s * s, axis=axis, keepdims=True)
    n = np.sqrt(sq)
    f = n / (1.0 + sq)
    # d/ds [f(n) s] = f I + f'(n)/n s s^T with f'(n) = (1 - n^2) / (1 + n^2)^2
    safe_n = np.where(n > 0, n, 1.0)
    g = np.where(n > 0, (1.0 - sq) / ((1.0 + sq) ** 2 * safe_n), 0.0)
    return f * dv + g * s * np.sum(s * dv, axis=axis, keepdims=True)


def primary_capsules(conv_out: np.ndarray, dim: int) -> np.ndarray:
    """Reshape ``[M, h, w]`` (or batched) maps into squashed ``dim``-vectors.

    Capsules are read in channel-last order, so when ``M`` is a multiple of
    ``dim`` each capsule gathers ``dim`` consecutive maps at one location.
    """
    single = conv_out.ndim == 3
    x = conv_out[None] if single else conv_out
    total = int(np.prod(x.shape[1:]))
    if total % dim:
        raise ValueError(f"feature map of size {total} is not divisible into {dim}-d capsules")
    s = x.transpose(0, 2, 3, 1).reshape(x.shape[0], -1, dim)
    u = squash(s)
    return u[0] if single else u


def _primary_backward(du: np.ndarray, s: np.ndarray, map_shape: tuple[int, int, int]) -> np.ndarray:
    ds = squash_backward(s, du)
    m, h, w = map_shape
    return ds.reshape(ds.shape[0], h, w, m).transpose(0, 3, 1, 2)


@dataclass
class RoutingState:
    """Intermediates of one routing-by-agreement run (batched over axis 0).

    ``logits[r]``, ``couplings[r]``, ``totals[r]`` and ``outputs[r]`` hold b, c, s
    and v at iteration r; ``predictions`` holds the prediction vectors.
    """

    predictions: np.ndarray  # [B, N_in, N_out, D]
    logits: list[np.ndarray] = field(default_factory=list)
    couplings: list[np.ndarray] = field(default_factory=list)
    totals: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.outputs)


def routing(u_hat: np.ndarray, iterations: int) -> tuple[np.ndarray, RoutingState]:
    """Routing-by-agreement over prediction vectors ``[.., N_in, N_out, D]``.

    Logits start at zero; the logit update is skipped after the final
    iteration.  Returns the output capsules ``[.., N_out, D]`` and the state.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    single = u_hat.ndim == 3
    uh = u_hat[None] if single else u_hat
    state = RoutingState(predictions=uh)
    b = np.zeros(uh.shape[:3], dtype=uh.dtype)
    for r in range(iterations):
        c = softmax(b, axis=2)
        s = np.einsum("bij,bijd->bjd", c, uh)
        v = squash(s)
        state.logits.append(b)
        state.couplings.append(c)
        state.totals.append(s)
        state.outputs.append(v)
        if r < iterations - 1:
            b = b + np.einsum("bijd,bjd->bij", uh, v)
    v = state.outputs[-1]
    return (v[0] if single else v), state


def routing_backward(state: RoutingState, dv: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the prediction vectors through the unrolled recurrence."""
    uh = state.predictions
    dv = dv[None] if dv.ndim == 2 else dv
    du_hat = np.zeros_like(uh)
    db_next = np.zeros(uh.shape[:3], dtype=uh.dtype)
    last = state.iterations - 1
    for r in range(last, -1, -1):
        v, s, c = state.outputs[r], state.totals[r], state.couplings[r]
        dv_r = dv if r == last else np.einsum("bij,bijd->bjd", db_next, uh)
        if r < last:
            du_hat += db_next[..., None] * v[:, None, :, :]
        ds = squash_backward(s, dv_r)
        du_hat += c[..., None] * ds[:, None, :, :]
        dc = np.einsum("bijd,bjd->bij", uh, ds)
        db_next = db_next + softmax_backward(c, dc, axis=2)
    return du_hat


def capsule_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def margin_loss(norms: np.ndarray, target, cfg: MarginLossConfig = MarginLossConfig()):
    """Sum over classes of the two-sided squared hinge.

    ``norms`` is ``[K]`` with an int target (returns a float) or ``[B, K]``
    with a target array (returns per-sample losses ``[B]``).
    """
    norms = np.asarray(norms)
    single = norms.ndim == 1
    n = norms[None] if single else norms
    t = _one_hot(target, n.shape)
    present = t * np.maximum(0.0, cfg.m_plus - n) ** 2
    absent = cfg.lam * (1 - t) * np.maximum(0.0, n - cfg.m_minus) ** 2
    loss = np.sum(present + absent, axis=1)
    return float(loss[0]) if single else loss


def margin_loss_backward(norms: np.ndarray, target, cfg: MarginLossConfig = MarginLossConfig()) -> np.ndarray:
    """d(loss)/d(norms), same shape as ``norms``, per sample (not averaged)."""
    norms = np.asarray(norms)
    single = norms.ndim == 1
    n = norms[None] if single else norms
    t = _one_hot(target, n.shape)
    g = -2.0 * t * np.maximum(0.0, cfg.m_plus - n) + 2.0 * cfg.lam * (1 - t) * np.maximum(0.0, n - cfg.m_minus)
    g = g.astype(n.dtype, copy=False)
    return g[0] if single else g


def _one_hot(target, shape: tuple[int, int]) -> np.ndarray:
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (shape[0],):
        raise ValueError(f"expected {shape[0]} targets, got {t.shape}")
    if np.any(t < 0) or np.any(t >= shape[1]):
        raise ValueError(f"target class out of range [0, {shape[1]})")
    out = np.zeros(shape)
    out[np.arange(shape[0]), t] = 1.0
    return out


def predict_classes(norms: np.ndarray) -> np.ndarray:
    """Argmax over class norms; ``np.argmax`` already picks the lowest index on ties."""
    return np.argmax(norms, axis=-1)


# --------------------------------------------------------------------------
# network


class Network:
    """Parameters of a capsule network, keyed in fixed topological order:
    ``conv{i}.weight``, ``conv{i}.bias`` for each layer, then ``routing.weight``
    shaped ``[N_in, N_out, D_out, D_in]``."""

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.version = 0
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return self.params["routing.weight"].dtype

    def touch(self) -> None:
        """Mark parameters as modified (invalidates outstanding caches)."""
        self.version += 1

    def astype(self, precision: str) -> "Network":
        dtype = dtype_of(precision)
        return Network(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, spec in enumerate(config.conv_layers):
        shapes[f"conv{i}.weight"] = spec.weight_shape
        shapes[f"conv{i}.bias"] = (spec.out_maps,)
    shapes["routing.weight"] = (
        config.primary_capsules,
        config.class_capsules,
        config.class_capsule_dim,
        config.primary_capsule_dim,
    )
    return shapes


def build_network(config: NetworkConfig, rng: np.random.Generator, precision: str = "single") -> Network:
    """He-normal conv weights, zero biases, small normal routing transforms."""
    config.validate()
    dtype = dtype_of(precision)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        else:
            params[name] = rng.normal(0.0, config.routing_init_std, size=shape).astype(dtype)
    return Network(config, params)


def parameter_count(network: Network | NetworkConfig) -> int:
    config = network if isinstance(network, NetworkConfig) else network.config
    return int(sum(np.prod(shape) for shape in param_shapes(config).values()))


@dataclass
class ForwardCache:
    network: Network
    version: int
    conv_inputs: list[np.ndarray]
    conv_preacts: list[np.ndarray]
    capsule_totals: np.ndarray  # primary capsules before squash [B, N_in, d]
    primary: np.ndarray  # [B, N_in, d]
    routing: RoutingState
    outputs: np.ndarray  # class capsules [B, N_out, D]
    norms: np.ndarray  # [B, N_out]
    single: bool


def conv_features(network: Network, images: np.ndarray, upto: int | None = None):
    """Run the conv stack (optionally only the first ``upto`` layers).

    Returns (activated output, per-layer inputs, per-layer pre-activations).
    """
    x = images.astype(network.dtype, copy=False)
    inputs, preacts = [], []
    specs = network.config.conv_layers
    for i, spec in enumerate(specs[:upto]):
        inputs.append(x)
        z = conv2d(x, spec, network.params[f"conv{i}.weight"], network.params[f"conv{i}.bias"])
        preacts.append(z)
        x = relu(z) if network.config.activation == "relu" else z
    return x, inputs, preacts


def forward(network: Network, images: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Class-capsule norms for ``[C,S,S]`` or ``[B,C,S,S]`` images."""
    cfg = network.config
    single = images.ndim == 3
    x = images[None] if single else images
    if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_side, cfg.input_side):
        raise ValueError(
            f"image shape {images.shape[-3:]} does not match network input "
            f"{(cfg.input_channels, cfg.input_side, cfg.input_side)}"
        )
    feat, inputs, preacts = conv_features(network, x)
    s_prim = feat.transpose(0, 2, 3, 1).reshape(feat.shape[0], -1, cfg.primary_capsule_dim)
    u = squash(s_prim)
    W = network.params["routing.weight"]
    u_hat = np.einsum("ijdk,bik->bijd", W, u)
    v, state = routing(u_hat, cfg.routing_iterations)
    norms = check_finite(capsule_norms(v), "class capsule norms")
    cache = ForwardCache(network, network.version, inputs, preacts, s_prim, u, state, v, norms, single)
    return (norms[0] if single else norms), cache


def backward(
    network: Network, cache: ForwardCache, targets, loss_cfg: MarginLossConfig = MarginLossConfig()
) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean margin loss w.r.t. every parameter."""
    if cache.network is not network or cache.version != network.version:
        raise CacheMismatchError("forward cache does not belong to the current network state")
    cfg = network.config
    targets = np.atleast_1d(np.asarray(targets))
    batch = cache.norms.shape[0]
    dnorms = margin_loss_backward(cache.norms, targets, loss_cfg) / batch
    v = cache.outputs
    norms = cache.norms[..., None]
    dv = np.where(norms > 0, dnorms[..., None] * v / np.where(norms > 0, norms, 1.0), 0.0)
    du_hat = routing_backward(cache.routing, dv.astype(v.dtype, copy=False))
    W = network.params["routing.weight"]
    grads: dict[str, np.ndarray] = {}
    dW = np.einsum("bijd,bik->ijdk", du_hat, cache.primary)
    du = np.einsum("ijdk,bijd->bik", W, du_hat)
    last_shape = cfg.layer_shapes()[-1]
    dx = _primary_backward(du, cache.capsule_totals, last_shape)
    for i in range(len(cfg.conv) - 1, -1, -1):
        spec = cfg.conv_layers[i]
        z = cache.conv_preacts[i]
        dz = relu_backward(z, dx) if cfg.activation == "relu" else dx
        dx, dw, db = conv2d_backward(cache.conv_inputs[i], spec, network.params[f"conv{i}.weight"], dz)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    out = {name: grads[name].astype(network.dtype, copy=False) for name in network.params if name in grads}
    out["routing.weight"] = dW.astype(network.dtype, copy=False)
    for name, g in out.items():
        check_finite(g, f"gradient of {name}")
    return out


def loss_and_gradients(
    network: Network, images: np.ndarray, targets, loss_cfg: MarginLossConfig = MarginLossConfig()
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Batch-mean margin loss, its gradients and the class norms."""
    norms, cache = forward(network, images)
    losses = margin_loss(cache.norms, np.atleast_1d(targets), loss_cfg)
    grads = backward(network, cache, targets, loss_cfg)
    return float(np.mean(losses)), grads, cache.norms
