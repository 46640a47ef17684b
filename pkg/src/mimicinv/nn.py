"""Layer specs, parameter init, network application, RMSProp, weight files.

A Network is an ordered tuple of layer specs plus a flat name -> array
parameter map; applying it is a pure function of (params, input).  The same
definition serves the generator, discriminator, corruption surrogate and
classifier.  BatchNorm runs on batch statistics while training and on the
stored running statistics everywhere else.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

WEIGHT_INIT_STD = 0.02
BN_EPS = 1e-8
BN_MOMENTUM = 0.9


class CompositionError(Exception):
    """Layer shapes do not chain."""


class ParamFileError(Exception):
    """Weight file is malformed."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    cin: int
    cout: int
    stride: int = 1
    padding: str = "same"


@dataclass(frozen=True)
class ConvTranspose:
    kh: int
    kw: int
    cout: int
    cin: int
    stride: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class LeakyReLU:
    alpha: float = 0.2


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class MaskMultiply:
    shape: tuple[int, ...]


@dataclass(frozen=True)
class InputResidual:
    shape: tuple[int, ...]


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]


LayerSpec = Union[Dense, Conv, ConvTranspose, ReLU, LeakyReLU, Tanh, Sigmoid,
                  BatchNorm, MaskMultiply, InputResidual, Reshape]

_KIND = {Dense: "dense", Conv: "conv", ConvTranspose: "conv_transpose",
         ReLU: "relu", LeakyReLU: "leaky_relu", Tanh: "tanh", Sigmoid: "sigmoid",
         BatchNorm: "batch_norm", MaskMultiply: "mask_multiply",
         InputResidual: "input_residual", Reshape: "reshape"}
_BY_KIND = {v: k for k, v in _KIND.items()}


def layer_to_json(layer: LayerSpec) -> dict:
    d = {"kind": _KIND[type(layer)]}
    for field in layer.__dataclass_fields__:
        v = getattr(layer, field)
        d[field] = list(v) if isinstance(v, tuple) else v
    return d


def layer_from_json(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind not in _BY_KIND:
        raise ValueError(f"unknown layer kind {kind!r}")
    cls = _BY_KIND[kind]
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in d.items() if k != "kind"}
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# network construction


@dataclass
class Network:
    """Validated layer chain; `shapes[i]` is the per-sample shape after layer i."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    shapes: tuple[tuple[int, ...], ...]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape


def _infer_shape(layer: LayerSpec, shape: tuple[int, ...], input_shape: tuple[int, ...], i: int):
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise CompositionError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[2] != layer.cin:
            raise CompositionError(f"layer {i}: Conv expects (H,W,{layer.cin}), got {shape}")
        ho, wo, _ = ad._conv_geom(shape[0], shape[1], layer.kh, layer.kw, layer.stride, layer.padding)
        return (ho, wo, layer.cout)
    if isinstance(layer, ConvTranspose):
        if len(shape) != 3 or shape[2] != layer.cin:
            raise CompositionError(f"layer {i}: ConvTranspose expects (h,w,{layer.cin}), got {shape}")
        return (shape[0] * layer.stride, shape[1] * layer.stride, layer.cout)
    if isinstance(layer, BatchNorm):
        if shape[-1] != layer.channels:
            raise CompositionError(f"layer {i}: BatchNorm over {layer.channels} channels, got {shape}")
        return shape
    if isinstance(layer, MaskMultiply):
        if tuple(layer.shape) != shape:
            raise CompositionError(f"layer {i}: MaskMultiply shape {layer.shape} != activation {shape}")
        return shape
    if isinstance(layer, InputResidual):
        if tuple(layer.shape) != shape:
            raise CompositionError(f"layer {i}: InputResidual shape {layer.shape} != activation {shape}")
        if tuple(layer.shape) != input_shape:
            raise CompositionError(f"layer {i}: InputResidual needs activation shape == network input shape")
        return shape
    if isinstance(layer, Reshape):
        if int(np.prod(layer.shape)) != int(np.prod(shape)):
            raise CompositionError(f"layer {i}: cannot reshape {shape} to {layer.shape}")
        return tuple(layer.shape)
    return shape  # activations


def build_network(layers, input_shape) -> Network:
    input_shape = tuple(int(n) for n in input_shape)
    shapes = []
    shape = input_shape
    for i, layer in enumerate(layers):
        shape = _infer_shape(layer, shape, input_shape, i)
        shapes.append(shape)
    return Network(tuple(layers), input_shape, tuple(shapes))


def init_params(net: Network, seed) -> dict[str, np.ndarray]:
    """Fresh parameters: weights ~ N(0, 0.02^2), biases 0, neutral mask/BN/residual."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            params[f"{i}.w"] = rng.normal(0.0, WEIGHT_INIT_STD, (layer.in_features, layer.out_features))
            params[f"{i}.b"] = np.zeros(layer.out_features)
        elif isinstance(layer, Conv):
            params[f"{i}.w"] = rng.normal(0.0, WEIGHT_INIT_STD, (layer.kh, layer.kw, layer.cin, layer.cout))
            params[f"{i}.b"] = np.zeros(layer.cout)
        elif isinstance(layer, ConvTranspose):
            params[f"{i}.w"] = rng.normal(0.0, WEIGHT_INIT_STD, (layer.kh, layer.kw, layer.cout, layer.cin))
            params[f"{i}.b"] = np.zeros(layer.cout)
        elif isinstance(layer, BatchNorm):
            params[f"{i}.scale"] = np.ones(layer.channels)
            params[f"{i}.shift"] = np.zeros(layer.channels)
            params[f"{i}.running_mean"] = np.zeros(layer.channels)
            params[f"{i}.running_var"] = np.ones(layer.channels)
        elif isinstance(layer, MaskMultiply):
            params[f"{i}.mask"] = np.ones(layer.shape)
        elif isinstance(layer, InputResidual):
            params[f"{i}.w"] = np.zeros(layer.shape)
    return params


def trainable_names(net: Network) -> tuple[str, ...]:
    """Parameter names the optimizer may touch (BatchNorm running stats excluded)."""
    names = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (Dense, Conv, ConvTranspose)):
            names += [f"{i}.w", f"{i}.b"]
        elif isinstance(layer, BatchNorm):
            names += [f"{i}.scale", f"{i}.shift"]
        elif isinstance(layer, MaskMultiply):
            names.append(f"{i}.mask")
        elif isinstance(layer, InputResidual):
            names.append(f"{i}.w")
    return tuple(names)


def lift_params(tape: Tape, params: dict[str, np.ndarray], trainable=()) -> dict[str, Var]:
    """Params as tape vars; only names in `trainable` become gradient leaves."""
    trainable = set(trainable)
    return {k: tape.leaf(v) if k in trainable else tape.const(v)
            for k, v in params.items()}


def apply_vars(net: Network, pvars: dict[str, Var], x: Var, *,
               train: bool = False, batch_stats: dict | None = None) -> Var:
    """Differentiable forward pass; x has a leading batch axis."""
    net_input = x
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            x = ad.matmul(x, pvars[f"{i}.w"]) + pvars[f"{i}.b"]
        elif isinstance(layer, Conv):
            x = ad.conv2d(x, pvars[f"{i}.w"], layer.stride, layer.padding) + pvars[f"{i}.b"]
        elif isinstance(layer, ConvTranspose):
            x = ad.conv_transpose2d(x, pvars[f"{i}.w"], layer.stride) + pvars[f"{i}.b"]
        elif isinstance(layer, ReLU):
            x = x.relu()
        elif isinstance(layer, LeakyReLU):
            x = ad.leaky_relu(x, layer.alpha)
        elif isinstance(layer, Tanh):
            x = x.tanh()
        elif isinstance(layer, Sigmoid):
            x = x.sigmoid()
        elif isinstance(layer, BatchNorm):
            x = _batch_norm(x, pvars, i, train, batch_stats)
        elif isinstance(layer, MaskMultiply):
            x = x * pvars[f"{i}.mask"]
        elif isinstance(layer, InputResidual):
            x = x + pvars[f"{i}.w"] * net_input
        elif isinstance(layer, Reshape):
            x = x.reshape((x.data.shape[0],) + tuple(layer.shape))
    return x


def _batch_norm(x: Var, pvars, i: int, train: bool, batch_stats: dict | None) -> Var:
    scale, shift = pvars[f"{i}.scale"], pvars[f"{i}.shift"]
    if train:
        axes = tuple(range(x.data.ndim - 1))
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered / (var + BN_EPS).sqrt()
        if batch_stats is not None:
            batch_stats[i] = (mu.data.reshape(-1).copy(), var.data.reshape(-1).copy())
    else:
        rm = pvars[f"{i}.running_mean"].data
        rv = pvars[f"{i}.running_var"].data
        xhat = (x - rm) * (1.0 / np.sqrt(rv + BN_EPS))
    return xhat * scale + shift


def apply(net: Network, params: dict[str, np.ndarray], x: np.ndarray, *,
          train: bool = False) -> np.ndarray:
    """Plain forward pass (no gradients), pure in (params, x)."""
    tape = Tape()
    pvars = lift_params(tape, params)
    return apply_vars(net, pvars, tape.const(x), train=train).data


def update_running_stats(params: dict[str, np.ndarray], batch_stats: dict,
                         momentum: float = BN_MOMENTUM) -> dict[str, np.ndarray]:
    """EMA-fold the collected per-batch BatchNorm stats into a new param map."""
    out = dict(params)
    for i, (mu, var) in batch_stats.items():
        out[f"{i}.running_mean"] = momentum * out[f"{i}.running_mean"] + (1 - momentum) * mu
        out[f"{i}.running_var"] = momentum * out[f"{i}.running_var"] + (1 - momentum) * var
    return out


# ---------------------------------------------------------------------------
# RMSProp


@dataclass
class RmsPropState:
    rho: float
    eps: float
    acc: dict[str, np.ndarray]


def rmsprop_init(params: dict[str, np.ndarray], rho: float = 0.9, eps: float = 1e-8) -> RmsPropState:
    return RmsPropState(rho, eps, {k: np.zeros_like(v) for k, v in params.items()})


def rmsprop_update(theta: np.ndarray, grad: np.ndarray, acc: np.ndarray,
                   rho: float, eps: float, lr: float) -> tuple[np.ndarray, np.ndarray]:
    """One elementwise step: v' = rho v + (1-rho) g^2; theta' = theta - lr g / (sqrt(v') + eps)."""
    if theta.shape != grad.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {theta.shape}")
    acc = rho * acc + (1.0 - rho) * grad * grad
    return theta - lr * grad / (np.sqrt(acc) + eps), acc


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: RmsPropState, lr: float) -> tuple[dict[str, np.ndarray], RmsPropState]:
    """Step every key in `grads`; other params pass through unchanged."""
    new_params = dict(params)
    new_acc = dict(state.acc)
    for name, g in grads.items():
        new_params[name], new_acc[name] = rmsprop_update(
            params[name], g, state.acc.get(name, np.zeros_like(g)), state.rho, state.eps, lr)
    return new_params, RmsPropState(state.rho, state.eps, new_acc)


# ---------------------------------------------------------------------------
# weight files: magic "MGNW", then a little-endian tensor table


_MAGIC = b"MGNW"
_VERSION = 1


def save_params(params: dict[str, np.ndarray], path) -> None:
    """Write params sorted by name; round-trips bit-exactly."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<II", _VERSION, len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64, order="C")  # keeps rank 0 intact
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc)) + enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes(order="C")
    with open(path, "wb") as f:
        f.write(blob)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ParamFileError(f"truncated weight file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise ParamFileError("bad magic; not a weight file")
    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise ParamFileError(f"unsupported weight file version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").copy()
        if data.size != size:
            raise ParamFileError(f"tensor {name!r}: shape table disagrees with payload")
        params[name] = data.reshape(shape)
    if pos != len(view):
        raise ParamFileError(f"{len(view) - pos} trailing bytes after tensor table")
    return params
