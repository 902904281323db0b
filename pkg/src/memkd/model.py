"""Multi-layer LSTM classifier, parameter initialisation and model files."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import numcore as nc
from .errors import (
    BadMagicError,
    ContractError,
    DimensionError,
    ModelFormatError,
    SequenceTooShortError,
    TruncatedPayloadError,
    VersionMismatchError,
)

GATES = ("input", "forget", "cell", "output")

MAGIC = b"MKD1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LstmConfig:
    input_dim: int
    hidden_dim: int
    num_layers: int
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.num_layers < 1:
            raise ContractError(f"invalid LSTM config {self}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")

    @classmethod
    def teacher(cls, input_dim: int, num_classes: int) -> "LstmConfig":
        return cls(input_dim, 100, 3, num_classes)

    @classmethod
    def student(cls, input_dim: int, num_classes: int) -> "LstmConfig":
        return cls(input_dim, 8, 1, num_classes)

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim


def param_shapes(config: LstmConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this order is also the on-disk order."""
    m = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(config.num_layers):
        n_in = config.layer_input_dim(layer)
        for gate in GATES:
            shapes[f"lstm.{layer}.{gate}.w_input"] = (m, n_in)
            shapes[f"lstm.{layer}.{gate}.w_hidden"] = (m, m)
            shapes[f"lstm.{layer}.{gate}.bias"] = (m,)
    shapes["head.weight"] = (config.num_classes, m)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def param_count(config: LstmConfig) -> int:
    m, c = config.hidden_dim, config.num_classes
    total = sum(4 * (m * config.layer_input_dim(layer) + m * m + m) for layer in range(config.num_layers))
    return total + c * m + c


def init_params(config: LstmConfig, seed: int) -> nc.ParamSet:
    """Draw every weight and bias i.i.d. from U(-1/sqrt(m), 1/sqrt(m))."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.hidden_dim)
    return {name: rng.uniform(-bound, bound, size=shape) for name, shape in param_shapes(config).items()}


@dataclass
class HiddenTrajectory:
    """Top-layer states over time, each of shape ``[T, batch, m]``."""

    hidden: nc.Tensor
    cell: nc.Tensor

    @property
    def length(self) -> int:
        return self.hidden.shape[0]


@dataclass
class _FusedLayer:
    w_input: nc.Tensor   # [n_in, 4m], gate blocks ordered input, forget, output, cell
    w_hidden: nc.Tensor  # [m, 4m]
    bias: nc.Tensor      # [4m]
    hidden_dim: int


# Sigmoid gates first so one activation call covers them.
_FUSED_ORDER = ("input", "forget", "output", "cell")


def _fuse(layer: Mapping[str, nc.Tensor], prefix: str, m: int) -> _FusedLayer:
    w_in = nc.transpose(nc.concat([layer[f"{prefix}{g}.w_input"] for g in _FUSED_ORDER], axis=0))
    w_h = nc.transpose(nc.concat([layer[f"{prefix}{g}.w_hidden"] for g in _FUSED_ORDER], axis=0))
    bias = nc.concat([layer[f"{prefix}{g}.bias"] for g in _FUSED_ORDER], axis=0)
    return _FusedLayer(w_in, w_h, bias, m)


def _step(pre_input: nc.Tensor, h_prev: nc.Tensor, c_prev: nc.Tensor, layer: _FusedLayer):
    m = layer.hidden_dim
    z = nc.add(pre_input, nc.matmul(h_prev, layer.w_hidden))
    gates = nc.sigmoid(nc.slice_axis(z, 0, 3 * m, axis=1))
    cand = nc.tanh(nc.slice_axis(z, 3 * m, 4 * m, axis=1))
    i = nc.slice_axis(gates, 0, m, axis=1)
    f = nc.slice_axis(gates, m, 2 * m, axis=1)
    o = nc.slice_axis(gates, 2 * m, 3 * m, axis=1)
    c = nc.add(nc.hadamard(f, c_prev), nc.hadamard(i, cand))
    h = nc.hadamard(o, nc.tanh(c))
    return h, c


def lstm_cell(x_t, h_prev, c_prev, layer_params: Mapping[str, Any]):
    """One LSTM step for a single layer.

    ``layer_params`` maps ``"<gate>.w_input" | "<gate>.w_hidden" | "<gate>.bias"``
    to arrays or tensors.  Vectors ``x_t [n]``, ``h_prev [m]`` are accepted as
    well as batches ``[b, n]``; the result has the same rank as ``x_t``.
    """
    x, h0, c0 = nc.as_tensor(x_t), nc.as_tensor(h_prev), nc.as_tensor(c_prev)
    single = x.data.ndim == 1
    if single:
        x, h0, c0 = (nc.reshape(t, (1, -1)) for t in (x, h0, c0))
    params = {k: nc.as_tensor(v) for k, v in layer_params.items()}
    m = params["input.bias"].shape[0]
    if h0.shape[1] != m or c0.shape[1] != m:
        raise DimensionError(f"state width {h0.shape[1]}/{c0.shape[1]} does not match hidden size {m}")
    if params["input.w_input"].shape[1] != x.shape[1]:
        raise DimensionError(f"input width {x.shape[1]} does not match weights {params['input.w_input'].shape}")
    fused = _fuse(params, "", m)
    pre = nc.add(nc.matmul(x, fused.w_input), nc.tile_rows(fused.bias, x.shape[0]))
    h, c = _step(pre, h0, c0, fused)
    if single:
        h, c = nc.reshape(h, (m,)), nc.reshape(c, (m,))
    return h, c


def lstm_forward(X, params: Mapping[str, Any], config: LstmConfig):
    """Run the stacked LSTM over ``X [batch, T, n]`` (or ``[T, n]``).

    Returns the top-layer :class:`HiddenTrajectory` and logits ``[batch, C]``
    computed from the final hidden state.  Layers run one after another over
    the whole sequence, with zero initial states everywhere.
    """
    X = np.asarray(X.data if isinstance(X, nc.Tensor) else X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    b, T, n = X.shape
    if T < 2:
        raise SequenceTooShortError(f"sequence length {T} < 2")
    if n != config.input_dim:
        raise DimensionError(f"input has {n} channels, model expects {config.input_dim}")
    p = {k: nc.as_tensor(v) for k, v in params.items()}
    m = config.hidden_dim
    zeros = nc.Tensor(np.zeros((b, m)))

    # time-major rows: row t*b + j is sample j at step t
    layer_in = nc.Tensor(np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(T * b, n))
    hs = cs = None
    for layer in range(config.num_layers):
        fused = _fuse(p, f"lstm.{layer}.", m)
        proj = nc.add(nc.matmul(layer_in, fused.w_input), nc.tile_rows(fused.bias, T * b))
        proj = nc.reshape(proj, (T, b, 4 * m))
        h, c = zeros, zeros
        hs, cs = [], []
        for t in range(T):
            h, c = _step(nc.take(proj, t, axis=0), h, c, fused)
            hs.append(h)
            cs.append(c)
        if layer + 1 < config.num_layers:
            layer_in = nc.reshape(nc.stack(hs, axis=0), (T * b, m))
    traj = HiddenTrajectory(nc.stack(hs, axis=0), nc.stack(cs, axis=0))
    logits = nc.add(nc.matmul(hs[-1], nc.transpose(p["head.weight"])), nc.tile_rows(p["head.bias"], b))
    return traj, logits


def predict_proba(params: Mapping[str, np.ndarray], config: LstmConfig, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(X), batch_size):
        _, logits = lstm_forward(X[start:start + batch_size], params, config)
        out.append(nc.softmax_rows(logits).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# model container


@dataclass
class ModelBundle:
    config: LstmConfig
    params: nc.ParamSet
    label_map: dict[float, int]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelBundle):
            return NotImplemented
        if (self.config, self.label_map, self.metadata) != (other.config, other.label_map, other.metadata):
            return False
        if list(self.params) != list(other.params):
            return False
        return all(
            self.params[k].shape == other.params[k].shape
            and self.params[k].astype("<f8").tobytes() == other.params[k].astype("<f8").tobytes()
            for k in self.params
        )

    def param_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())


def save_model(bundle: ModelBundle, path) -> None:
    """Write ``MKD1 | version | u32 header length | JSON header | f64 payload``."""
    expected = param_shapes(bundle.config)
    if {k: tuple(v.shape) for k, v in bundle.params.items()} != expected:
        raise ContractError("bundle parameters do not match its config")
    header = {
        "config": asdict(bundle.config),
        "label_map": [[float(k), int(v)] for k, v in sorted(bundle.label_map.items(), key=lambda kv: kv[1])],
        "metadata": bundle.metadata,
        "tensors": [[name, list(shape)] for name, shape in expected.items()],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(bundle.params[name], dtype="<f8").tobytes() for name in expected)
    Path(path).write_bytes(MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(raw)) + raw + payload)


def load_model(path) -> ModelBundle:
    blob = Path(path).read_bytes()
    if len(blob) < 9:
        raise TruncatedPayloadError(f"{path}: file too short for a model header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {blob[4]}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[9:9 + hlen].decode("utf-8"))
        config = LstmConfig(**header["config"])
        label_map = {float(k): int(v) for k, v in header["label_map"]}
        tensors = [(name, tuple(shape)) for name, shape in header["tensors"]]
        metadata = header["metadata"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    if dict(tensors) != param_shapes(config):
        raise ModelFormatError(f"{path}: tensor table does not match config")
    payload = memoryview(blob)[9 + hlen:]
    need = 8 * sum(int(np.prod(shape)) for _, shape in tensors)
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ModelFormatError(f"{path}: {len(payload) - need} trailing bytes after payload")
    params: nc.ParamSet = {}
    offset = 0
    for name, shape in tensors:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return ModelBundle(config, params, label_map, metadata)
