"""Dense network with hand-written backprop and a functional Adam optimiser.

All training arithmetic is float64. ``forward`` is pure; ``backward`` returns
gradients without touching the model, and ``adam_step`` returns new arrays.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

ACTIVATIONS = ("relu", "none")
MLP_MAGIC = b"DSDMLP\x00\x01"


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} do not match")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "relu") -> Dense:
    """Uniform fan-in initialisation, ``U(-1/sqrt(in), 1/sqrt(in))``, zero bias."""
    bound = 1.0 / np.sqrt(in_dim)
    return Dense(rng.uniform(-bound, bound, size=(in_dim, out_dim)), np.zeros(out_dim), activation)


@dataclass
class MlpModel:
    layers: list[Dense]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_params(self, params) -> "MlpModel":
        params = list(params)
        return MlpModel([
            Dense(params[2 * i], params[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        ])

    def copy(self) -> "MlpModel":
        return self.with_params([p.copy() for p in self.params()])


def build_mlp(input_dim: int, widths, seed: int, activations=None) -> MlpModel:
    widths = list(widths)
    if activations is None:
        activations = ["relu"] * (len(widths) - 1) + ["none"]
    rng = np.random.default_rng(seed)
    dims = [input_dim, *widths]
    return MlpModel([init_dense(a, b, rng, act) for a, b, act in zip(dims, dims[1:], activations)])


@dataclass
class HeadOutput:
    penultimate_embedding: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    if z.shape[1] == 2:
        # keep P_B = 1 - P_F exactly so P_F > 0.5 <=> P_B < P_F holds in floating point
        p[:, 0] = 1.0 - p[:, 1]
    return p


def forward_cache(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations ``[x, a_1, ..., a_L]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of shape (n, {model.input_dim}), got {x.shape}")
    acts = [x]
    for layer in model.layers:
        z = acts[-1] @ layer.weight + layer.bias
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    return acts


def forward(model: MlpModel, x: np.ndarray) -> HeadOutput:
    acts = forward_cache(model, x)
    return HeadOutput(acts[-2], acts[-1], softmax(acts[-1]))


def backward(model: MlpModel, x: np.ndarray, grad_out: np.ndarray, acts=None,
             return_input_grad: bool = False):
    """Gradients of a scalar loss given ``dL/d(output)``.

    Returns a list ``[dW_1, db_1, ..., dW_L, db_L]`` matching ``model.params()``,
    plus ``dL/dx`` when ``return_input_grad`` is set.
    """
    if acts is None:
        acts = forward_cache(model, x)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {acts[-1].shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("upstream gradient is not finite")
    grads: list[np.ndarray] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (acts[i + 1] > 0)
        grads = [acts[i].T @ g, g.sum(axis=0)] + grads
        g = g @ layer.weight.T
    if return_input_grad:
        return grads, g
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimiser state differ in length")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# checkpoint: magic, u32 layer count, per layer (u32 in, u32 out, u8 activation),
# then per layer weight (row-major) and bias as little-endian float64

def model_to_bytes(model: MlpModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MLP_MAGIC)
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
    for layer in model.layers:
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes, offset: int = 0) -> tuple[MlpModel, int]:
    """Decode a model starting at ``offset``; returns the model and the end offset."""
    try:
        if data[offset:offset + len(MLP_MAGIC)] != MLP_MAGIC:
            raise FormatError("not an MLP checkpoint (bad magic)")
        pos = offset + len(MLP_MAGIC)
        (n_layers,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<IIB", data, pos))
            pos += 9
        layers = []
        for in_dim, out_dim, act in shapes:
            w = np.frombuffer(data, dtype="<f8", count=in_dim * out_dim, offset=pos).reshape(in_dim, out_dim)
            pos += 8 * in_dim * out_dim
            b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=pos)
            pos += 8 * out_dim
            layers.append(Dense(w.astype(np.float64), b.astype(np.float64), ACTIVATIONS[act]))
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt MLP checkpoint ({exc})") from None
    return MlpModel(layers), pos


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        data = fh.read()
    model, end = model_from_bytes(data)
    if end != len(data):
        raise FormatError(f"{path}: {len(data) - end} trailing bytes after model")
    return model
