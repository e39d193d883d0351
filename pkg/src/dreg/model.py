"""Small fully connected classifier with exact backpropagation.

Everything runs in float64. ``forward`` accepts a single input vector or a
batch of row vectors; ``backward`` sums parameter gradients over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dreg._rng import make_rng
from dreg.errors import ConfigError, NumericError, ParseError

ACTIVATIONS = ("tanh", "relu")
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class ModelConfig:
    layer_dims: tuple
    activation: str = "tanh"
    init_scale_rule: str = "fan_in_sqrt"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(v) for v in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError("layer_dims needs at least input and output sizes")
        if min(dims) < 1:
            raise ConfigError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.init_scale_rule != "fan_in_sqrt":
            raise ConfigError(f"unknown init_scale_rule {self.init_scale_rule!r}")


@dataclass
class MlpParams:
    """Per-layer weights (out x in) and biases (out,)."""

    weights: list
    biases: list
    activation: str = "tanh"

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def arrays(self) -> list:
        """Flat list in serialization order: W_0, b_0, W_1, b_1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases], self.activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "MlpParams") -> bool:
        """Bit-for-bit equality."""
        if self.activation != other.activation or len(self.weights) != len(other.weights):
            return False
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    logits: np.ndarray = None
    single: bool = False


def init_params(cfg: ModelConfig) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = make_rng(cfg.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(cfg.layer_dims[:-1], cfg.layer_dims[1:]):
        s = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, cfg.activation)


def _act(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    if kind == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def forward(params: MlpParams, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    d_in = params.weights[0].shape[1]
    if xb.ndim != 2 or xb.shape[1] != d_in:
        raise ConfigError(f"input dimension {xb.shape[-1]} does not match model input {d_in}")
    trace = ForwardTrace(inputs=xb, single=single)
    a = xb
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if i == last:
            trace.logits = z
        else:
            a = _act(z, params.activation)
            trace.pre_activations.append(z)
            trace.activations.append(a)
    return trace


def logits(params: MlpParams, x) -> np.ndarray:
    tr = forward(params, x)
    return tr.logits[0] if tr.single else tr.logits


def backward(params: MlpParams, trace: ForwardTrace, grad_logits) -> MlpParams:
    """Chain rule from dL/dlogits to parameter gradients, summed over the batch."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.logits.shape:
        raise ConfigError(f"grad_logits shape {g.shape} does not match logits {trace.logits.shape}")
    n_layers = len(params.weights)
    dws = [None] * n_layers
    dbs = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.inputs if i == 0 else trace.activations[i - 1]
        dws[i] = g.T @ a_prev
        dbs[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * _act_grad(trace.pre_activations[i - 1], trace.activations[i - 1], params.activation)
    return MlpParams(dws, dbs, params.activation)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise NumericError("NaN in logits")
    m = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite logits")
    # gaps beyond the float range give -inf log-probabilities, caught by callers
    with np.errstate(over="ignore"):
        shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise NumericError("NaN in logits")
    m = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite logits")
    with np.errstate(over="ignore"):
        e = np.exp(z - m)
    # floor keeps every probability strictly positive when gaps exceed ~745
    return np.maximum(e / np.sum(e, axis=-1, keepdims=True), _TINY)


def predict(params: MlpParams, x):
    """Return (label, confidence); argmax ties go to the lowest class index.

    For a batch, both are arrays.
    """
    p = softmax(logits(params, x))
    label = np.argmax(p, axis=-1)
    conf = np.take_along_axis(np.atleast_2d(p), np.atleast_1d(label)[:, None], axis=-1)[:, 0]
    if p.ndim == 1:
        return int(label), float(conf[0])
    return label, conf


def save_params(params: MlpParams, path) -> None:
    """CSV ``layer,kind,row,col,value``: per layer, row-major W then b."""
    lines = [f"# activation={params.activation}", "layer,kind,row,col,value"]
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        for r in range(w.shape[0]):
            for c in range(w.shape[1]):
                lines.append(f"{li},W,{r},{c},{w[r, c]:.17g}")
        for r in range(b.shape[0]):
            lines.append(f"{li},b,{r},0,{b[r]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_params(path) -> MlpParams:
    path = Path(path)
    activation = "tanh"
    entries = {}
    seen_header = False
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "activation":
                activation = val.strip()
            continue
        if not seen_header:
            if line != "layer,kind,row,col,value":
                raise ParseError("expected header layer,kind,row,col,value", line=lineno, path=path)
            seen_header = True
            continue
        parts = line.split(",")
        if len(parts) != 5 or parts[1] not in ("W", "b"):
            raise ParseError("malformed parameter row", line=lineno, path=path)
        try:
            li, r, c, v = int(parts[0]), int(parts[2]), int(parts[3]), float(parts[4])
        except ValueError:
            raise ParseError("non-numeric parameter field", line=lineno, path=path) from None
        entries.setdefault(li, {"W": {}, "b": {}})[parts[1]][(r, c)] = v
    if not entries:
        raise ParseError("no parameters", path=path)
    if activation not in ACTIVATIONS:
        raise ParseError(f"unknown activation {activation!r}", path=path)
    weights, biases = [], []
    for li in range(len(entries)):
        if li not in entries:
            raise ParseError(f"missing layer {li}", path=path)
        wd, bd = entries[li]["W"], entries[li]["b"]
        rows = max(r for r, _ in wd) + 1
        cols = max(c for _, c in wd) + 1
        if len(wd) != rows * cols or len(bd) != rows:
            raise ParseError(f"layer {li} has inconsistent shape", path=path)
        w = np.empty((rows, cols))
        for (r, c), v in wd.items():
            w[r, c] = v
        b = np.array([bd[(r, 0)] for r in range(rows)])
        weights.append(w)
        biases.append(b)
    for a, b in zip(weights[:-1], weights[1:]):
        if b.shape[1] != a.shape[0]:
            raise ParseError("consecutive layer shapes do not chain", path=path)
    return MlpParams(weights, biases, activation)
