"""Feed-forward classifiers, ground-truth class decoders and their encoders.

Class labels are 0-based throughout the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff
from .ndiff import DimensionError, as_matrix, as_vector

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = as_matrix(self.weight, "weight")
        b = as_vector(self.bias, "bias")
        if b.size != w.shape[0]:
            raise DimensionError(f"bias length {b.size} does not match {w.shape[0]} weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


@dataclass(frozen=True)
class FeedForwardClassifier:
    """Stack of affine layers; the last layer's outputs are the class scores."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("classifier needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise DimensionError(f"layer outputs {prev.n_out} but next layer takes {nxt.n_in}")
        if layers[-1].n_out < 2:
            raise ValueError("classifier needs at least two classes")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def mlp(cls, sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu"):
        """He-initialised MLP with a linear output layer.  ``sizes`` = [n_I, hidden..., m]."""
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            act = "linear" if k == len(sizes) - 2 else activation
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(tuple(layers))

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].n_out

    def scores(self, x) -> np.ndarray:
        x = as_vector(x, "x")
        if x.size != self.n_inputs:
            raise DimensionError(f"x has length {x.size}, classifier takes {self.n_inputs}")
        return self.scores_batch(x[None, :])[0]

    def scores_batch(self, xs: np.ndarray) -> np.ndarray:
        """Scores for each row of ``xs`` (shape ``(k, n_I)``)."""
        h = np.asarray(xs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.n_inputs:
            raise DimensionError(f"expected shape (k, {self.n_inputs}), got {h.shape}")
        for layer in self.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h

    def classify(self, x) -> int:
        return int(np.argmax(self.scores(x)))

    def classify_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores_batch(xs), axis=1)

    def expr(self, x: ndiff.Expr) -> ndiff.Expr:
        """Differentiable score expression on top of ``x``."""
        node = x
        for layer in self.layers:
            node = ndiff.Affine(layer.weight, layer.bias, node)
            if layer.activation == "relu":
                node = ndiff.Relu(node)
            elif layer.activation == "tanh":
                node = ndiff.Tanh(node)
        return node


def classify_scores(scores) -> int:
    """Index of the largest score; ties go to the lowest index."""
    return int(np.argmax(np.asarray(scores)))


@dataclass(frozen=True)
class GroundTruthDecoder:
    """``x = tanh(A l + b)`` for one class."""

    class_index: int
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.A, "A")
        b = as_vector(self.b, "b")
        if b.size != a.shape[0]:
            raise DimensionError(f"b has length {b.size}, A has {a.shape[0]} rows")
        if a.shape[1] >= a.shape[0]:
            raise DimensionError("latent dimension must be smaller than the output dimension")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "class_index", int(self.class_index))

    @property
    def n_latent(self) -> int:
        return self.A.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.A.shape[0]

    def decode(self, l) -> np.ndarray:
        l = as_vector(l, "l")
        if l.size != self.n_latent:
            raise DimensionError(f"latent has length {l.size}, decoder takes {self.n_latent}")
        return np.tanh(self.A @ l + self.b)

    def decode_batch(self, ls: np.ndarray) -> np.ndarray:
        ls = np.asarray(ls, dtype=np.float64)
        if ls.ndim != 2 or ls.shape[1] != self.n_latent:
            raise DimensionError(f"expected shape (k, {self.n_latent}), got {ls.shape}")
        return np.tanh(ls @ self.A.T + self.b)

    def expr(self, l: ndiff.Expr) -> ndiff.Expr:
        return ndiff.Tanh(ndiff.Affine(self.A, self.b, l))


@dataclass(frozen=True)
class IdentityDecoder:
    """``x = l``.  Makes latent attacks analytically checkable; not invertible by
    :func:`encode` (it is its own encoder)."""

    class_index: int
    dim: int

    @property
    def n_latent(self) -> int:
        return self.dim

    @property
    def n_outputs(self) -> int:
        return self.dim

    def decode(self, l) -> np.ndarray:
        l = as_vector(l, "l")
        if l.size != self.dim:
            raise DimensionError(f"latent has length {l.size}, decoder takes {self.dim}")
        return l

    def decode_batch(self, ls) -> np.ndarray:
        return np.asarray(ls, dtype=np.float64)

    def expr(self, l: ndiff.Expr) -> ndiff.Expr:
        return l


@dataclass(frozen=True)
class InversionConfig:
    restarts: int = 4
    steps: int = 300
    step_size: float = 1.0
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.restarts < 1 or self.steps < 1:
            raise ValueError("restarts and steps must be positive")
        if not (self.step_size > 0 and self.tolerance >= 0):
            raise ValueError("step_size must be positive and tolerance non-negative")


@dataclass(frozen=True)
class Encoding:
    latent: np.ndarray
    residual: float
    restart_residuals: tuple[float, ...]
    trace: tuple[float, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class GenerativePair:
    decoder: GroundTruthDecoder | IdentityDecoder
    inversion: InversionConfig = InversionConfig()

    @property
    def class_index(self) -> int:
        return self.decoder.class_index

    @property
    def n_latent(self) -> int:
        return self.decoder.n_latent

    @property
    def n_outputs(self) -> int:
        return self.decoder.n_outputs

    def decode(self, l) -> np.ndarray:
        return self.decoder.decode(l)

    def decode_batch(self, ls) -> np.ndarray:
        return self.decoder.decode_batch(ls)

    def encode(self, x, rng: np.random.Generator) -> Encoding:
        return encode(self, x, rng)


def _invert_once(dec: GroundTruthDecoder, x: np.ndarray, l: np.ndarray, cfg: InversionConfig):
    """Damped Gauss-Newton descent on ``0.5 * ||decode(l) - x||^2``.

    A step is accepted only if it lowers the objective; otherwise the step
    length is halved, so the recorded objective never increases.
    """
    A, b = dec.A, dec.b
    y = np.tanh(A @ l + b)
    r = y - x
    obj = 0.5 * (r @ r)
    trace = [obj]
    step = cfg.step_size
    n = dec.n_latent
    for _ in range(cfg.steps):
        if np.sqrt(2.0 * obj) < cfg.tolerance:
            break
        jac = (1.0 - y * y)[:, None] * A
        grad = jac.T @ r
        if not np.any(grad):
            break
        direction = np.linalg.solve(jac.T @ jac + 1e-10 * np.eye(n), grad)
        if not grad @ direction > 0:
            direction = grad
        improved = False
        while step > 1e-12:
            cand = l - step * direction
            y_c = np.tanh(A @ cand + b)
            r_c = y_c - x
            obj_c = 0.5 * (r_c @ r_c)
            if obj_c < obj:
                l, y, r, obj = cand, y_c, r_c, obj_c
                step = min(cfg.step_size, 2.0 * step)
                improved = True
                break
            step *= 0.5
        trace.append(obj)
        if not improved:
            break
    return l, float(np.sqrt(2.0 * obj)), trace


def encode(pair: GenerativePair, x, rng: np.random.Generator) -> Encoding:
    """Latent code minimising ``||decode(l) - x||_2`` over several restarts.

    The first restart begins at ``l = 0``, the rest at standard normal draws.
    ``residual`` is the final ``||decode(l) - x||_2`` of the best restart; a
    poor reconstruction is reported, never raised.
    """
    dec = pair.decoder
    x = as_vector(x, "x")
    if isinstance(dec, IdentityDecoder):
        dec.decode(x)
        return Encoding(x.copy(), 0.0, (0.0,))
    if x.size != dec.n_outputs:
        raise DimensionError(f"x has length {x.size}, decoder produces {dec.n_outputs}")
    cfg = pair.inversion
    best = None
    residuals = []
    for k in range(cfg.restarts):
        start = np.zeros(dec.n_latent) if k == 0 else rng.standard_normal(dec.n_latent)
        l, res, trace = _invert_once(dec, x, start, cfg)
        residuals.append(res)
        if best is None or res < best[1]:
            best = (l, res, trace)
        if res < cfg.tolerance:
            break
    return Encoding(best[0], best[1], tuple(residuals), tuple(best[2]))


# --- serialization -----------------------------------------------------------

MAGIC = b"LATEVAL\x00"
FORMAT_VERSION = 1
KIND_CLASSIFIER = 1
KIND_DECODER = 2
_HEADER = struct.Struct("<8sHHIIII")
_LAYER = struct.Struct("<IIB")
_DECODER_EXTRA = struct.Struct("<IIIdd")
_ACT_CODES = {name: k for k, name in enumerate(ACTIVATIONS)}


class ModelFormatError(ValueError):
    """Malformed model file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ModelVersionError(ValueError):
    """Wrong magic header or unsupported format version."""


def _f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dumps_model(model: FeedForwardClassifier | GenerativePair) -> bytes:
    if isinstance(model, FeedForwardClassifier):
        parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, KIND_CLASSIFIER, model.n_classes,
                              model.n_inputs, 0, len(model.layers))]
        for layer in model.layers:
            parts.append(_LAYER.pack(layer.n_out, layer.n_in, _ACT_CODES[layer.activation]))
            parts.append(_f64_bytes(layer.weight))
            parts.append(_f64_bytes(layer.bias))
        return b"".join(parts)
    if isinstance(model, GenerativePair):
        dec, inv = model.decoder, model.inversion
        return b"".join([
            _HEADER.pack(MAGIC, FORMAT_VERSION, KIND_DECODER, 0, dec.n_outputs, dec.n_latent, 1),
            _DECODER_EXTRA.pack(dec.class_index, inv.restarts, inv.steps, inv.step_size,
                                inv.tolerance),
            _f64_bytes(dec.A),
            _f64_bytes(dec.b),
        ])
    raise TypeError(f"cannot serialize {type(model).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, st: struct.Struct, what: str):
        if self.pos + st.size > len(self.data):
            raise ModelFormatError(f"truncated {what}", self.pos)
        out = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return out

    def floats(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        nbytes = 8 * count
        if self.pos + nbytes > len(self.data):
            raise ModelFormatError(f"truncated {what}", self.pos)
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos)
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"non-finite value in {what}", self.pos)
        self.pos += nbytes
        return arr.astype(np.float64).reshape(shape)


def loads_model(data: bytes) -> FeedForwardClassifier | GenerativePair:
    if len(data) < len(MAGIC):
        raise ModelFormatError("file too short for header", len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise ModelVersionError("bad magic header: not a latent-eval model file")
    rd = _Reader(data)
    _, version, kind, m, n_in, n_latent, n_layers = rd.unpack(_HEADER, "header")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        if kind == KIND_CLASSIFIER:
            if n_layers < 1:
                raise ModelFormatError("classifier has no layers", rd.pos)
            layers = []
            for k in range(n_layers):
                n_out, n_prev, act = rd.unpack(_LAYER, f"layer {k} header")
                if act >= len(ACTIVATIONS) or n_out == 0 or n_prev == 0:
                    raise ModelFormatError(f"bad layer {k} header", rd.pos - _LAYER.size)
                w = rd.floats((n_out, n_prev), f"layer {k} weights")
                b = rd.floats((n_out,), f"layer {k} bias")
                layers.append(Layer(w, b, ACTIVATIONS[act]))
            model = FeedForwardClassifier(tuple(layers))
            if model.n_classes != m or model.n_inputs != n_in:
                raise ModelFormatError("header dimensions disagree with layers", _HEADER.size)
        elif kind == KIND_DECODER:
            cls, restarts, steps, step_size, tol = rd.unpack(_DECODER_EXTRA, "decoder header")
            a = rd.floats((n_in, n_latent), "decoder matrix")
            b = rd.floats((n_in,), "decoder bias")
            model = GenerativePair(GroundTruthDecoder(cls, a, b),
                                   InversionConfig(restarts, steps, step_size, tol))
        else:
            raise ModelFormatError(f"unknown model kind {kind}", 10)
    except (DimensionError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(str(exc), rd.pos) from exc
    if rd.pos != len(data):
        raise ModelFormatError("trailing bytes after model", rd.pos)
    return model


def save_model(model: FeedForwardClassifier | GenerativePair, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> FeedForwardClassifier | GenerativePair:
    return loads_model(Path(path).read_bytes())
