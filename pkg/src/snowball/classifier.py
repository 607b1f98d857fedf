"""Black-box classifier oracles.

Two implementations share the :class:`Oracle` contract (``classify(img) ->
Verdict``): :class:`CNNClassifier`, a numpy forward pass over weights in
the SNWB binary format, and :class:`RemoteClassifier`, an HTTP client.
Either way the caller only ever sees a label and a confidence.
"""

from __future__ import annotations

import json
import math
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from . import imaging
from .errors import (
    BadMagicError,
    InvalidVerdictError,
    ModelFormatError,
    ProtocolError,
    ShapeMismatchError,
    TransportError,
    TruncatedFileError,
)
from .imaging import Raster

MAGIC = b"SNWB"
FORMAT_VERSION = 1
DEFAULT_INPUT_SHAPE = (32, 32, 3)

KIND_TAGS = {"conv": 1, "maxpool": 2, "relu": 3, "flatten": 4, "dense": 5, "softmax": 6}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
PARAMETERLESS = ("maxpool", "relu", "flatten", "softmax")


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str

    def __str__(self):
        return self.name


def load_class_names(path) -> list[ClassLabel]:
    """One label name per line; the zero-based line number is the id."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    names = [line.strip() for line in lines]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate class names in {path}")
    return [ClassLabel(i, n) for i, n in enumerate(names)]


def default_labels(count: int) -> list[ClassLabel]:
    return [ClassLabel(i, f"class-{i}") for i in range(count)]


@dataclass(frozen=True)
class Verdict:
    """Top-1 answer of an oracle, optionally with the full distribution."""

    label: ClassLabel
    confidence: float
    distribution: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0) or math.isnan(self.confidence):
            raise InvalidVerdictError(f"confidence {self.confidence} outside [0, 1]")
        if self.distribution is None:
            return
        dist = tuple(float(p) for p in self.distribution)
        object.__setattr__(self, "distribution", dist)
        if any(p < 0 or math.isnan(p) for p in dist):
            raise InvalidVerdictError("distribution has negative or NaN entries")
        if abs(math.fsum(dist) - 1.0) > 1e-6:
            raise InvalidVerdictError(f"distribution sums to {math.fsum(dist)}, not 1")
        top = max(dist)
        if abs(self.confidence - top) > 1e-9:
            raise InvalidVerdictError(f"confidence {self.confidence} is not the distribution max {top}")
        if self.label.id != dist.index(top):
            raise InvalidVerdictError(f"label id {self.label.id} is not the argmax {dist.index(top)}")

    @classmethod
    def from_probabilities(cls, probs, labels: Sequence[ClassLabel]) -> "Verdict":
        probs = np.asarray(probs, dtype=np.float64)
        if len(probs) != len(labels):
            raise ValueError(f"{len(probs)} probabilities for {len(labels)} labels")
        top = int(np.argmax(probs))  # first index wins exact ties
        return cls(labels[top], float(probs[top]), tuple(float(p) for p in probs))

    def to_json(self) -> dict:
        out = {"label_id": self.label.id, "label_name": self.label.name, "confidence": self.confidence}
        if self.distribution is not None:
            out["distribution"] = list(self.distribution)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "Verdict":
        dist = payload.get("distribution")
        return cls(
            ClassLabel(int(payload["label_id"]), str(payload["label_name"])),
            float(payload["confidence"]),
            None if dist is None else tuple(float(p) for p in dist),
        )


@runtime_checkable
class Oracle(Protocol):
    """Anything that turns an RGB raster into a :class:`Verdict`.

    Oracles that cannot be called from several threads at once set
    ``serial_only = True``; the search then runs them on one worker.
    """

    def classify(self, img: Raster) -> Verdict: ...


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    """One stage of the network.

    ``conv`` parameters have dims ``(out_c, in_c + 1, kh, kw)``: the extra
    input plane multiplies a constant-one channel, so its entries sum to
    the bias.  ``dense`` parameters have dims ``(out, in + 1)`` with the
    bias in the last column.  Parameterless kinds carry dims ``(0,)``.
    """

    kind: str
    dims: tuple[int, ...]
    params: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        params = np.ascontiguousarray(self.params, dtype="<f4").reshape(-1)
        if params.size != math.prod(dims):
            raise ModelFormatError(f"{self.kind} layer has {params.size} parameters for dims {dims}")
        params = params.reshape(dims)
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    @classmethod
    def simple(cls, kind: str) -> "Layer":
        return cls(kind, (0,), np.zeros(0, dtype=np.float32))

    @classmethod
    def conv(cls, kernel, bias) -> "Layer":
        """Build from a ``(out_c, in_c, kh, kw)`` kernel and an ``(out_c,)`` bias."""
        kernel = np.asarray(kernel, dtype=np.float32)
        out_c, in_c, kh, kw = kernel.shape
        packed = np.zeros((out_c, in_c + 1, kh, kw), dtype=np.float32)
        packed[:, :in_c] = kernel
        packed[:, in_c, 0, 0] = np.asarray(bias, dtype=np.float32)
        return cls("conv", packed.shape, packed)

    @classmethod
    def dense(cls, matrix, bias) -> "Layer":
        """Build from an ``(out, in)`` matrix and an ``(out,)`` bias."""
        matrix = np.asarray(matrix, dtype=np.float32)
        packed = np.concatenate([matrix, np.asarray(bias, dtype=np.float32)[:, None]], axis=1)
        return cls("dense", packed.shape, packed)

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        return (self.kind, self.dims) == (other.kind, other.dims) and \
            self.params.tobytes() == other.params.tobytes()

    def __hash__(self):
        return hash((self.kind, self.dims))


def _output_shape(layer: Layer, shape: tuple[int, ...], index: int, is_last: bool) -> tuple[int, ...]:
    where = f"layer {index} ({layer.kind})"
    if layer.kind in PARAMETERLESS and layer.dims != (0,):
        raise ShapeMismatchError(f"{where}: parameterless layer must have dims (0,), got {layer.dims}", index)
    if layer.kind == "conv":
        if len(layer.dims) != 4 or len(shape) != 3:
            raise ShapeMismatchError(f"{where}: needs a rank-4 kernel and an HxWxC input", index)
        out_c, in_aug, kh, kw = layer.dims
        h, w, c = shape
        if in_aug != c + 1:
            raise ShapeMismatchError(f"{where}: kernel expects {in_aug - 1} channels, input has {c}", index)
        if kh > h or kw > w or kh < 1 or kw < 1 or out_c < 1:
            raise ShapeMismatchError(f"{where}: {kh}x{kw} kernel does not fit {h}x{w} input", index)
        return (h - kh + 1, w - kw + 1, out_c)
    if layer.kind == "maxpool":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise ShapeMismatchError(f"{where}: 2x2 pooling needs an HxWxC input of at least 2x2", index)
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if layer.kind == "relu":
        return shape
    if layer.kind == "flatten":
        return (math.prod(shape),)
    if layer.kind == "dense":
        if len(layer.dims) != 2 or len(shape) != 1:
            raise ShapeMismatchError(f"{where}: needs a rank-2 matrix and a flat input", index)
        if layer.dims[1] != shape[0] + 1:
            raise ShapeMismatchError(f"{where}: matrix expects {layer.dims[1] - 1} inputs, got {shape[0]}", index)
        return (layer.dims[0],)
    if layer.kind == "softmax":
        if not is_last or len(shape) != 1:
            raise ShapeMismatchError(f"{where}: softmax is only allowed as the final layer on a flat input", index)
        return shape
    raise ModelFormatError(f"{where}: unknown kind")


@dataclass(frozen=True)
class ModelWeights:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after each layer; raises on the first incompatible one."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, i, i == len(self.layers) - 1)
            out.append(shape)
        return out

    @property
    def output_size(self) -> int:
        shapes = self.shapes()
        final = shapes[-1] if shapes else self.input_shape
        return math.prod(final)


def dumps_weights(weights: ModelWeights) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(weights.layers))]
    for layer in weights.layers:
        parts.append(struct.pack("<BB", KIND_TAGS[layer.kind], len(layer.dims)))
        parts.append(struct.pack(f"<{len(layer.dims)}I", *layer.dims))
        parts.append(layer.params.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(weights: ModelWeights, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_weights(weights))
    return path


def loads_weights(payload: bytes, input_shape=DEFAULT_INPUT_SHAPE) -> ModelWeights:
    view = memoryview(payload)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {pos})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        if len(view) < 4:
            raise TruncatedFileError("file shorter than the magic number")
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported SNWB version {version}")
    layers = []
    for i in range(count):
        tag, rank = struct.unpack("<BB", take(2, f"layer {i} header"))
        if tag not in TAG_KINDS:
            raise ModelFormatError(f"layer {i}: unknown kind tag {tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"layer {i} dims"))
        n = math.prod(dims)
        params = np.frombuffer(take(4 * n, f"layer {i} parameters"), dtype="<f4")
        layers.append(Layer(TAG_KINDS[tag], dims, params.copy()))
    if pos != len(view):
        raise ModelFormatError(f"{len(view) - pos} trailing bytes after layer {count - 1}")
    return ModelWeights(tuple(layers), input_shape)


def load_weights(path, input_shape=DEFAULT_INPUT_SHAPE) -> ModelWeights:
    return loads_weights(Path(path).read_bytes(), input_shape)


def reference_architecture(
    seed: int = 0,
    input_shape=DEFAULT_INPUT_SHAPE,
    channels: Sequence[int] = (16, 32, 64),
    hidden: int = 128,
    classes: int = 16,
) -> ModelWeights:
    """Three-block traffic-sign CNN stand-in with He-initialized random weights.

    3 x (conv 3x3, ReLU, 2x2 max-pool), flatten, dense+ReLU, dense, softmax.
    Useful for smoke tests and demos; it has not been trained on anything.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    in_c = input_shape[2]
    for out_c in channels:
        fan_in = in_c * 9
        kernel = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_c, in_c, 3, 3))
        layers += [Layer.conv(kernel, np.zeros(out_c)), Layer.simple("relu"), Layer.simple("maxpool")]
        in_c = out_c
    layers.append(Layer.simple("flatten"))
    flat = ModelWeights(tuple(layers), input_shape).output_size
    layers += [
        Layer.dense(rng.normal(0.0, math.sqrt(2.0 / flat), size=(hidden, flat)), np.zeros(hidden)),
        Layer.simple("relu"),
        Layer.dense(rng.normal(0.0, math.sqrt(1.0 / hidden), size=(classes, hidden)), np.zeros(classes)),
        Layer.simple("softmax"),
    ]
    return ModelWeights(tuple(layers), input_shape)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def _conv(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    out_c, in_aug, kh, kw = params.shape
    kernel = params[:, :in_aug - 1].astype(np.float64)
    bias = params[:, in_aug - 1].astype(np.float64).sum(axis=(1, 2))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
    # windows: (H', W', C, kh, kw)
    return np.einsum("hwcij,ocij->hwo", windows, kernel, optimize=True) + bias


def _maxpool(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return x.reshape(h // 2, 2, w // 2, 2, x.shape[2]).max(axis=(1, 3))


def cnn_forward(x, weights: ModelWeights) -> np.ndarray:
    """Logits of ``weights`` applied to an ``H x W x C`` input in [0, 1].

    A trailing softmax layer is not applied; callers normalize with
    :func:`softmax` so that the returned vector is always logits.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != weights.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} does not match declared {weights.input_shape}", 0)
    layers = weights.layers
    if layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    for i, layer in enumerate(layers):
        try:
            if layer.kind == "conv":
                x = _conv(x, layer.params)
            elif layer.kind == "maxpool":
                x = _maxpool(x)
            elif layer.kind == "relu":
                x = np.maximum(x, 0.0)
            elif layer.kind == "flatten":
                x = x.reshape(-1)
            elif layer.kind == "dense":
                p = layer.params.astype(np.float64)
                x = p[:, :-1] @ x + p[:, -1]
        except ValueError as exc:
            raise ShapeMismatchError(f"layer {i} ({layer.kind}): {exc}", i) from exc
    return np.asarray(x, dtype=np.float64).reshape(-1)


def preprocess(img: Raster, input_shape=DEFAULT_INPUT_SHAPE) -> np.ndarray:
    """Bilinear resize to the model input and scale pixels to [0, 1]."""
    h, w, c = input_shape
    if c == 3:
        img = imaging.as_rgb(img)
    elif c == 1:
        img = imaging.to_grayscale(imaging.as_rgb(img)) if img.channels != 1 else img
    resized = imaging.resize_bilinear(img, w, h)
    return resized.data.astype(np.float64) / 255.0


class CNNClassifier:
    """Built-in inference oracle; weights are read-only so threads may share it."""

    serial_only = False

    def __init__(self, weights: ModelWeights, labels: Sequence[ClassLabel] | None = None):
        self.weights = weights
        n = weights.output_size
        self.labels = list(labels) if labels is not None else default_labels(n)
        if len(self.labels) != n:
            raise ModelFormatError(f"model emits {n} scores but {len(self.labels)} class names were given")

    @classmethod
    def from_files(cls, weights_path, classes_path=None, input_shape=DEFAULT_INPUT_SHAPE) -> "CNNClassifier":
        labels = load_class_names(classes_path) if classes_path else None
        return cls(load_weights(weights_path, input_shape), labels)

    def classify(self, img: Raster) -> Verdict:
        logits = cnn_forward(preprocess(img, self.weights.input_shape), self.weights)
        return Verdict.from_probabilities(softmax(logits), self.labels)


# --------------------------------------------------------------------------
# Remote oracle
# --------------------------------------------------------------------------

class RemoteClassifier:
    """HTTP oracle: POST PNG bytes, receive a JSON verdict.

    Transport failures and 5xx answers are retried ``retries`` times with
    a short linear back-off, then raised as :class:`TransportError`.
    Anything else malformed is a :class:`ProtocolError`.
    """

    serial_only = False

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = self._local.session = requests.Session()
        return session

    def _post(self, body: bytes) -> requests.Response:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            try:
                response = self._session().post(
                    self.endpoint, data=body, headers={"Content-Type": "image/png"}, timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
                continue
            if response.status_code >= 500:
                last = TransportError(f"server error {response.status_code}")
                continue
            return response
        raise TransportError(f"{self.endpoint}: {last}") from last

    def classify(self, img: Raster) -> Verdict:
        response = self._post(imaging.encode_png(img))
        if not 200 <= response.status_code < 300:
            raise ProtocolError(f"{self.endpoint} answered HTTP {response.status_code}")
        try:
            payload = response.json()
        except (ValueError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"response body is not JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ProtocolError("response JSON must be an object")
        try:
            return Verdict.from_json(payload)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"invalid verdict payload: {exc}") from exc
