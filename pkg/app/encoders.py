import logging
import re
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import ContractError, DegenerateVectorError, MissingArtifactError, ShapeError
from app.tensor import (
    EPS_NORM,
    Tensor,
    bias_add,
    l2_normalize,
    matmul,
    relu,
    row_sq_norms,
    take_row,
    tanh,
)

if TYPE_CHECKING:
    from app.lora import AdapterSet


logger = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOKEN_PATTERN = re.compile(r"[^\W_]+")

ENCODER_MAGIC = b"EFSAENC"
ENCODER_FORMAT_VERSION = 1

Nonlinearity = Literal["tanh", "relu"]
FeatureSource = Literal["image-synthetic", "text-hashed", "imported"]


def fnv1a_64(data: bytes) -> int:
    value = FNV64_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV64_PRIME) & _MASK64
    return value


def tokenize(text: str) -> list[str]:
    return _TOKEN_PATTERN.findall(text.lower())


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    source: FeatureSource
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _hashed_counts(text: str, d_in: int) -> np.ndarray:
    counts = np.zeros(d_in, dtype=np.float64)
    for token in tokenize(text):
        counts[fnv1a_64(token.encode("utf-8")) % d_in] += 1.0
    return counts


def featurize_text(text: str, d_in: int) -> FeatureVector:
    """Hashed bag of words, l2-normalized. An empty token list gives a flagged zero vector."""
    if d_in < 1:
        raise ContractError(f"d_in must be >= 1, got {d_in}")
    counts = _hashed_counts(text, d_in)
    norm = float(np.sqrt(row_sq_norms(counts.reshape(1, -1))[0]))
    if norm <= EPS_NORM:
        return FeatureVector(np.zeros(d_in, dtype=np.float32), "text-hashed", degenerate=True)
    return FeatureVector((counts / norm).astype(np.float32), "text-hashed")


def featurize_texts(texts: Sequence[str], d_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Featurizes a batch; returns (n x d_in f32 matrix, degenerate mask)."""
    rows = [featurize_text(text, d_in) for text in texts]
    if not rows:
        return np.zeros((0, d_in), dtype=np.float32), np.zeros(0, dtype=bool)
    matrix = np.stack([row.values for row in rows])
    mask = np.array([row.degenerate for row in rows], dtype=bool)
    return matrix, mask


class EncoderDims(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_in: int = Field(default=256, ge=1)
    d_hidden: int = Field(default=256, ge=1)
    d_e: int = Field(default=64, ge=1)
    n_layers: int = Field(default=2, ge=1)
    nonlinearity: Nonlinearity = "tanh"

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.d_in] + [self.d_hidden] * (self.n_layers - 1) + [self.d_e]
        return list(zip(widths[:-1], widths[1:]))


@dataclass(frozen=True)
class LinearLayer:
    """y = x @ weight + bias, weight is (rows=fan_in) x (cols=fan_out)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.weight.shape[0])

    @property
    def cols(self) -> int:
        return int(self.weight.shape[1])


@dataclass(frozen=True)
class EncoderParams:
    layers: tuple[LinearLayer, ...]
    nonlinearity: Nonlinearity = "tanh"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ContractError("an encoder needs at least one layer")
        for previous, layer in zip(self.layers, self.layers[1:]):
            if previous.cols != layer.rows:
                raise ShapeError(f"layer chain breaks: {previous.cols} -> {layer.rows}")
        for layer in self.layers:
            if layer.bias.shape != (layer.cols,):
                raise ShapeError(f"bias shape {layer.bias.shape} != ({layer.cols},)")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ContractError("encoder weights must be finite")

    @property
    def d_in(self) -> int:
        return self.layers[0].rows

    @property
    def d_e(self) -> int:
        return self.layers[-1].cols

    def layer_tensors(self, requires_grad: bool = False) -> list[tuple[Tensor, Tensor]]:
        # fresh f64 copies; trainable copies never alias the frozen f32 weights
        return [
            (
                Tensor(layer.weight.astype(np.float64), requires_grad=requires_grad),
                Tensor(layer.bias.astype(np.float64), requires_grad=requires_grad),
            )
            for layer in self.layers
        ]

    def with_weights(self, tensors: Sequence[tuple[Tensor, Tensor]]) -> "EncoderParams":
        return EncoderParams(
            layers=tuple(
                LinearLayer(w.data.astype(np.float32), b.data.astype(np.float32))
                for w, b in tensors
            ),
            nonlinearity=self.nonlinearity,
        )


@dataclass(frozen=True)
class DualEncoder:
    vision: EncoderParams
    text: EncoderParams

    @property
    def d_e(self) -> int:
        return self.text.d_e


def init_encoder(seed: int | Sequence[int], dims: EncoderDims) -> EncoderParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in dims.layer_shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        layers.append(LinearLayer(weight, np.zeros(fan_out, dtype=np.float32)))
    return EncoderParams(layers=tuple(layers), nonlinearity=dims.nonlinearity)


def init_dual_encoder(seed: int, dims: EncoderDims) -> DualEncoder:
    return DualEncoder(vision=init_encoder([seed, 0], dims), text=init_encoder([seed, 1], dims))


def forward(
    params: EncoderParams,
    x: Tensor,
    adapters: "AdapterSet | None" = None,
    layer_tensors: Sequence[tuple[Tensor, Tensor]] | None = None,
) -> Tensor:
    """Runs rows of `x` through the tower and l2-normalizes the output rows."""
    if x.data.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"expected rows of dimension {params.d_in}, got {x.shape}")
    tensors = layer_tensors if layer_tensors is not None else params.layer_tensors()
    activate = tanh if params.nonlinearity == "tanh" else relu

    hidden = x
    for index, (weight, bias) in enumerate(tensors):
        if adapters is not None:
            weight = adapters.weight_for(index, weight)
        hidden = bias_add(matmul(hidden, weight), bias)
        if index < len(tensors) - 1:
            hidden = activate(hidden)
    return l2_normalize(hidden)


def encode_batch(
    params: EncoderParams,
    features: np.ndarray,
    adapters: "AdapterSet | None" = None,
    layer_tensors: Sequence[tuple[Tensor, Tensor]] | None = None,
    imported: bool = False,
) -> Tensor:
    features = np.asarray(features)
    if imported:
        if features.ndim != 2 or features.shape[1] != params.d_e:
            raise ShapeError(f"imported embeddings must be n x {params.d_e}, got {features.shape}")
        return l2_normalize(Tensor(features))
    return forward(params, Tensor(features), adapters=adapters, layer_tensors=layer_tensors)


def encode(
    params: EncoderParams,
    x: FeatureVector,
    adapters: "AdapterSet | None" = None,
) -> Tensor:
    """Embeds one feature vector. Imported vectors of dimension d_e are only normalized."""
    if x.source == "imported" and x.dim == params.d_e:
        return l2_normalize(Tensor(x.values))
    if x.dim != params.d_in:
        raise ShapeError(f"feature dimension {x.dim} != d_in {params.d_in}")
    return take_row(forward(params, Tensor(x.values.reshape(1, -1)), adapters=adapters), 0)


def embed(
    params: EncoderParams,
    features: np.ndarray,
    adapters: "AdapterSet | None" = None,
    batch_size: int = 8192,
) -> np.ndarray:
    """Embeds many rows without building a graph; returns f32 unit rows."""
    features = np.asarray(features)
    out = np.empty((features.shape[0], params.d_e), dtype=np.float32)
    for start in range(0, features.shape[0], batch_size):
        chunk = features[start : start + batch_size]
        out[start : start + chunk.shape[0]] = encode_batch(params, chunk, adapters).data
    return out


def embed_texts(
    params: EncoderParams,
    texts: Sequence[str],
    adapters: "AdapterSet | None" = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Embeds texts; degenerate (empty) texts come back as zero rows flagged in the mask."""
    matrix, mask = featurize_texts(texts, params.d_in)
    out = np.zeros((len(texts), params.d_e), dtype=np.float32)
    keep = ~mask
    if np.any(keep):
        try:
            out[keep] = embed(params, matrix[keep], adapters)
        except DegenerateVectorError:
            logger.warning("Encoder output collapsed for some texts; embedding row by row")
            for row in np.flatnonzero(keep):
                try:
                    out[row] = embed(params, matrix[row : row + 1], adapters)[0]
                except DegenerateVectorError:
                    mask[row] = True
    return out, mask


def save_encoder(params: EncoderParams, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as file:
        file.write(ENCODER_MAGIC)
        file.write(struct.pack("<II", ENCODER_FORMAT_VERSION, len(params.layers)))
        for layer in params.layers:
            file.write(struct.pack("<II", layer.rows, layer.cols))
            file.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            file.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return path


def load_encoder(path: Path, nonlinearity: Nonlinearity = "tanh") -> EncoderParams:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError("encoder", path)
    payload = path.read_bytes()
    if payload[: len(ENCODER_MAGIC)] != ENCODER_MAGIC:
        raise ContractError(f"{path} is not an encoder file")
    offset = len(ENCODER_MAGIC)
    version, count = struct.unpack_from("<II", payload, offset)
    if version != ENCODER_FORMAT_VERSION:
        raise ContractError(f"unsupported encoder format version {version}")
    offset += 8

    layers = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", payload, offset)
        offset += 8
        weight = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset)
        offset += rows * cols * 4
        bias = np.frombuffer(payload, dtype="<f4", count=cols, offset=offset)
        offset += cols * 4
        layers.append(
            LinearLayer(weight.reshape(rows, cols).astype(np.float32), bias.astype(np.float32))
        )
    return EncoderParams(layers=tuple(layers), nonlinearity=nonlinearity)


def save_dual_encoder(model: DualEncoder, directory: Path) -> tuple[Path, Path]:
    directory = Path(directory)
    return (
        save_encoder(model.vision, directory / "vision.enc"),
        save_encoder(model.text, directory / "text.enc"),
    )


def load_dual_encoder(directory: Path, nonlinearity: Nonlinearity = "tanh") -> DualEncoder:
    directory = Path(directory)
    return DualEncoder(
        vision=load_encoder(directory / "vision.enc", nonlinearity),
        text=load_encoder(directory / "text.enc", nonlinearity),
    )
