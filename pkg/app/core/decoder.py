"""Two-layer ReLU MLP that maps quantized descriptors back toward the originals.

out = relu(q · W1') · W2', with W' = W + B·A when LoRA factors are attached.
No biases and no output activation.
"""
from pathlib import Path
from typing import NamedTuple, Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .binary_format import BinaryReader, f32_bytes, pack_header, write_atomic
from .errors import ConfigError, DimensionError, FormatError, StateError
from .numerics import make_rng

logger = logging.getLogger(__name__)

DECODER_MAGIC = b"DPQW"
LORA_MAGIC = b"DPQL"


class LoraFactors(BaseModel):
    """Rank-r updates: layer 1 adds B1·A1 (D × H), layer 2 adds B2·A2 (H × D)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A1: np.ndarray
    B1: np.ndarray
    A2: np.ndarray
    B2: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.A1.shape[0])

    def param_count(self) -> int:
        return int(self.A1.size + self.B1.size + self.A2.size + self.B2.size)


class DecoderWeights(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    W1: np.ndarray
    W2: np.ndarray
    lora: Optional[LoraFactors] = None

    @model_validator(mode="after")
    def _check(self):
        D, H = self.W1.shape
        if self.W2.shape != (H, D):
            raise ValueError(f"W2 must be {(H, D)}, got {self.W2.shape}")
        if self.lora is not None:
            r = self.lora.rank
            expected = {"A1": (r, H), "B1": (D, r), "A2": (r, D), "B2": (H, r)}
            for name, shape in expected.items():
                if getattr(self.lora, name).shape != shape:
                    raise ValueError(f"LoRA {name} must be {shape}, got {getattr(self.lora, name).shape}")
        return self

    @property
    def dim(self) -> int:
        return int(self.W1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[1])

    def effective(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.lora is None:
            return self.W1, self.W2
        return self.W1 + self.lora.B1 @ self.lora.A1, self.W2 + self.lora.B2 @ self.lora.A2


class DecoderCache(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    q: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    weights: DecoderWeights


class DecoderGrads(NamedTuple):
    """Full mode fills W1/W2; LoRA mode fills A1, B1, A2, B2 and leaves W1/W2 None"""

    q: np.ndarray
    W1: Optional[np.ndarray] = None
    W2: Optional[np.ndarray] = None
    A1: Optional[np.ndarray] = None
    B1: Optional[np.ndarray] = None
    A2: Optional[np.ndarray] = None
    B2: Optional[np.ndarray] = None


def param_count(w: DecoderWeights) -> int:
    """Base parameters only (D·H + H·D)"""
    return int(w.W1.size + w.W2.size)


def lora_param_count(D: int, H: int, r: int) -> int:
    return 2 * (D * r + r * H)


def _check_q(q: np.ndarray, w: DecoderWeights) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != w.dim:
        raise DimensionError(f"Decoder input has shape {q.shape}, expected {w.dim} columns")
    return q


def decoder_forward(q: np.ndarray, w: DecoderWeights) -> np.ndarray:
    return decoder_forward_cached(q, w)[0]


def decoder_forward_cached(q: np.ndarray, w: DecoderWeights) -> Tuple[np.ndarray, DecoderCache]:
    q = _check_q(q, w)
    W1, W2 = w.effective()
    pre = q @ W1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ W2
    return out, DecoderCache(q=q, pre=pre, hidden=hidden, weights=w)


def decoder_backward(cache: Optional[DecoderCache], grad_out: np.ndarray) -> DecoderGrads:
    if cache is None:
        raise StateError("decoder_backward needs the cache of a forward pass")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.q.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match output {cache.q.shape}")
    w = cache.weights
    W1, W2 = w.effective()

    g_W2 = cache.hidden.T @ grad_out
    g_pre = (grad_out @ W2.T) * (cache.pre > 0)
    g_W1 = cache.q.T @ g_pre
    g_q = g_pre @ W1.T

    if w.lora is None:
        return DecoderGrads(q=g_q, W1=g_W1, W2=g_W2)
    lora = w.lora
    return DecoderGrads(
        q=g_q,
        A1=lora.B1.T @ g_W1,
        B1=g_W1 @ lora.A1.T,
        A2=lora.B2.T @ g_W2,
        B2=g_W2 @ lora.A2.T,
    )


def init_decoder(D: int, H: int, seed: int, scheme: str = "kaiming") -> DecoderWeights:
    """Uniform(±1/√fan_in) weights, or ``scheme="identity"``.

    The identity scheme needs H ≥ 2D: hidden units 0..D-1 carry relu(q), units
    D..2D-1 carry relu(−q) and W2 recombines them, so the decoder starts as the
    identity map. Remaining hidden units get small random input weights and
    zero output weights.
    """
    if D < 1 or H < 1:
        raise ConfigError(f"Decoder sizes must be positive, got D={D}, H={H}")
    rng = make_rng(seed)
    if scheme == "kaiming":
        W1 = rng.uniform(-1.0, 1.0, size=(D, H)) / np.sqrt(D)
        W2 = rng.uniform(-1.0, 1.0, size=(H, D)) / np.sqrt(H)
    elif scheme == "identity":
        if H < 2 * D:
            raise ConfigError(f"identity initialization needs H ≥ 2D, got D={D}, H={H}")
        eye = np.eye(D)
        W1 = np.zeros((D, H))
        W1[:, :D] = eye
        W1[:, D:2 * D] = 0.0 - eye
        W1[:, 2 * D:] = rng.uniform(-1.0, 1.0, size=(D, H - 2 * D)) / np.sqrt(D)
        W2 = np.zeros((H, D))
        W2[:D] = eye
        W2[D:2 * D] = 0.0 - eye
    else:
        raise ConfigError(f"Unknown decoder init scheme {scheme!r}")
    logger.info(f"Initialized decoder D={D}, H={H} ({scheme}), {D * H * 2} parameters")
    return DecoderWeights(W1=W1, W2=W2)


def init_lora(w: DecoderWeights, r: int, seed: int) -> DecoderWeights:
    """Attach rank-r factors with random A and zero B, so the effective weights are unchanged"""
    D, H = w.dim, w.hidden
    if r < 1:
        raise ConfigError(f"LoRA rank must be at least 1, got {r}")
    if r >= min(D, H):
        logger.warning(f"LoRA rank {r} is not small compared to D={D}, H={H}")
    rng = make_rng(seed)
    lora = LoraFactors(
        A1=rng.uniform(-1.0, 1.0, size=(r, H)) / np.sqrt(H),
        B1=np.zeros((D, r)),
        A2=rng.uniform(-1.0, 1.0, size=(r, D)) / np.sqrt(D),
        B2=np.zeros((H, r)),
    )
    logger.info(f"Attached LoRA rank {r}: {lora.param_count()} trainable parameters")
    return w.model_copy(update={"lora": lora})


def merge_lora(w: DecoderWeights) -> DecoderWeights:
    """Fold B·A into the base weights and drop the factors"""
    W1, W2 = w.effective()
    return DecoderWeights(W1=W1, W2=W2)


def decoder_to_bytes(w: DecoderWeights) -> bytes:
    r = w.lora.rank if w.lora is not None else 0
    header = pack_header(DECODER_MAGIC, "IIBI", w.dim, w.hidden, int(w.lora is not None), r)
    payload = f32_bytes(w.W1) + f32_bytes(w.W2)
    if w.lora is not None:
        payload += _lora_payload(w.lora)
    return header + payload


def _lora_payload(lora: LoraFactors) -> bytes:
    return f32_bytes(lora.A1) + f32_bytes(lora.B1) + f32_bytes(lora.A2) + f32_bytes(lora.B2)


def _read_lora(reader: BinaryReader, D: int, H: int, r: int) -> LoraFactors:
    return LoraFactors(
        A1=reader.array("<f4", (r, H)).astype(np.float64),
        B1=reader.array("<f4", (D, r)).astype(np.float64),
        A2=reader.array("<f4", (r, D)).astype(np.float64),
        B2=reader.array("<f4", (H, r)).astype(np.float64),
    )


def save_decoder(w: DecoderWeights, path: Path) -> None:
    write_atomic(path, decoder_to_bytes(w))


def load_decoder(path: Path) -> DecoderWeights:
    reader = BinaryReader.from_path(path)
    D, H, flag, r = reader.header(DECODER_MAGIC, "IIBI")
    if D < 1 or H < 1 or flag not in (0, 1) or (flag and r < 1):
        raise FormatError(f"{path}: invalid decoder header D={D}, H={H}, lora={flag}, r={r}", 8)
    W1 = reader.array("<f4", (D, H)).astype(np.float64)
    W2 = reader.array("<f4", (H, D)).astype(np.float64)
    lora = _read_lora(reader, D, H, r) if flag else None
    reader.finish()
    logger.info(f"Loaded decoder D={D}, H={H}, lora={'r=' + str(r) if flag else 'off'} from {path}")
    return DecoderWeights(W1=W1, W2=W2, lora=lora)


def save_lora_delta(w: DecoderWeights, path: Path) -> None:
    """Only the LoRA factors: 20-byte header plus 4 bytes per factor entry"""
    if w.lora is None:
        raise StateError("Decoder has no LoRA factors to save")
    header = pack_header(LORA_MAGIC, "III", w.dim, w.hidden, w.lora.rank)
    write_atomic(path, header + _lora_payload(w.lora))


def load_lora_delta(base: DecoderWeights, path: Path) -> DecoderWeights:
    reader = BinaryReader.from_path(path)
    D, H, r = reader.header(LORA_MAGIC, "III")
    if (D, H) != (base.dim, base.hidden):
        raise FormatError(f"{path}: LoRA delta is for D={D}, H={H}, base is D={base.dim}, H={base.hidden}", 8)
    if r < 1:
        raise FormatError(f"{path}: invalid LoRA rank {r}", 16)
    lora = _read_lora(reader, D, H, r)
    reader.finish()
    return base.model_copy(update={"lora": lora})
