"""Differentiable product quantization with the straight-through estimator.

Forward values are always the hard-quantized reconstruction. Gradients flow
through the soft path: each sub-vector becomes Σ_i a_i c_i with
a = softmax(−‖x_m − c_i‖ / τ).
"""
from typing import Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .codebook import Codebook, assign_codes, reconstruct
from .errors import DimensionError, StateError
from .numerics import squared_distances

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.05


class Temperature(BaseModel):
    tau: float = Field(DEFAULT_TAU, gt=0)


class EncoderForward(BaseModel):
    """Hard output plus the soft-path cache needed by encode_backward.

    Cache fields are None when the forward ran without keeping them.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    output: np.ndarray
    hard_codes: np.ndarray
    soft_weights: Optional[np.ndarray] = None
    distances: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None
    centroids: Optional[np.ndarray] = None
    tau: float = DEFAULT_TAU


def _softmax_neg(distances: np.ndarray, tau: float) -> np.ndarray:
    z = -distances / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_assign(x_m: np.ndarray, C_m: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over negative L2 distances from one sub-vector to the K centroids"""
    tau = Temperature(tau=tau).tau
    x_m = np.asarray(x_m, dtype=np.float64).reshape(1, -1)
    d = np.sqrt(squared_distances(x_m, np.asarray(C_m, dtype=np.float64)))[0]
    return _softmax_neg(d, tau)


def _soft_path(x: np.ndarray, centroids: np.ndarray, tau: float):
    N = x.shape[0]
    M, K, sub = centroids.shape
    distances = np.empty((N, M, K))
    weights = np.empty((N, M, K))
    soft = np.empty((N, M * sub))
    for m in range(M):
        xm = x[:, m * sub:(m + 1) * sub]
        distances[:, m, :] = np.sqrt(squared_distances(xm, centroids[m]))
        weights[:, m, :] = _softmax_neg(distances[:, m, :], tau)
        soft[:, m * sub:(m + 1) * sub] = weights[:, m, :] @ centroids[m]
    return distances, weights, soft


def _check_input(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise DimensionError(f"Encoder input has shape {x.shape}, codebook expects dimension {codebook.dim}")
    return x


def encode_forward(x: np.ndarray, codebook: Codebook, tau: float = DEFAULT_TAU,
                   keep_cache: bool = True) -> EncoderForward:
    # soft + stop_gradient(hard - soft) equals hard; the hard value is stored directly
    # so the output is bit-identical to pq_decode(pq_encode(x)).
    tau = Temperature(tau=tau).tau
    x = _check_input(x, codebook)
    codes = assign_codes(x, codebook)
    output = reconstruct(codes, codebook)
    if not keep_cache:
        return EncoderForward(output=output, hard_codes=codes, tau=tau)
    distances, weights, _ = _soft_path(x, codebook.centroids, tau)
    return EncoderForward(
        output=output,
        hard_codes=codes,
        soft_weights=weights,
        distances=distances,
        inputs=x,
        centroids=codebook.centroids,
        tau=tau,
    )


def soft_reconstruct(x: np.ndarray, codebook: Codebook, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Value of the soft path alone, Σ_i a_mi c_mi per subspace"""
    tau = Temperature(tau=tau).tau
    x = _check_input(x, codebook)
    return _soft_path(x, codebook.centroids, tau)[2]


def encode_backward(fwd: EncoderForward, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the soft path w.r.t. centroids (M, K, D') and inputs (N, D).

    The norm's gradient at zero distance is taken as 0.
    """
    if fwd.soft_weights is None or fwd.distances is None or fwd.inputs is None or fwd.centroids is None:
        raise StateError("encode_backward needs a forward pass run with keep_cache=True")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != fwd.inputs.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match input {fwd.inputs.shape}")

    C = fwd.centroids
    M, K, sub = C.shape
    tau = fwd.tau
    grad_c = np.zeros_like(C)
    grad_x = np.zeros_like(fwd.inputs)

    for m in range(M):
        cols = slice(m * sub, (m + 1) * sub)
        X = fwd.inputs[:, cols]
        G = grad_out[:, cols]
        A = fwd.soft_weights[:, m, :]
        dist = fwd.distances[:, m, :]
        Cm = C[m]

        gc = G @ Cm.T                                   # g · c_i
        gs = np.einsum("nd,nd->n", G, A @ Cm)           # g · soft
        d_dist = -(A * (gc - gs[:, None])) / tau        # dL/dd_i
        safe = np.where(dist > 0, dist, 1.0)
        w = np.where(dist > 0, d_dist / safe, 0.0)

        grad_x[:, cols] = w.sum(axis=1)[:, None] * X - w @ Cm
        grad_c[m] = A.T @ G - (w.T @ X - w.sum(axis=0)[:, None] * Cm)

    return grad_c, grad_x
