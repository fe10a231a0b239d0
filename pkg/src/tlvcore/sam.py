"""Sensor-Aware Modulator, sensor posterior, decoupling loss and gradient reversal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import _rng_for, gaussian_param
from .errors import ConfigurationError, DomainError, ShapeError
from .numerics import Parameter, Tensor

DEFAULT_TAU_DL = 0.05


@dataclass
class SamParams:
    """Routing matrix (S, d) and sensor centroids (S, d)."""

    W_r: Parameter
    centroids: Parameter
    tau_dl: float = DEFAULT_TAU_DL
    lambda_grl: float = 1.0

    def __post_init__(self):
        if self.W_r.shape[0] < 1:
            raise ConfigurationError("need at least one sensor")
        if self.W_r.shape != self.centroids.shape:
            raise ShapeError("W_r and centroids must both be (S, d)")
        if self.tau_dl <= 0:
            raise ConfigurationError("tau_dl must be positive")

    @property
    def num_sensors(self) -> int:
        return self.W_r.shape[0]

    @property
    def dim(self) -> int:
        return self.W_r.shape[1]


def init_sam_params(num_sensors: int, dim: int, seed: int) -> dict[str, Parameter]:
    w_r = gaussian_param("sam.W_r", (num_sensors, dim), seed)
    c = _rng_for("sam.centroids", seed).standard_normal((num_sensors, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return {"sam.W_r": w_r, "sam.centroids": Parameter("sam.centroids", c)}


def _rows(h) -> tuple[Tensor, bool]:
    h = nx.as_tensor(h)
    if h.ndim == 1:
        return nx.reshape(h, (1, h.shape[0])), True
    return h, False


def route(h, params: SamParams) -> Tensor:
    """Routing weights softmax(W_r h) for one feature (d,) or a batch (N, d)."""
    h2, single = _rows(h)
    if h2.shape[-1] != params.dim:
        raise ShapeError(f"feature dim {h2.shape[-1]} != SAM dim {params.dim}")
    r = nx.softmax_temp(nx.linear(h2, params.W_r), 1.0)
    return nx.reshape(r, (params.num_sensors,)) if single else r


def inference_sensor(r) -> np.ndarray:
    """argmax of routing weights; numpy argmax already breaks ties to the lowest index."""
    return np.argmax(nx.as_tensor(r).data, axis=-1)


def modulate(h, r, s) -> Tensor:
    """h + r_s * h, with ``s`` a sensor index per row (or one index for a vector)."""
    h2, single = _rows(h)
    r2, _ = _rows(r)
    s = np.atleast_1d(np.asarray(s, dtype=np.int64))
    num_sensors = r2.shape[-1]
    if np.any(s < 0) or np.any(s >= num_sensors):
        raise DomainError(f"sensor id out of range [0, {num_sensors})")
    if s.shape[0] != h2.shape[0] or r2.shape[0] != h2.shape[0]:
        raise ShapeError("h, r and s must describe the same number of rows")
    r_s = nx.reshape(nx.pick(r2, s), (h2.shape[0], 1))
    out = nx.add(h2, nx.mul(r_s, h2))
    return nx.reshape(out, (h2.shape[1],)) if single else out


def sensor_logits(h, params: SamParams) -> Tensor:
    h2, _ = _rows(h)
    if h2.shape[-1] != params.dim:
        raise ShapeError(f"feature dim {h2.shape[-1]} != SAM dim {params.dim}")
    return nx.cosine_matrix(h2, params.centroids)


def sensor_posterior(h, params: SamParams) -> Tensor:
    """p(s | h) = softmax over cosine similarity to each centroid at ``tau_dl``."""
    h2, single = _rows(h)
    p = nx.softmax_temp(sensor_logits(h2, params), params.tau_dl)
    return nx.reshape(p, (params.num_sensors,)) if single else p


def decoupling_loss(h, sensor_ids, params: SamParams) -> Tensor:
    """Mean negative log-likelihood of the true sensor under :func:`sensor_posterior`."""
    h2, _ = _rows(h)
    s = np.atleast_1d(np.asarray(sensor_ids, dtype=np.int64))
    if h2.shape[0] == 0 or s.size == 0:
        raise DomainError("decoupling loss of an empty batch")
    if s.shape[0] != h2.shape[0]:
        raise ShapeError("one sensor id per feature row required")
    if np.any(s < 0) or np.any(s >= params.num_sensors):
        raise DomainError(f"sensor id out of range [0, {params.num_sensors})")
    logp = nx.log_softmax_temp(sensor_logits(h2, params), params.tau_dl)
    return nx.mul(nx.mean(nx.pick(logp, s)), -1.0)


def grad_reverse(x, lambda_grl: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lambda_grl``."""
    if not lambda_grl > 0:
        raise ConfigurationError("lambda_grl must be positive")
    x = nx.as_tensor(x)
    scale = -float(lambda_grl)
    return Tensor(x.data, (x,), lambda g: (g * scale,))
