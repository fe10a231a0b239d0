"""Pairwise symmetric InfoNCE and the total training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, PreconditionError, ShapeError
from .numerics import Tensor
from .sam import SamParams, decoupling_loss, grad_reverse

DEFAULT_TAU_CL = 0.05
_UNIT_TOL = 1e-10

PAIRS = (("T", "V"), ("T", "L"), ("V", "L"))


def _check_unit_rows(z: np.ndarray, name: str) -> None:
    norms = np.sqrt((z * z).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise PreconditionError(f"{name} rows are not unit-norm")


def pair_infonce(z_x, z_y, tau: float = DEFAULT_TAU_CL) -> Tensor:
    """Symmetric InfoNCE between row-aligned unit embeddings.

    With S = Z_x Z_y^T / tau the loss is the mean of the row-wise and
    column-wise cross-entropies of S against the diagonal. The gradient
    w.r.t. S is ((softmax_rows(S) - I) + (softmax_cols(S) - I)) / 2N.
    """
    z_x, z_y = nx.as_tensor(z_x), nx.as_tensor(z_y)
    if z_x.ndim != 2 or z_x.shape != z_y.shape:
        raise ShapeError(f"embedding batches must be equal (N, d), got {z_x.shape} and {z_y.shape}")
    n = z_x.shape[0]
    if n < 1:
        raise ShapeError("empty embedding batch")
    if not tau > 0:
        raise ConfigurationError("tau must be positive")
    _check_unit_rows(z_x.data, "Z_x")
    _check_unit_rows(z_y.data, "Z_y")
    xd, yd = z_x.data, z_y.data
    s = (xd @ yd.T) / tau
    diag = np.diagonal(s)
    row_max = s.max(axis=1, keepdims=True)
    col_max = s.max(axis=0, keepdims=True)
    e_row = np.exp(s - row_max)
    e_col = np.exp(s - col_max)
    row_lse = np.log(e_row.sum(axis=1)) + row_max[:, 0]
    col_lse = np.log(e_col.sum(axis=0)) + col_max[0]
    loss = ((row_lse - diag).sum() + (col_lse - diag).sum()) / (2 * n)

    def backward(g):
        p_row = e_row / e_row.sum(axis=1, keepdims=True)
        p_col = e_col / e_col.sum(axis=0, keepdims=True)
        gs = (p_row + p_col - 2.0 * np.eye(n)) * (g / (2 * n * tau))
        return gs @ yd, gs.T @ xd

    return Tensor(loss, (z_x, z_y), backward)


@dataclass
class LossParts:
    total: float
    tv: float
    tl: float
    vl: float
    dl: float

    @property
    def scl(self) -> float:
        return self.tv + self.tl + self.vl


def total_loss(
    z: dict,
    h_tactile,
    sensor_ids,
    sam: SamParams,
    lambda_dl: float,
    tau_cl: float = DEFAULT_TAU_CL,
    reverse: bool = True,
) -> tuple[Tensor, LossParts]:
    """L_TV + L_TL + L_VL + lambda_dl * L_DL.

    ``z`` maps "T"/"V"/"L" to (N, d) unit embeddings. The decoupling term is
    evaluated on ``h_tactile`` passed through gradient reversal, so the
    encoder receives the negated classifier gradient. ``reverse=False``
    drops the reversal, which is what a finite-difference check measures.
    """
    if lambda_dl < 0:
        raise ConfigurationError("lambda_dl must be non-negative")
    pair_losses = [pair_infonce(z[a], z[b], tau_cl) for a, b in PAIRS]
    h_dl = grad_reverse(h_tactile, sam.lambda_grl) if reverse else nx.as_tensor(h_tactile)
    l_dl = decoupling_loss(h_dl, sensor_ids, sam)
    scl = nx.add(nx.add(pair_losses[0], pair_losses[1]), pair_losses[2])
    total = nx.add(scl, nx.mul(l_dl, float(lambda_dl)))
    parts = LossParts(
        total=float(total.data),
        tv=float(pair_losses[0].data),
        tl=float(pair_losses[1].data),
        vl=float(pair_losses[2].data),
        dl=float(l_dl.data),
    )
    return total, parts
