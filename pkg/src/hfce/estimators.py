"""Linear estimation and the NMSE metric.

The initializer is a scaled pseudoinverse of the stacked combiner, built
without any channel knowledge. The scale eta is fixed by the de-correlation
condition tr(I - W W_RF^H) = 0, which in the real domain gives
eta = (2*S*S_bar) / tr((W_RF^H)^+ W_RF^H), i.e. real input dimension over
operator rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import NumericalError, ShapeError
from .measurement import MeasurementOperator, Observation

NMSE_DB_FLOOR = -400.0  # reported floor for an exactly zero error


@dataclass(frozen=True)
class LinearInitializer:
    """Scaled pseudoinverse W = eta * (W_RF^H)^+ in the real domain."""

    matrix: np.ndarray   # (2*S*S_bar, 2*S*N_p)
    eta: float
    condition: float     # sigma_max / sigma_min of the real operator


def _pinv_full_row_rank(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Rank-revealing pseudoinverse; rejects row-rank-deficient operators."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    tol = np.finfo(a.dtype).eps * max(a.shape) * s[0]
    rank = int(np.sum(s > tol))
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if rank < a.shape[0]:
        raise NumericalError(
            f"combiner operator is rank deficient: rank {rank} < {a.shape[0]} rows "
            f"(condition number {cond:.3e})"
        )
    return (vt.T / s) @ u.T, cond


def build_initializer(op: MeasurementOperator) -> LinearInitializer:
    """Construct, validate, and cache the initializer for a combiner draw.

    The pseudoinverse is taken on the real-expanded operator. Single-bit
    combiners have zero imaginary part, making the expansion block-diagonal
    in its two halves; that structure is exploited to factor a matrix of
    half the size, which is exactly equivalent.
    """
    if op._initializer_cache is not None:
        return op._initializer_cache

    a = op.real
    if not np.any(op.stacked.imag):
        half, cond = _pinv_full_row_rank(op.stacked.real)
        pinv = np.block([
            [half, np.zeros_like(half)],
            [np.zeros_like(half), half],
        ])
    else:
        pinv, cond = _pinv_full_row_rank(a)

    trace = float(np.sum(pinv * a.T))  # tr(pinv @ a) without the full product
    eta = a.shape[1] / trace
    init = LinearInitializer(matrix=eta * pinv, eta=eta, condition=cond)

    residual = decorrelation_residual(init, op)
    if abs(residual) > 1e-8 * a.shape[1]:
        raise NumericalError(
            f"de-correlation residual {residual:.3e} exceeds tolerance"
        )
    op._initializer_cache = init
    return init


def decorrelation_residual(init: LinearInitializer, op: MeasurementOperator) -> float:
    """tr(I - W W_RF^H) in the real domain; zero for a valid initializer."""
    return float(op.real.shape[1] - np.sum(init.matrix * op.real.T))


def ls_estimate(y: Union[Observation, np.ndarray],
                init: LinearInitializer) -> np.ndarray:
    """Linear estimate h_hat_0 = W y, applied per subcarrier row if wideband."""
    arr = y.y if isinstance(y, Observation) else np.asarray(y)
    if arr.shape[-1] != init.matrix.shape[1]:
        raise ShapeError(f"observation length {arr.shape[-1]} does not match "
                         f"initializer input {init.matrix.shape[1]}")
    return arr @ init.matrix.T


def nmse(h_true: np.ndarray, h_est: np.ndarray) -> float:
    """||h - h_hat||^2 / ||h||^2, averaged over any leading sample axes."""
    vals = nmse_per_sample(h_true, h_est)
    return float(np.mean(vals))


def nmse_per_sample(h_true: np.ndarray, h_est: np.ndarray) -> np.ndarray:
    """Per-sample NMSE; the trailing axis is the vector dimension."""
    h_true = np.asarray(h_true)
    h_est = np.asarray(h_est)
    if h_true.shape != h_est.shape:
        raise ShapeError(f"shape mismatch {h_true.shape} vs {h_est.shape}")
    num = np.sum(np.abs(h_true - h_est) ** 2, axis=-1)
    den = np.sum(np.abs(h_true) ** 2, axis=-1)
    if np.any(den == 0):
        raise ValueError("NMSE undefined for a zero-norm reference")
    return num / den


def nmse_db(value: float) -> float:
    """10*log10 with a finite floor standing in for -inf."""
    if value <= 0:
        return NMSE_DB_FLOOR
    return max(10.0 * np.log10(value), NMSE_DB_FLOOR)
