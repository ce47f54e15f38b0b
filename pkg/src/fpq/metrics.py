"""Layer reconstruction objectives.

Both metrics compare a quantized layer output with the full-precision one and
are only ever compared within a layer. Conventions:

* ``mse``: mean of squared differences over all elements.
* ``fisher``: squared differences weighted by squared output gradients,
  summed over the last (feature) axis and averaged over the remaining
  (sample) axes. With unit gradients this is ``mse * o.shape[-1]``.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ContractError, MetricUnavailableError


class MetricKind(str, enum.Enum):
    MSE = "mse"
    FISHER = "fisher"


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ContractError(f"shape mismatch: {sorted(shapes)}")


def mse_metric(o_hat, o_ref) -> float:
    o_hat = np.asarray(o_hat, dtype=np.float64)
    o_ref = np.asarray(o_ref, dtype=np.float64)
    _same_shape(o_hat, o_ref)
    return float(np.mean((o_hat - o_ref) ** 2))


def fisher_metric(o_hat, o_ref, grad) -> float:
    if grad is None:
        raise MetricUnavailableError("fisher metric needs output gradients")
    o_hat = np.asarray(o_hat, dtype=np.float64)
    o_ref = np.asarray(o_ref, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _same_shape(o_hat, o_ref, grad)
    weighted = grad**2 * (o_hat - o_ref) ** 2
    samples = weighted.size // weighted.shape[-1] if weighted.ndim else 1
    return float(weighted.sum() / samples)


def fisher_unit_constant(shape: tuple[int, ...]) -> int:
    """``fisher_metric / mse_metric`` when every gradient is 1."""
    return shape[-1] if shape else 1


def reconstruction_metric(kind: MetricKind, o_hat, o_ref, grad=None) -> float:
    if MetricKind(kind) is MetricKind.FISHER:
        return fisher_metric(o_hat, o_ref, grad)
    return mse_metric(o_hat, o_ref)
