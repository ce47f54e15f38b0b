"""Fake-quantized matrix multiplication, per-channel and pre-shifted forms."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .quantizer import (
    ChannelShiftedScheme,
    Granularity,
    IntScheme,
    QuantScheme,
    quantize_tensor,
    reparam_weight_rows,
)


class LayerKind(str, enum.Enum):
    WEIGHT = "weight"  # activation @ weight (fully-connected)
    ACT_ACT = "act-act"  # activation @ activation (e.g. attention scores)


# Scales must be constant along the contraction axis: rows of X, columns of Y.
_ACT_GRANULARITIES = {Granularity.TENSOR, Granularity.TOKEN}
_WEIGHT_GRANULARITIES = {Granularity.TENSOR, Granularity.CHANNEL}


@dataclass(frozen=True, eq=False)
class MatmulPlan:
    act: object
    weight: object
    kind: LayerKind = LayerKind.WEIGHT

    def __post_init__(self) -> None:
        kind = LayerKind(self.kind)
        if isinstance(self.act, ChannelShiftedScheme):
            if kind is not LayerKind.WEIGHT:
                raise ContractError("pre-shifted activation schemes only apply to weight layers")
        elif isinstance(self.act, (QuantScheme, IntScheme)):
            if Granularity(self.act.granularity) not in _ACT_GRANULARITIES:
                raise ContractError(f"activation granularity {self.act.granularity} breaks efficient matmul")
        else:
            raise ContractError(f"unsupported activation scheme {type(self.act).__name__}")
        if not isinstance(self.weight, (QuantScheme, IntScheme)):
            raise ContractError(f"unsupported weight scheme {type(self.weight).__name__}")
        if Granularity(self.weight.granularity) not in _WEIGHT_GRANULARITIES:
            raise ContractError(f"weight granularity {self.weight.granularity} breaks efficient matmul")


def _check_inner(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ContractError(f"cannot multiply shapes {x.shape} and {y.shape}")


def matmul_quantized(x, y, plan: MatmulPlan) -> np.ndarray:
    """Quantize both operands per ``plan`` and multiply in double precision.

    With a :class:`ChannelShiftedScheme` activation this is the per-channel
    reference form, each channel quantized with its own effective bias.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_inner(x, y)
    return plan.act.quantize(x) @ plan.weight.quantize(y)


@dataclass(frozen=True, eq=False)
class PreshiftedWeight:
    """Quantized weight with the activation channel offsets folded into its rows."""

    values: np.ndarray
    channel_bias: np.ndarray
    weight_scheme: QuantScheme


def prepare_preshifted_weight(weight, scheme: ChannelShiftedScheme, weight_scheme: QuantScheme) -> PreshiftedWeight:
    """One-time calibration step: ``beta * Q(W)``."""
    wq = weight_scheme.quantize(np.asarray(weight, dtype=np.float64))
    return PreshiftedWeight(reparam_weight_rows(wq, scheme), scheme.channel_bias.copy(), weight_scheme)


def matmul_preshifted(x, w_pre: PreshiftedWeight, scheme: ChannelShiftedScheme) -> np.ndarray:
    """Inference form: activations use only the shared bias ``rho``.

    Channel ``j`` of ``x`` is brought into the shared exponent range by
    ``2**channel_bias[j]`` (the hardware exponent shift) and quantized with
    ``rho``; the compensating ``2**-channel_bias[j]`` already sits in the weight.
    """
    if not isinstance(w_pre, PreshiftedWeight):
        raise ContractError("weight carries no reparameterization metadata; use prepare_preshifted_weight")
    if not np.array_equal(w_pre.channel_bias, scheme.channel_bias):
        raise ContractError("weight was reparameterized with different channel offsets")
    x = np.asarray(x, dtype=np.float64)
    _check_inner(x, w_pre.values)
    shifted = x * np.ldexp(1.0, scheme.channel_bias)[None, :]
    xq = quantize_tensor(shifted, scheme.format, scheme.rho, Granularity.TENSOR)
    return xq @ w_pre.values
