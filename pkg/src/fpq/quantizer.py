"""Whole-tensor quantization: granularities, MinMax init, INT baseline, pre-shift split.

Tensors are 2-D ``(rows, columns)`` arrays. For activations a row is a token and
a column is a channel; for a weight used as ``X @ W`` a column is an output
channel and row ``j`` multiplies activation channel ``j``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, QuantDomainError
from .formats import FpFormat, bias_from_clip_max, clip_max, fake_quantize, format_space, scale_from_bias


class Granularity(str, enum.Enum):
    TENSOR = "tensor"
    TOKEN = "token"  # one bias per row
    CHANNEL = "channel"  # one bias per column


def _as_2d(tensor) -> np.ndarray:
    x = np.asarray(tensor, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ContractError(f"expected a 2-D tensor, got shape {x.shape}")
    return x


def group_absmax(tensor, granularity: Granularity):
    x = np.asarray(tensor, dtype=np.float64)
    if x.size == 0:
        raise QuantDomainError("empty tensor")
    granularity = Granularity(granularity)
    if granularity is Granularity.TENSOR:
        return float(np.max(np.abs(x)))
    x = _as_2d(x)
    axis = 1 if granularity is Granularity.TOKEN else 0
    return np.max(np.abs(x), axis=axis)


def _bias_for_max(fmt: FpFormat, qmax: float) -> float:
    # Zero groups quantize to zero under any bias; 0 keeps the scale at 1.
    return 0.0 if qmax == 0 else bias_from_clip_max(fmt, qmax)


def minmax_bias(tensor, fmt: FpFormat, granularity: Granularity = Granularity.TENSOR):
    """Bias whose clipping maximum equals the absolute maximum of each group."""
    amax = group_absmax(tensor, granularity)
    if np.ndim(amax) == 0:
        return _bias_for_max(fmt, amax)
    return np.array([_bias_for_max(fmt, float(a)) for a in amax])


def broadcast_bias(bias, shape: tuple[int, ...], granularity: Granularity) -> np.ndarray:
    """Reshape a group bias so it broadcasts against a tensor of ``shape``."""
    granularity = Granularity(granularity)
    b = np.asarray(bias, dtype=np.float64)
    if granularity is Granularity.TENSOR:
        if b.ndim != 0:
            raise ContractError(f"per-tensor quantization needs a scalar bias, got shape {b.shape}")
        return b
    if len(shape) != 2:
        raise ContractError(f"{granularity.value} granularity needs a 2-D tensor, got shape {shape}")
    groups = shape[0] if granularity is Granularity.TOKEN else shape[1]
    if b.shape != (groups,):
        raise ContractError(
            f"{granularity.value} granularity needs {groups} biases, got shape {b.shape}"
        )
    return b[:, None] if granularity is Granularity.TOKEN else b[None, :]


def quantize_tensor(tensor, fmt: FpFormat, bias, granularity: Granularity = Granularity.TENSOR) -> np.ndarray:
    x = np.asarray(tensor, dtype=np.float64)
    return fake_quantize(x, fmt, broadcast_bias(bias, x.shape, granularity))


def int_scale(tensor, bits: int, granularity: Granularity = Granularity.TENSOR):
    """MinMax scale ``max|X| / (2**(bits-1) - 1)`` per group."""
    return group_absmax(tensor, granularity) / (2 ** (bits - 1) - 1)


def quantize_tensor_int(tensor, bits: int, granularity: Granularity = Granularity.TENSOR, scale=None) -> np.ndarray:
    """Symmetric signed uniform quantization; ``scale`` defaults to MinMax.

    Groups with zero scale come back as zeros.
    """
    if bits < 2:
        raise QuantDomainError(f"INT quantization needs bits >= 2, got {bits}")
    x = np.asarray(tensor, dtype=np.float64)
    if scale is None:
        scale = int_scale(x, bits, granularity)
    alpha = broadcast_bias(scale, x.shape, granularity)
    qmax = 2 ** (bits - 1) - 1
    safe = np.where(alpha == 0, 1.0, alpha)
    q = safe * np.rint(np.clip(x / safe, -qmax, qmax))
    return np.where(alpha == 0, 0.0, q)


@dataclass(frozen=True, eq=False)
class QuantScheme:
    """Format plus a bias per granularity group (scalar for per-tensor)."""

    format: FpFormat
    bias: object
    granularity: Granularity = Granularity.TENSOR

    @property
    def scale(self):
        return scale_from_bias(self.bias)

    @property
    def clip_max(self):
        return clip_max(self.format, self.bias)

    def quantize(self, x) -> np.ndarray:
        return quantize_tensor(x, self.format, self.bias, self.granularity)

    def to_json(self) -> dict:
        return {
            "type": "fp",
            "format": self.format.name,
            "granularity": Granularity(self.granularity).value,
            "bias": np.asarray(self.bias).tolist(),
        }


@dataclass(frozen=True, eq=False)
class IntScheme:
    bits: int
    granularity: Granularity = Granularity.TENSOR

    def quantize(self, x) -> np.ndarray:
        return quantize_tensor_int(x, self.bits, self.granularity)

    def to_json(self) -> dict:
        return {"type": "int", "bits": self.bits, "granularity": Granularity(self.granularity).value}


@dataclass(frozen=True, eq=False)
class ChannelShiftedScheme:
    """Tensor-wise real bias ``rho`` plus integer per-channel offsets.

    Channel ``j`` is quantized with bias ``rho + channel_bias[j]``.
    """

    format: FpFormat
    rho: float
    channel_bias: np.ndarray

    def __post_init__(self) -> None:
        cb = np.asarray(self.channel_bias)
        hi = 2**self.format.exponent_bits - 1
        if cb.ndim != 1 or np.any(cb < 0) or np.any(cb > hi) or np.any(cb != np.round(cb)):
            raise ContractError(f"channel_bias must be integers in [0, {hi}]")
        object.__setattr__(self, "channel_bias", cb.astype(np.int64))

    @property
    def effective_bias(self) -> np.ndarray:
        return self.rho + self.channel_bias

    @property
    def beta(self) -> np.ndarray:
        """Per-row weight multipliers ``2**-channel_bias``."""
        return np.ldexp(1.0, -self.channel_bias)

    def quantize(self, x) -> np.ndarray:
        # Same as quantizing channel j with bias rho + channel_bias[j], but the
        # integer part is applied as an exact power-of-two shift instead of
        # going through the rounded sum of biases.
        x = np.asarray(x, dtype=np.float64)
        broadcast_bias(self.channel_bias, x.shape, Granularity.CHANNEL)
        cb = self.channel_bias[None, :]
        return np.ldexp(fake_quantize(np.ldexp(x, cb), self.format, self.rho), -cb)

    def to_json(self) -> dict:
        return {
            "type": "fp-preshifted",
            "format": self.format.name,
            "rho": float(self.rho),
            "channel_bias": self.channel_bias.tolist(),
        }


def per_channel_bias(act, fmt: FpFormat) -> np.ndarray:
    x = np.asarray(act, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"per-channel bias needs a 2-D activation, got shape {x.shape}")
    return minmax_bias(x, fmt, Granularity.CHANNEL)


def split_channel_bias(biases, rho: float, fmt: FpFormat) -> ChannelShiftedScheme:
    """Round ``biases - rho`` to integers clipped to ``[0, 2**e - 1]``."""
    offsets = np.clip(np.rint(np.asarray(biases, dtype=np.float64) - rho), 0, 2**fmt.exponent_bits - 1)
    return ChannelShiftedScheme(fmt, float(rho), offsets.astype(np.int64))


def reparam_weight_rows(weight, scheme: ChannelShiftedScheme) -> np.ndarray:
    """Fold the channel offsets into the weight: row ``j`` times ``2**-channel_bias[j]``."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != scheme.channel_bias.shape[0]:
        raise ContractError(
            f"weight rows ({w.shape[0] if w.ndim else 0}) must match "
            f"{scheme.channel_bias.shape[0]} activation channels"
        )
    return w * scheme.beta[:, None]


def error_scan(tensor, bit_width: int, granularity: Granularity = Granularity.TENSOR) -> dict[str, float]:
    """MinMax MSE of every FP format of ``bit_width`` bits plus the INT baseline."""
    x = np.asarray(tensor, dtype=np.float64)
    out = {}
    for fmt in format_space(bit_width):
        q = quantize_tensor(x, fmt, minmax_bias(x, fmt, granularity), granularity)
        out[fmt.name] = float(np.mean((q - x) ** 2))
    q = quantize_tensor_int(x, bit_width, granularity)
    out[f"INT{bit_width}"] = float(np.mean((q - x) ** 2))
    return out
