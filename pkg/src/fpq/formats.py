"""ExMy mini-float formats and their bit-exact emulation.

A format has one sign bit, ``e`` exponent bits and ``m`` mantissa bits. The
integer exponent bias of a conventional float is folded into a real-valued
tensor-wise bias ``b``; the scale applied to the unit grid is ``2**-b``.

Unit grid (bias 0), non-negative half::

    subnormal band  f * 2**(1-m)                 f = 0 .. 2**m - 1
    normal binades  2**p * (1 + f / 2**m)        p = 1 .. 2**e - 1

so the largest magnitude is ``(2 - 2**-m) * 2**(2**e - 1)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import QuantDomainError

_FORMAT_RE = re.compile(r"^E(\d+)M(\d+)$", re.IGNORECASE)


@dataclass(frozen=True, order=True)
class FpFormat:
    exponent_bits: int
    mantissa_bits: int

    def __post_init__(self) -> None:
        if self.exponent_bits < 1:
            raise QuantDomainError(f"exponent_bits must be >= 1, got {self.exponent_bits}")
        if self.mantissa_bits < 0:
            raise QuantDomainError(f"mantissa_bits must be >= 0, got {self.mantissa_bits}")

    @property
    def bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def name(self) -> str:
        return f"E{self.exponent_bits}M{self.mantissa_bits}"

    @property
    def max_unit(self) -> float:
        """Largest grid magnitude at bias 0."""
        e, m = self.exponent_bits, self.mantissa_bits
        return (2.0 - 2.0**-m) * 2.0 ** (2**e - 1)

    @classmethod
    def parse(cls, text: str) -> "FpFormat":
        match = _FORMAT_RE.match(text.strip())
        if match is None:
            raise QuantDomainError(f"not a format name: {text!r} (expected e.g. 'E2M1')")
        return cls(int(match.group(1)), int(match.group(2)))

    def __str__(self) -> str:
        return self.name


def format_space(bit_width: int) -> list[FpFormat]:
    """All ``bit_width``-bit formats with at least one exponent bit, by ascending e."""
    if bit_width < 3:
        raise QuantDomainError(f"bit_width must be >= 3, got {bit_width}")
    return [FpFormat(e, bit_width - 1 - e) for e in range(1, bit_width)]


def scale_from_bias(bias):
    """Return ``2**-bias``.

    The bias is split into integer and fractional parts so that shifting it by
    an integer scales the result by an exact power of two.
    """
    b = np.asarray(bias, dtype=np.float64)
    whole = np.floor(b)
    out = np.ldexp(np.exp2(-(b - whole)), (-whole).astype(np.int64))
    return float(out) if out.ndim == 0 else out


def clip_max(fmt: FpFormat, bias):
    """Clipping maximum ``(2 - 2**-m) * 2**(2**e - bias - 1)``; the minimum is its negative."""
    out = scale_from_bias(bias) * fmt.max_unit
    return float(out) if np.ndim(out) == 0 else out


def bias_from_clip_max(fmt: FpFormat, qmax: float) -> float:
    if not (qmax > 0 and math.isfinite(qmax)):
        raise QuantDomainError(f"clipping maximum must be positive and finite, got {qmax}")
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    return 2**e - math.log2(qmax) + math.log2(2.0 - 2.0**-m) - 1


def unit_grid(fmt: FpFormat) -> np.ndarray:
    """Sorted non-negative representable magnitudes at bias 0."""
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    frac = np.arange(2**m, dtype=np.float64)
    sub = frac * 2.0 ** (1 - m)
    normals = [2.0**p * (1.0 + frac / 2**m) for p in range(1, 2**e)]
    return np.concatenate([sub, *normals])


def step_size(x: float, fmt: FpFormat, bias: float) -> float:
    """Quantization step (in unit-grid scale) for a clipped value ``x``."""
    m = fmt.mantissa_bits
    if x == 0:
        return 2.0 ** (1 - m)
    p = math.floor(math.log2(abs(x)) + bias)
    if p >= 1:
        return 2.0 ** (p - m)
    return 2.0 ** (1 - m)


def _unit_round(u: np.ndarray, fmt: FpFormat) -> np.ndarray:
    # u >= 0, already clipped to max_unit. frexp gives floor(log2 u) exactly.
    m = fmt.mantissa_bits
    _, ex = np.frexp(u)
    p = ex - 1
    step_exp = np.where(p >= 1, p - m, 1 - m)
    v = np.ldexp(1.0, step_exp)
    return np.rint(u / v) * v


def fake_quantize(x, fmt: FpFormat, bias) -> np.ndarray:
    """Quantize ``x`` onto the grid of ``fmt`` scaled by ``2**-bias``.

    ``bias`` broadcasts against ``x``. Values are clipped to the format range,
    then rounded to the nearest multiple of the local step, ties to the even
    multiple. The step is picked in the unit domain; the final choice between
    the two bracketing grid points is made on distances in the input domain,
    which are exact near a tie, so the result is the true nearest grid value.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantDomainError("cannot quantize non-finite values")
    m = fmt.mantissa_bits
    alpha = np.asarray(scale_from_bias(bias), dtype=np.float64)
    top = fmt.max_unit
    qmax = alpha * top
    ax = np.minimum(np.abs(x), qmax)
    u = np.minimum(ax / alpha, top)
    _, ex = np.frexp(u)
    p = ex - 1
    v = np.ldexp(1.0, np.where(p >= 1, p - m, 1 - m))
    n = np.floor(u / v)
    lo = alpha * (n * v)
    hi = alpha * ((n + 1) * v)
    d_lo = np.abs(ax - lo)
    d_hi = np.abs(hi - ax)
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (n % 2 == 1))
    return np.sign(x) * np.where(take_hi, hi, lo)


def encode(x, fmt: FpFormat, bias) -> np.ndarray:
    """Integer bit patterns ``sign | exponent | mantissa`` of quantized ``x``."""
    q = fake_quantize(x, fmt, bias)
    alpha = np.asarray(scale_from_bias(bias), dtype=np.float64)
    g = np.abs(q) / alpha
    g = _unit_round(np.minimum(g, fmt.max_unit), fmt)
    m = fmt.mantissa_bits
    _, ex = np.frexp(g)
    p = ex - 1
    normal = p >= 1
    exp_field = np.where(normal, p, 0)
    mant = np.where(normal, g / np.ldexp(1.0, p - m) - 2**m, g / 2.0 ** (1 - m))
    sign = (q < 0).astype(np.int64)
    code = (sign << (fmt.exponent_bits + m)) | (exp_field.astype(np.int64) << m) | mant.astype(np.int64)
    return code


def decode(code, fmt: FpFormat, bias) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    mant = code & (2**m - 1)
    exp_field = (code >> m) & (2**e - 1)
    sign = (code >> (e + m)) & 1
    mag = np.where(
        exp_field == 0,
        mant * 2.0 ** (1 - m),
        np.ldexp(1.0 + mant / 2**m, exp_field),
    )
    return np.where(sign == 1, -1.0, 1.0) * (np.asarray(scale_from_bias(bias)) * mag)


def quantize_value(x: float, scheme) -> float:
    """Quantize one scalar under a scheme with a scalar ``bias``."""
    if not math.isfinite(x):
        raise QuantDomainError(f"cannot quantize non-finite value {x}")
    if x == 0:
        return 0.0
    return float(fake_quantize(x, scheme.format, scheme.bias))
