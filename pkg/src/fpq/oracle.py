"""Brute-force reference quantizer used to cross-check :func:`fake_quantize`.

The reference enumerates every code of a format, decodes it, and picks the
nearest scaled value by direct distance comparison. It shares nothing with
the step-size path except the definition of the scale ``2**-bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import FpFormat, scale_from_bias


def code_table(fmt: FpFormat) -> tuple[np.ndarray, np.ndarray]:
    """Signed unit values and their mantissa fields, sorted by value.

    Zero appears once (the +0 code).
    """
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    values, mants = [], []
    for exp_field in range(2**e):
        for mant in range(2**m):
            if exp_field == 0:
                mag = mant * 2.0 ** (1 - m)
            else:
                mag = 2.0**exp_field * (1 + mant / 2**m)
            values.append(mag)
            mants.append(mant)
            if mag != 0:
                values.append(-mag)
                mants.append(mant)
    values = np.array(values)
    mants = np.array(mants)
    order = np.argsort(values, kind="stable")
    return values[order], mants[order]


def nearest_grid(x: np.ndarray, fmt: FpFormat, bias: float) -> np.ndarray:
    """Nearest element of the signed scaled grid for each entry of ``x``.

    Ties go to the even mantissa. With no mantissa bits both neighbours have
    mantissa 0, so the one that is an even multiple of the lower neighbour's
    step wins instead; for m >= 1 the two rules coincide.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    unit, mants = code_table(fmt)
    grid = scale_from_bias(bias) * unit
    dist = np.abs(x[:, None] - grid[None, :])
    best = dist.min(axis=1, keepdims=True)
    hits = dist == best
    idx = np.argmax(hits, axis=1)
    out = grid[idx].copy()
    tied = hits.sum(axis=1) > 1
    for i in np.flatnonzero(tied):
        lo, hi = np.flatnonzero(hits[i])[:2]
        if fmt.mantissa_bits > 0:
            pick = lo if mants[lo] % 2 == 0 else hi
        else:
            pick = _even_multiple(unit, lo, hi, fmt)
        out[i] = grid[pick]
    return out


def _even_multiple(unit: np.ndarray, lo: int, hi: int, fmt: FpFormat) -> int:
    a, b = abs(unit[lo]), abs(unit[hi])
    small = min(a, b)
    step = 2.0 ** (1 - fmt.mantissa_bits) if small < 2 else 2.0 ** (np.floor(np.log2(small)) - fmt.mantissa_bits)
    return lo if (a / step) % 2 == 0 else hi


def default_formats() -> list[FpFormat]:
    return [FpFormat(e, m) for e in range(1, 5) for m in range(0, 4) if e + m <= 6]


DEFAULT_BIASES = (-3.3, -1.0, 0.0, 0.37, 1.0, 2.71, 7.5)


@dataclass
class VerifyReport:
    rows: list[tuple[str, float, int, int]] = field(default_factory=list)

    @property
    def mismatches(self) -> int:
        return sum(r[3] for r in self.rows)

    @property
    def passed(self) -> bool:
        return self.mismatches == 0


def sample_inputs(fmt: FpFormat, bias: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inputs spread over the whole range, overflow, and every exact midpoint."""
    qmax = scale_from_bias(bias) * fmt.max_unit
    uniform = rng.uniform(-1.25 * qmax, 1.25 * qmax, n)
    logs = np.exp2(rng.uniform(np.log2(qmax) - 2**fmt.exponent_bits - 2, np.log2(qmax) + 1, n))
    logs *= rng.choice([-1.0, 1.0], n)
    unit, _ = code_table(fmt)
    mids = scale_from_bias(bias) * (unit[:-1] + unit[1:]) / 2
    return np.concatenate([uniform, logs, mids, [0.0, qmax, -qmax]])


def verify(formats, biases, samples: int, seed: int, quantize) -> VerifyReport:
    """Run ``quantize(x, fmt, bias)`` against :func:`nearest_grid` on seeded inputs."""
    rng = np.random.default_rng(seed)
    report = VerifyReport()
    for fmt in formats:
        for bias in biases:
            x = sample_inputs(fmt, bias, samples, rng)
            got = quantize(x, fmt, bias)
            want = nearest_grid(x, fmt, bias)
            bad = int(np.count_nonzero(got != want))
            report.rows.append((fmt.name, float(bias), x.size, bad))
    return report
