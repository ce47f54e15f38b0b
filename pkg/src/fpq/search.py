"""Joint format and bias search per matmul layer.

Each layer ``O = X @ Y`` is calibrated on its own stored full-precision
operands and output, so layers are independent and can run concurrently.

The search is greedy coordinate descent. Every candidate format starts from
its MinMax bias; each round then

1. grid-searches the activation bias of every activation format,
2. switches activation format if another one now scores better,
3. and 4. do the same for the second operand,

accepting a move only when it strictly lowers the metric. Ties resolve to the
incumbent, then to the lower exponent-bit count, then to the smaller bias.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, MetricUnavailableError
from .formats import FpFormat, format_space
from .metrics import MetricKind, reconstruction_metric
from .qmatmul import LayerKind, MatmulPlan, matmul_preshifted, matmul_quantized, prepare_preshifted_weight
from .quantizer import (
    ChannelShiftedScheme,
    Granularity,
    IntScheme,
    QuantScheme,
    per_channel_bias,
    quantize_tensor,
    split_channel_bias,
    minmax_bias,
)

RAW_OUTPUT_TOLERANCE = 1e-5

# MinMax FP reference formats per bit width.
DEFAULT_MINMAX_FORMATS = {4: FpFormat(2, 1), 6: FpFormat(3, 2), 8: FpFormat(4, 3)}


class Mode(str, enum.Enum):
    MINMAX_INT = "minmax-int"
    MINMAX_FP = "minmax-fp"
    FPQ_BASELINE = "fpq-baseline"
    FPQ = "fpq"


@dataclass(frozen=True)
class SearchConfig:
    gamma1: float = 0.01
    gamma2: float = 1.2
    k: int = 100
    rounds: int = 3
    weight_bits: int = 8
    act_bits: int = 8
    metric: MetricKind = MetricKind.MSE
    mode: Mode = Mode.FPQ_BASELINE
    act_granularity: Granularity = Granularity.TENSOR
    # Use MSE for layers without gradients instead of failing.
    fisher_fallback: bool = False
    # In fpq mode also run the baseline search and record the improvement.
    compare_baseline: bool = True
    weight_formats: tuple[FpFormat, ...] | None = None
    act_formats: tuple[FpFormat, ...] | None = None

    def __post_init__(self) -> None:
        if not 0 < self.gamma1 < self.gamma2:
            raise ContractError(f"need 0 < gamma1 < gamma2, got {self.gamma1}, {self.gamma2}")
        if self.k < 1 or self.rounds < 1:
            raise ContractError("k and rounds must be >= 1")
        object.__setattr__(self, "metric", MetricKind(self.metric))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "act_granularity", Granularity(self.act_granularity))
        if self.act_granularity is Granularity.CHANNEL:
            raise ContractError("per-channel activation scales need the pre-shifted mode")

    @property
    def preshift(self) -> bool:
        return self.mode is Mode.FPQ

    def act_space(self) -> list[FpFormat]:
        return list(self.act_formats) if self.act_formats else format_space(self.act_bits)

    def weight_space(self) -> list[FpFormat]:
        return list(self.weight_formats) if self.weight_formats else format_space(self.weight_bits)

    def to_json(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "k": self.k,
            "rounds": self.rounds,
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "metric": self.metric.value,
            "mode": self.mode.value,
            "act_granularity": self.act_granularity.value,
            "fisher_fallback": self.fisher_fallback,
            "weight_formats": [f.name for f in self.weight_space()],
            "act_formats": [f.name for f in self.act_space()],
        }


def raw_output_error(x: np.ndarray, y: np.ndarray, o_ref: np.ndarray) -> float:
    """Max-abs deviation of ``o_ref`` from ``x @ y``, relative to ``max|x @ y|``."""
    o = np.asarray(x, dtype=np.float64) @ np.asarray(y, dtype=np.float64)
    scale = float(np.max(np.abs(o))) if o.size else 0.0
    err = float(np.max(np.abs(o - o_ref))) if o.size else 0.0
    return err / scale if scale > 0 else err


@dataclass(eq=False)
class LayerTask:
    name: str
    x: np.ndarray
    y: np.ndarray
    o_ref: np.ndarray
    grad: np.ndarray | None = None
    kind: LayerKind = LayerKind.WEIGHT

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.o_ref = np.asarray(self.o_ref, dtype=np.float64)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        self.kind = LayerKind(self.kind)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[1] != self.y.shape[0]:
            raise ContractError(f"layer {self.name}: cannot multiply {self.x.shape} by {self.y.shape}")
        out_shape = (self.x.shape[0], self.y.shape[1])
        if self.o_ref.shape != out_shape:
            raise ContractError(f"layer {self.name}: output shape {self.o_ref.shape} != {out_shape}")
        if self.grad is not None and self.grad.shape != out_shape:
            raise ContractError(f"layer {self.name}: gradient shape {self.grad.shape} != {out_shape}")
        err = raw_output_error(self.x, self.y, self.o_ref)
        if err > RAW_OUTPUT_TOLERANCE:
            raise ContractError(f"layer {self.name}: raw output differs from x @ y (relative {err:.3g})")


@dataclass
class TraceStep:
    stage: str
    round: int
    metric: float
    act_format: str
    weight_format: str

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "round": self.round,
            "metric": self.metric,
            "act_format": self.act_format,
            "weight_format": self.weight_format,
        }


@dataclass
class SearchResult:
    name: str
    mode: Mode
    act_scheme: object
    weight_scheme: object
    metric: float
    init_metric: float
    relative_error: float
    trace: list[TraceStep] = field(default_factory=list)
    act_formats: list[str] = field(default_factory=list)
    weight_formats: list[str] = field(default_factory=list)
    metric_kind: MetricKind = MetricKind.MSE
    preshift_check: float | None = None
    baseline_metric: float | None = None

    @property
    def improvement_factor(self) -> float | None:
        if self.baseline_metric is None:
            return None
        return self.baseline_metric / self.metric if self.metric > 0 else float("inf")

    def to_json(self) -> dict:
        out = {
            "mode": self.mode.value,
            "metric_kind": self.metric_kind.value,
            "act": self.act_scheme.to_json(),
            "weight": self.weight_scheme.to_json(),
            "metric_before": self.init_metric,
            "metric_after": self.metric,
            "relative_error": self.relative_error,
            "trace": [s.to_json() for s in self.trace],
            "formats_examined": {"act": self.act_formats, "weight": self.weight_formats},
        }
        if self.preshift_check is not None:
            out["preshift_equivalence_error"] = self.preshift_check
        if self.baseline_metric is not None:
            out["baseline_metric"] = self.baseline_metric
            out["improvement_factor"] = self.improvement_factor
        return out


def bias_grid(init_bias, config: SearchConfig) -> list:
    """``k + 1`` evenly spaced candidates between ``gamma1 * init`` and ``gamma2 * init``.

    Scalar grids are ascending. Vector grids scale every entry by the same
    multiplier and are ordered by ascending multiplier.
    """
    mult = np.linspace(config.gamma1, config.gamma2, config.k + 1)
    b = np.asarray(init_bias, dtype=np.float64)
    if b.ndim == 0:
        values = mult * float(b)
        if b < 0:
            values = values[::-1]
        return [float(v) for v in values]
    return [mi * b for mi in mult]


@dataclass
class _Operand:
    """Candidate formats for one matmul operand and how to quantize under each."""

    formats: list[FpFormat]
    init: dict
    quantize: Callable[[FpFormat, object], np.ndarray]
    scheme: Callable[[FpFormat, object], object]


def _plain_operand(t: np.ndarray, formats: list[FpFormat], gran: Granularity) -> _Operand:
    return _Operand(
        formats=sorted(formats, key=lambda f: f.exponent_bits),
        init={f: minmax_bias(t, f, gran) for f in formats},
        quantize=lambda f, b: quantize_tensor(t, f, b, gran),
        scheme=lambda f, b: QuantScheme(f, b, gran),
    )


def preshift_init(x: np.ndarray, fmt: FpFormat) -> tuple[np.ndarray, float]:
    """Per-channel MinMax biases and the initial shared bias ``min_j b_j``.

    All-zero channels are left out of the minimum.
    """
    per_ch = per_channel_bias(x, fmt)
    live = np.max(np.abs(x), axis=0) > 0
    rho = float(per_ch[live].min()) if live.any() else 0.0
    return per_ch, rho


def _preshift_operand(x: np.ndarray, formats: list[FpFormat]) -> _Operand:
    per_ch, init = {}, {}
    for f in formats:
        per_ch[f], init[f] = preshift_init(x, f)

    def scheme(f, rho):
        return split_channel_bias(per_ch[f], rho, f)

    return _Operand(
        formats=sorted(formats, key=lambda f: f.exponent_bits),
        init=init,
        quantize=lambda f, rho: scheme(f, rho).quantize(x),
        scheme=scheme,
    )


def _metric_fn(task: LayerTask, config: SearchConfig) -> Callable[[np.ndarray], float]:
    kind = config.metric
    if kind is MetricKind.FISHER and task.grad is None:
        if not config.fisher_fallback:
            raise MetricUnavailableError(f"layer {task.name}: fisher metric needs gradients")
        kind = MetricKind.MSE
    return lambda o_hat: reconstruction_metric(kind, o_hat, task.o_ref, task.grad)


def _weight_granularity(task: LayerTask) -> Granularity:
    return Granularity.CHANNEL if task.kind is LayerKind.WEIGHT else Granularity.TENSOR


def _coordinate_step(op: _Operand, biases: dict, current: FpFormat, current_metric: float,
                     grids: dict, score: Callable[[np.ndarray], float]) -> tuple[FpFormat, float]:
    # Updates ``biases`` in place; returns the (possibly new) format and metric.
    scores = {}
    for f in op.formats:
        best = current_metric if f == current else score(op.quantize(f, biases[f]))
        for cand in grids[f]:
            m = score(op.quantize(f, cand))
            if m < best:
                best, biases[f] = m, cand
        scores[f] = best
    chosen, chosen_metric = current, scores[current]
    for f in op.formats:
        if scores[f] < chosen_metric:
            chosen, chosen_metric = f, scores[f]
    return chosen, chosen_metric


def _greedy_search(task: LayerTask, config: SearchConfig, act: _Operand, wgt: _Operand,
                   metric: Callable[[np.ndarray], float]):
    act_grid = {f: bias_grid(act.init[f], config) for f in act.formats}
    wgt_grid = {f: bias_grid(wgt.init[f], config) for f in wgt.formats}
    bx, by = dict(act.init), dict(wgt.init)

    xq0 = {f: act.quantize(f, bx[f]) for f in act.formats}
    yq0 = {f: wgt.quantize(f, by[f]) for f in wgt.formats}
    pair_metric = {}
    best = None
    for fx in act.formats:
        for fy in wgt.formats:
            m = metric(xq0[fx] @ yq0[fy])
            pair_metric[fx, fy] = m
            if best is None or m < best[0]:
                best = (m, fx, fy)
    cur, rx, ry = best
    trace = [TraceStep("init", 0, cur, rx.name, ry.name)]

    for rnd in range(1, config.rounds + 1):
        before = (cur, rx, ry, _freeze(bx), _freeze(by))
        yq = wgt.quantize(ry, by[ry])
        rx, cur = _coordinate_step(act, bx, rx, cur, act_grid, lambda xq: metric(xq @ yq))
        trace.append(TraceStep("act", rnd, cur, rx.name, ry.name))
        xq = act.quantize(rx, bx[rx])
        ry, cur = _coordinate_step(wgt, by, ry, cur, wgt_grid, lambda yq_: metric(xq @ yq_))
        trace.append(TraceStep("weight", rnd, cur, rx.name, ry.name))
        if (cur, rx, ry, _freeze(bx), _freeze(by)) == before:
            break  # fixed point: further rounds repeat exactly

    return rx, bx[rx], ry, by[ry], cur, pair_metric[rx, ry], trace


def _freeze(biases: dict) -> tuple:
    return tuple((f, np.asarray(b).tobytes()) for f, b in biases.items())


def _relative_error(o_hat: np.ndarray, o_ref: np.ndarray) -> float:
    denom = float(np.linalg.norm(o_ref))
    err = float(np.linalg.norm(o_hat - o_ref))
    return err / denom if denom > 0 else err


def search_layer(task: LayerTask, config: SearchConfig) -> SearchResult:
    """Joint format and bias search with a per-tensor (or per-token) activation scale."""
    metric = _metric_fn(task, config)
    act = _plain_operand(task.x, config.act_space(), config.act_granularity)
    wgt = _plain_operand(task.y, config.weight_space(), _weight_granularity(task))
    rx, bx, ry, by, m, m0, trace = _greedy_search(task, config, act, wgt, metric)
    act_scheme, wgt_scheme = act.scheme(rx, bx), wgt.scheme(ry, by)
    o_hat = matmul_quantized(task.x, task.y, MatmulPlan(act_scheme, wgt_scheme, task.kind))
    return SearchResult(
        name=task.name,
        mode=Mode.FPQ_BASELINE,
        act_scheme=act_scheme,
        weight_scheme=wgt_scheme,
        metric=m,
        init_metric=m0,
        relative_error=_relative_error(o_hat, task.o_ref),
        trace=trace,
        act_formats=[f.name for f in act.formats],
        weight_formats=[f.name for f in wgt.formats],
        metric_kind=_effective_kind(task, config),
    )


def search_layer_preshifted(task: LayerTask, config: SearchConfig) -> SearchResult:
    """Search with per-channel activation biases split into ``rho`` + integer offsets.

    Per-channel biases stay at their MinMax values; only the shared ``rho``
    is searched, the offsets being re-derived for every candidate.
    """
    if task.kind is not LayerKind.WEIGHT:
        raise ContractError(f"layer {task.name}: pre-shifted bias only applies to weight layers")
    metric = _metric_fn(task, config)
    act = _preshift_operand(task.x, config.act_space())
    wgt = _plain_operand(task.y, config.weight_space(), Granularity.CHANNEL)
    rx, rho, ry, by, m, m0, trace = _greedy_search(task, config, act, wgt, metric)
    act_scheme: ChannelShiftedScheme = act.scheme(rx, rho)
    wgt_scheme = wgt.scheme(ry, by)
    reference = matmul_quantized(task.x, task.y, MatmulPlan(act_scheme, wgt_scheme, task.kind))
    w_pre = prepare_preshifted_weight(task.y, act_scheme, wgt_scheme)
    inference = matmul_preshifted(task.x, w_pre, act_scheme)
    scale = float(np.max(np.abs(reference))) or 1.0
    return SearchResult(
        name=task.name,
        mode=Mode.FPQ,
        act_scheme=act_scheme,
        weight_scheme=wgt_scheme,
        metric=m,
        init_metric=m0,
        relative_error=_relative_error(reference, task.o_ref),
        trace=trace,
        act_formats=[f.name for f in act.formats],
        weight_formats=[f.name for f in wgt.formats],
        metric_kind=_effective_kind(task, config),
        preshift_check=float(np.max(np.abs(inference - reference))) / scale,
    )


def _effective_kind(task: LayerTask, config: SearchConfig) -> MetricKind:
    if config.metric is MetricKind.FISHER and task.grad is None:
        return MetricKind.MSE
    return config.metric


def minmax_layer(task: LayerTask, config: SearchConfig) -> SearchResult:
    """No search: MinMax scales with a fixed FP format or symmetric INT."""
    metric = _metric_fn(task, config)
    wgran = _weight_granularity(task)
    if config.mode is Mode.MINMAX_INT:
        act_scheme = IntScheme(config.act_bits, config.act_granularity)
        wgt_scheme = IntScheme(config.weight_bits, wgran)
    else:
        fx = _minmax_format(config.act_formats, config.act_bits)
        fy = _minmax_format(config.weight_formats, config.weight_bits)
        act_scheme = QuantScheme(fx, minmax_bias(task.x, fx, config.act_granularity), config.act_granularity)
        wgt_scheme = QuantScheme(fy, minmax_bias(task.y, fy, wgran), wgran)
    o_hat = matmul_quantized(task.x, task.y, MatmulPlan(act_scheme, wgt_scheme, task.kind))
    m = metric(o_hat)
    label = lambda s: s.format.name if isinstance(s, QuantScheme) else f"INT{s.bits}"
    return SearchResult(
        name=task.name,
        mode=config.mode,
        act_scheme=act_scheme,
        weight_scheme=wgt_scheme,
        metric=m,
        init_metric=m,
        relative_error=_relative_error(o_hat, task.o_ref),
        trace=[TraceStep("init", 0, m, label(act_scheme), label(wgt_scheme))],
        act_formats=[label(act_scheme)],
        weight_formats=[label(wgt_scheme)],
        metric_kind=_effective_kind(task, config),
    )


def _minmax_format(explicit, bits: int) -> FpFormat:
    if explicit:
        return explicit[0]
    if bits in DEFAULT_MINMAX_FORMATS:
        return DEFAULT_MINMAX_FORMATS[bits]
    space = format_space(bits)
    return space[len(space) // 2]


def run_layer(task: LayerTask, config: SearchConfig) -> SearchResult:
    if config.mode in (Mode.MINMAX_INT, Mode.MINMAX_FP):
        return minmax_layer(task, config)
    if config.mode is Mode.FPQ_BASELINE or task.kind is not LayerKind.WEIGHT:
        result = search_layer(task, config)
        result.mode = config.mode
        return result
    result = search_layer_preshifted(task, config)
    if config.compare_baseline:
        result.baseline_metric = search_layer(task, config).metric
    return result


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FPQ_THREADS", "1")))
    except ValueError:
        return 1


def run_pipeline(bundle, config: SearchConfig, threads: int | None = None) -> dict[str, SearchResult]:
    """Search every layer of ``bundle`` independently (parallel quantization).

    Results are keyed by layer name in manifest order and do not depend on
    ``threads``.
    """
    tasks = [bundle.task(name) for name in bundle.layer_names]
    threads = threads or default_threads()
    if threads == 1 or len(tasks) <= 1:
        results = [run_layer(t, config) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: run_layer(t, config), tasks))
    return {r.name: r for r in results}
