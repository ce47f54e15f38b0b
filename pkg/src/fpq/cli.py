"""Command-line entry point: ``fpq {search,stats,error-scan,synth,verify}``.

Exit codes: 0 success, 1 algorithmic failure (oracle mismatch), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    BundleError,
    CalibrationBundle,
    LayerSpec,
    bundle_digest,
    channel_stats,
    load_bundle,
    save_bundle,
    synth_bundle,
    synth_toy_mlp,
)
from .errors import ContractError, MetricUnavailableError, QuantDomainError
from .formats import FpFormat, fake_quantize
from .metrics import MetricKind
from .oracle import DEFAULT_BIASES, default_formats, verify
from .qmatmul import LayerKind
from .quantizer import Granularity, error_scan
from .search import Mode, SearchConfig, default_threads, run_pipeline

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _bits(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W[,A] bit widths, got {text!r}")
    if len(values) not in (1, 2) or min(values) < 3:
        raise argparse.ArgumentTypeError(f"expected W[,A] bit widths >= 3, got {text!r}")
    return values[0], values[-1]


def _formats(text: str) -> list[FpFormat]:
    try:
        return [FpFormat.parse(t) for t in text.split(",") if t.strip()]
    except QuantDomainError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _load(path: str) -> CalibrationBundle:
    try:
        return load_bundle(path)
    except BundleError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _finite(value):
    if value is None or not np.isfinite(value):
        return None
    return value


def build_report(bundle_path: str, config: SearchConfig, results: dict) -> dict:
    layers = {}
    for name, res in results.items():
        entry = res.to_json()
        if "improvement_factor" in entry:
            entry["improvement_factor"] = _finite(entry["improvement_factor"])
        layers[name] = entry
    metrics = [r.metric for r in results.values()]
    return {
        "tool": "fpq",
        "version": __version__,
        "bundle": {"path": str(bundle_path), "digest": bundle_digest(bundle_path)},
        "config": config.to_json(),
        "layers": layers,
        "summary": {
            "layers": len(results),
            "mean_metric": float(np.mean(metrics)) if metrics else None,
            "max_relative_error": max((r.relative_error for r in results.values()), default=None),
        },
    }


def quantized_bundle(bundle: CalibrationBundle, results: dict) -> CalibrationBundle:
    """Dequantized operands and outputs, with the chosen schemes as layer metadata."""
    tensors, layers = {}, []
    for spec in bundle.layers:
        res = results[spec.name]
        task = bundle.task(spec.name)
        xq = res.act_scheme.quantize(task.x)
        yq = res.weight_scheme.quantize(task.y)
        names = {k: f"{spec.name}.{k}" for k in ("x", "y", "output")}
        tensors[names["x"]] = xq.astype("<f4")
        tensors[names["y"]] = yq.astype("<f4")
        tensors[names["output"]] = (xq.astype("<f4").astype(np.float64) @ yq.astype("<f4").astype(np.float64)).astype("<f4")
        layers.append(LayerSpec(spec.name, spec.kind, names["x"], names["y"], names["output"],
                                extra={"act_scheme": res.act_scheme.to_json(),
                                       "weight_scheme": res.weight_scheme.to_json()}))
    return CalibrationBundle(layers, tensors)


def cmd_search(args) -> int:
    bundle = _load(args.bundle)
    weight_bits, act_bits = args.bits
    try:
        config = SearchConfig(
            gamma1=args.gamma1, gamma2=args.gamma2, k=args.k, rounds=args.rounds,
            weight_bits=weight_bits, act_bits=act_bits, metric=args.metric, mode=args.mode,
            act_granularity=args.granularity_act, fisher_fallback=args.fisher_fallback,
            compare_baseline=not args.no_compare_baseline,
            weight_formats=tuple(args.weight_formats) if args.weight_formats else None,
            act_formats=tuple(args.act_formats) if args.act_formats else None,
        )
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        results = run_pipeline(bundle, config, threads=args.threads)
    except (MetricUnavailableError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = build_report(args.bundle, config, results)
    if args.record_time:
        report["wall_time_s"] = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "report.json")
    if args.save_quantized:
        save_bundle(quantized_bundle(bundle, results), out / "quantized")
    for name, res in results.items():
        print(f"{name}\tact={_label(res.act_scheme)}\tweight={_label(res.weight_scheme)}"
              f"\tmetric={res.metric:.6g}\trel_err={res.relative_error:.4%}")
    return EXIT_OK


def _label(scheme) -> str:
    data = scheme.to_json()
    return data.get("format") or f"INT{data['bits']}"


def cmd_stats(args) -> int:
    bundle = _load(args.bundle)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["layer", "channel", "max_abs", "mean_abs", "variance"])
    for spec in bundle.layers:
        stats = channel_stats(bundle.tensors[spec.x])
        for j in range(stats.max_abs.size):
            writer.writerow([spec.name, j, repr(float(stats.max_abs[j])), repr(float(stats.mean_abs[j])),
                             repr(float(stats.variance[j]))])
        print(f"{spec.name}: inter-channel variance {stats.inter_channel_variance:.6g}, "
              f"intra-channel variance {stats.intra_channel_variance:.6g}, ratio {stats.ratio:.6g}",
              file=sys.stderr)
    return EXIT_OK


def cmd_error_scan(args) -> int:
    bundle = _load(args.bundle)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["layer", "operand", "format", "mse"])
    operands = ("x", "y") if args.operand == "both" else (args.operand,)
    for spec in bundle.layers:
        for op in operands:
            tensor = bundle.tensors[spec.x if op == "x" else spec.y]
            gran = Granularity.CHANNEL if op == "y" and spec.kind is LayerKind.WEIGHT else Granularity.TENSOR
            for fmt, err in error_scan(tensor, args.bits, gran).items():
                writer.writerow([spec.name, op, fmt, repr(err)])
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        if args.kind == "toy-mlp":
            bundle = synth_toy_mlp(seed=args.seed, tokens=args.tokens)
        else:
            bundle = synth_bundle(layers=args.layers, tokens=args.tokens, channels=args.channels,
                                  outlier_channels=args.outlier_channels, outlier_scale=args.outlier_scale,
                                  seed=args.seed, out_features=args.out_features)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle.layers)} layer(s) to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    formats = args.formats or default_formats()
    report = verify(formats, args.biases, args.samples, args.seed, fake_quantize)
    for fmt, bias, n, bad in report.rows:
        print(f"{fmt}\tbias={bias:g}\tsamples={n}\tmismatches={bad}")
    print(f"{'PASS' if report.passed else 'FAIL'}: {report.mismatches} mismatches")
    return EXIT_OK if report.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpq", description="Floating-point post-training quantization search.")
    parser.add_argument("--version", action="version", version=f"fpq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="search formats and biases for every layer of a bundle")
    p.add_argument("bundle")
    p.add_argument("--bits", type=_bits, default=(8, 8), help="weight[,activation] bit widths (default 8)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.FPQ_BASELINE.value)
    p.add_argument("--metric", choices=[m.value for m in MetricKind], default=MetricKind.MSE.value)
    p.add_argument("--fisher-fallback", action="store_true", help="use mse for layers without gradients")
    p.add_argument("--gamma1", type=float, default=0.01)
    p.add_argument("--gamma2", type=float, default=1.2)
    p.add_argument("--k", type=int, default=100, help="bias grid intervals")
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--granularity-act", choices=["tensor", "token"], default="tensor")
    p.add_argument("--weight-formats", type=_formats, help="restrict weight formats, e.g. E2M1,E3M0")
    p.add_argument("--act-formats", type=_formats, help="restrict activation formats")
    p.add_argument("--threads", type=int, default=None, help="layer workers (default $FPQ_THREADS or 1)")
    p.add_argument("--out", default="fpq-out", help="output directory for report.json")
    p.add_argument("--save-quantized", action="store_true", help="also write a quantized bundle")
    p.add_argument("--no-compare-baseline", action="store_true",
                   help="in fpq mode, skip the baseline search used for the improvement factor")
    p.add_argument("--record-time", action="store_true", help="add wall time to the report (not reproducible)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("stats", help="per-channel activation statistics as CSV")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("error-scan", help="MinMax quantization MSE per format as CSV")
    p.add_argument("bundle")
    p.add_argument("--bits", type=int, choices=[4, 6, 8], default=8)
    p.add_argument("--operand", choices=["x", "y", "both"], default="both")
    p.set_defaults(func=cmd_error_scan)

    p = sub.add_parser("synth", help="write a synthetic calibration bundle")
    p.add_argument("out")
    p.add_argument("--kind", choices=["outlier", "toy-mlp"], default="outlier")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--out-features", type=int, default=None)
    p.add_argument("--outlier-channels", type=int, default=1)
    p.add_argument("--outlier-scale", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="check the quantizer against the brute-force grid oracle")
    p.add_argument("--formats", type=_formats, default=None)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--biases", type=lambda s: [float(b) for b in s.split(",")], default=list(DEFAULT_BIASES))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is None and args.command == "search":
        args.threads = default_threads()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
