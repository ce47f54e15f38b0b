"""Calibration bundles on disk, synthetic bundles, channel statistics.

A bundle is a directory::

    manifest.json   UTF-8 JSON, see below
    tensors.bin     raw little-endian float32 blobs, each starting at an
                    8-byte aligned offset, zero padded in between

Manifest::

    {
      "format": "fpq-bundle",
      "version": 1,
      "tensors": [{"name": str, "shape": [int, ...], "dtype": "float32",
                   "offset": int, "length": int}, ...],
      "layers":  [{"name": str, "kind": "weight" | "act-act",
                   "x": tensor, "y": tensor, "output": tensor,
                   "grad": tensor | null}, ...]
    }

``output`` holds the full-precision ``x @ y``; ``grad`` holds dL/d(output)
and is needed only for the fisher metric. ``length`` is ``prod(shape) * 4``.
Unknown keys in a layer record are preserved (quantized bundles use this to
carry scheme metadata).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .qmatmul import LayerKind
from .search import RAW_OUTPUT_TOLERANCE, LayerTask, raw_output_error

BUNDLE_FORMAT = "fpq-bundle"
BUNDLE_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f4")


class BundleError(Exception):
    code = "bundle-error"

    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer else ""
        super().__init__(prefix + message)


class BundleNotFoundError(BundleError):
    code = "bundle-not-found"


class ManifestError(BundleError):
    code = "manifest-invalid"


class VersionMismatchError(BundleError):
    code = "version-mismatch"


class MissingTensorError(BundleError):
    code = "missing-tensor"


class ShapeMismatchError(BundleError):
    code = "shape-mismatch"


class RawOutputMismatchError(BundleError):
    code = "raw-output-mismatch"


@dataclass
class LayerSpec:
    name: str
    kind: LayerKind
    x: str
    y: str
    output: str
    grad: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(name=self.name, kind=LayerKind(self.kind).value, x=self.x, y=self.y,
                   output=self.output, grad=self.grad)
        return out


@dataclass
class CalibrationBundle:
    layers: list[LayerSpec]
    tensors: dict[str, np.ndarray]
    version: int = BUNDLE_VERSION

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def has_grad(self, name: str) -> bool:
        return self.layer(name).grad is not None

    def task(self, name: str) -> LayerTask:
        spec = self.layer(name)
        t = self.tensors
        return LayerTask(
            name=spec.name,
            x=t[spec.x],
            y=t[spec.y],
            o_ref=t[spec.output],
            grad=t[spec.grad] if spec.grad else None,
            kind=spec.kind,
        )


def _align(n: int) -> int:
    return (n + 7) // 8 * 8


def _layout(bundle: CalibrationBundle) -> tuple[list[dict], bytes]:
    records, chunks, offset = [], [], 0
    for name, arr in bundle.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        start = _align(offset)
        if start > offset:
            chunks.append(b"\0" * (start - offset))
        records.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                        "offset": start, "length": len(data)})
        chunks.append(data)
        offset = start + len(data)
    return records, b"".join(chunks)


def manifest_bytes(bundle: CalibrationBundle) -> tuple[bytes, bytes]:
    records, blob = _layout(bundle)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": bundle.version,
        "tensors": records,
        "layers": [layer.to_json() for layer in bundle.layers],
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    return text.encode("utf-8"), blob


def save_bundle(bundle: CalibrationBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, blob = manifest_bytes(bundle)
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_bytes(manifest)
    return path


def bundle_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for part in (MANIFEST, BLOB):
        h.update((path / part).read_bytes())
    return h.hexdigest()


def _read_tensors(records, blob: bytes) -> dict[str, np.ndarray]:
    tensors = {}
    for rec in records:
        try:
            name, shape = rec["name"], tuple(int(s) for s in rec["shape"])
            offset, length = int(rec["offset"]), int(rec["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad tensor record {rec!r}") from exc
        if rec.get("dtype", "float32") != "float32":
            raise ManifestError(f"tensor {name}: only float32 is supported")
        if offset % 8:
            raise ManifestError(f"tensor {name}: offset {offset} is not 8-byte aligned")
        if length != math.prod(shape) * 4:
            raise ShapeMismatchError(f"tensor {name}: length {length} does not match shape {list(shape)}")
        if offset + length > len(blob):
            raise ManifestError(f"tensor {name}: blob truncated")
        tensors[name] = np.frombuffer(blob, dtype=_DTYPE, count=length // 4, offset=offset).reshape(shape)
    return tensors


def _parse_layer(rec: dict) -> LayerSpec:
    try:
        known = {"name", "kind", "x", "y", "output", "grad"}
        return LayerSpec(
            name=rec["name"],
            kind=LayerKind(rec.get("kind", "weight")),
            x=rec["x"],
            y=rec["y"],
            output=rec["output"],
            grad=rec.get("grad"),
            extra={k: v for k, v in rec.items() if k not in known},
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"bad layer record {rec!r}") from exc


def validate_bundle(bundle: CalibrationBundle) -> None:
    seen = set()
    for layer in bundle.layers:
        if layer.name in seen:
            raise ManifestError("duplicate layer name", layer.name)
        seen.add(layer.name)
        refs = [layer.x, layer.y, layer.output] + ([layer.grad] if layer.grad else [])
        for ref in refs:
            if ref not in bundle.tensors:
                raise MissingTensorError(f"missing tensor {ref!r}", layer.name)
        x, y, o = (bundle.tensors[r] for r in (layer.x, layer.y, layer.output))
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeMismatchError(f"cannot multiply {list(x.shape)} by {list(y.shape)}", layer.name)
        want = (x.shape[0], y.shape[1])
        if o.shape != want:
            raise ShapeMismatchError(f"output shape {list(o.shape)} != {list(want)}", layer.name)
        if layer.grad and bundle.tensors[layer.grad].shape != want:
            raise ShapeMismatchError(f"gradient shape {list(bundle.tensors[layer.grad].shape)} != {list(want)}",
                                     layer.name)
        err = raw_output_error(x, y, o)
        if err > RAW_OUTPUT_TOLERANCE:
            raise RawOutputMismatchError(f"raw output mismatch: relative error {err:.3g}", layer.name)


def load_bundle(path) -> CalibrationBundle:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise BundleNotFoundError(f"bundle not found: {path}")
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot parse {MANIFEST}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != BUNDLE_FORMAT:
        raise ManifestError(f"{MANIFEST} is not an {BUNDLE_FORMAT} manifest")
    if manifest.get("version") != BUNDLE_VERSION:
        raise VersionMismatchError(f"unsupported bundle version {manifest.get('version')!r}")
    blob_path = path / BLOB
    blob = blob_path.read_bytes() if blob_path.is_file() else b""
    tensors = _read_tensors(manifest.get("tensors", []), blob)
    layers = [_parse_layer(rec) for rec in manifest.get("layers", [])]
    bundle = CalibrationBundle(layers, tensors, manifest["version"])
    validate_bundle(bundle)
    return bundle


def _with_output(tensors: dict, layers: list[LayerSpec]) -> None:
    for layer in layers:
        x = tensors[layer.x].astype(np.float64)
        y = tensors[layer.y].astype(np.float64)
        tensors[layer.output] = (x @ y).astype(_DTYPE)


def synth_bundle(layers: int = 1, tokens: int = 64, channels: int = 8, outlier_channels: int = 1,
                 outlier_scale: float = 100.0, seed: int = 0, out_features: int | None = None) -> CalibrationBundle:
    """Independent weight layers with Gaussian data and a few outlier channels.

    Outlier channels have high inter-channel but low intra-channel variance:
    the whole channel is multiplied by ``outlier_scale``.
    """
    if outlier_channels >= channels:
        raise ContractError("outlier_channels must be smaller than channels")
    rng = np.random.default_rng(seed)
    out_features = out_features or channels
    tensors, specs = {}, []
    for i in range(layers):
        x = rng.standard_normal((tokens, channels))
        hot = rng.choice(channels, size=outlier_channels, replace=False)
        x[:, hot] *= outlier_scale
        w = rng.standard_normal((channels, out_features)) / math.sqrt(channels)
        name = f"layer{i}"
        tensors[f"{name}.x"] = x.astype(_DTYPE)
        tensors[f"{name}.w"] = w.astype(_DTYPE)
        specs.append(LayerSpec(name, LayerKind.WEIGHT, f"{name}.x", f"{name}.w", f"{name}.out"))
    _with_output(tensors, specs)
    return CalibrationBundle(specs, tensors)


def synth_toy_mlp(seed: int = 0, tokens: int = 64, d_in: int = 32, d_hidden: int = 64, d_out: int = 16,
                  outlier_channels: int = 0, outlier_scale: float = 20.0) -> CalibrationBundle:
    """Two fully-connected layers ``relu(x @ w1) @ w2`` with stored gradients.

    Gradients are those of ``0.5 * ||out - target||**2`` for a random target.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((tokens, d_in))
    x[:, rng.choice(d_in, size=outlier_channels, replace=False)] *= outlier_scale
    x = x.astype(_DTYPE)
    w1 = (rng.standard_normal((d_in, d_hidden)) / math.sqrt(d_in)).astype(_DTYPE)
    w2 = (rng.standard_normal((d_hidden, d_out)) / math.sqrt(d_hidden)).astype(_DTYPE)
    pre = x.astype(np.float64) @ w1.astype(np.float64)
    h = np.maximum(pre, 0).astype(_DTYPE)
    out = h.astype(np.float64) @ w2.astype(np.float64)
    target = rng.standard_normal(out.shape) * out.std()
    g_out = out - target
    g_pre = (g_out @ w2.astype(np.float64).T) * (pre > 0)
    tensors = {
        "fc1.x": x, "fc1.w": w1, "fc1.out": pre.astype(_DTYPE), "fc1.grad": g_pre.astype(_DTYPE),
        "fc2.x": h, "fc2.w": w2, "fc2.out": out.astype(_DTYPE), "fc2.grad": g_out.astype(_DTYPE),
    }
    specs = [
        LayerSpec("fc1", LayerKind.WEIGHT, "fc1.x", "fc1.w", "fc1.out", "fc1.grad"),
        LayerSpec("fc2", LayerKind.WEIGHT, "fc2.x", "fc2.w", "fc2.out", "fc2.grad"),
    ]
    return CalibrationBundle(specs, tensors)


@dataclass
class ChannelStats:
    max_abs: np.ndarray
    mean_abs: np.ndarray
    variance: np.ndarray
    inter_channel_variance: float
    intra_channel_variance: float

    @property
    def ratio(self) -> float:
        if self.intra_channel_variance == 0:
            return float("inf") if self.inter_channel_variance > 0 else 0.0
        return self.inter_channel_variance / self.intra_channel_variance


def channel_stats(act) -> ChannelStats:
    """Per-channel magnitude statistics of a ``(tokens, channels)`` activation.

    Inter-channel variance is the population variance of the channel means;
    intra-channel variance is the mean of the per-channel variances.
    """
    x = np.asarray(act, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"channel statistics need a 2-D tensor, got shape {x.shape}")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    return ChannelStats(
        max_abs=np.abs(x).max(axis=0),
        mean_abs=np.abs(x).mean(axis=0),
        variance=var,
        inter_channel_variance=float(mean.var()),
        intra_channel_variance=float(var.mean()),
    )
