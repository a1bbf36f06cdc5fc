"""Dense float32 tensors, model/dataset file I/O and the reference forward pass.

Tensors are plain ``numpy`` arrays of dtype float32, row-major.  A model is a
flat list of :class:`Layer` records stored on disk as a JSON manifest plus one
raw little-endian float32 blob per parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "avgpool", "flatten", "add")

# parameter names per layer kind, in manifest order
PARAM_NAMES = {
    "dense": ("weights", "bias"),
    "conv2d": ("weights", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}

BLOB_DTYPE = np.dtype("<f4")


class ModelError(ValueError):
    """Raised when a model manifest or its blobs are inconsistent."""


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


def as_tensor(data: Any, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite float32 array, optionally reshaped."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape {shape} has non-positive entries")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass
class Layer:
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict[str, Any] = field(default_factory=dict)

    @property
    def is_weighted(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def weight_shape(self) -> tuple[int, ...]:
        a = self.attrs
        if self.kind == "dense":
            return (a["out"], a["in"])
        if self.kind == "conv2d":
            return (a["out"], a["in"], a["kh"], a["kw"])
        raise ModelError(f"{self.kind} layer has no weights")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.is_weighted:
            return {"weights": self.weight_shape(), "bias": (self.attrs["out"],)}
        if self.kind == "batchnorm":
            c = (self.attrs["channels"],)
            return {name: c for name in PARAM_NAMES["batchnorm"]}
        return {}


@dataclass
class ModelGraph:
    layers: list[Layer]
    input_shape: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self.layers)

    def weighted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_weighted]

    def copy(self) -> "ModelGraph":
        layers = [
            Layer(l.kind, {k: v.copy() for k, v in l.params.items()}, dict(l.attrs))
            for l in self.layers
        ]
        return ModelGraph(layers, self.input_shape)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim < 2:
            raise ShapeError("features must be [n, d] or [n, c, h, w]")
        if len(self.features) != len(self.labels):
            raise ShapeError(
                f"{len(self.features)} samples but {len(self.labels)} labels"
            )
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# shape checking


def _layer_name(i: int, layer: Layer) -> str:
    return f"layer {i} ({layer.kind})"


def infer_shapes(model: ModelGraph) -> list[tuple[int | None, ...] | None]:
    """Propagate per-sample output shapes, raising ModelError on mismatch.

    Unknown dimensions are ``None``; with no declared input shape the first
    layer decides what can be checked.
    """
    shapes: list[tuple[int | None, ...] | None] = []
    cur: tuple[int | None, ...] | None = model.input_shape
    for i, layer in enumerate(model.layers):
        name = _layer_name(i, layer)
        a = layer.attrs
        k = layer.kind
        if k not in LAYER_KINDS:
            raise ModelError(f"{name}: unknown layer kind")
        if k == "dense":
            if cur is not None:
                if len(cur) != 1:
                    raise ModelError(f"{name}: expects flat input, got {cur}")
                if cur[0] is not None and cur[0] != a["in"]:
                    raise ModelError(f"{name}: expects {a['in']} inputs, got {cur[0]}")
            cur = (a["out"],)
        elif k == "conv2d":
            if cur is None:
                cur = (a["in"], None, None)
            if len(cur) != 3 or cur[0] != a["in"]:
                raise ModelError(f"{name}: expects {a['in']} input channels, got {cur}")
            h, w = cur[1], cur[2]
            s, p = a.get("stride", 1), a.get("padding", 0)
            oh = None if h is None else (h + 2 * p - a["kh"]) // s + 1
            ow = None if w is None else (w + 2 * p - a["kw"]) // s + 1
            if (oh is not None and oh <= 0) or (ow is not None and ow <= 0):
                raise ModelError(f"{name}: kernel larger than input {cur}")
            cur = (a["out"], oh, ow)
        elif k == "batchnorm":
            if cur is not None and cur[0] != a["channels"]:
                raise ModelError(
                    f"{name}: {a['channels']} channels but input has {cur[0]}"
                )
        elif k == "avgpool":
            if cur is not None:
                if len(cur) != 3:
                    raise ModelError(f"{name}: expects [c, h, w] input, got {cur}")
                if a.get("global", False):
                    cur = (cur[0], 1, 1)
                elif "kernel" not in a:
                    raise ModelError(f"{name}: needs 'kernel' or 'global'")
                else:
                    kk = a["kernel"]
                    cur = (
                        cur[0],
                        None if cur[1] is None else cur[1] // kk,
                        None if cur[2] is None else cur[2] // kk,
                    )
        elif k == "flatten":
            if cur is not None:
                if any(d is None for d in cur):
                    raise ModelError(f"{name}: cannot flatten unknown shape {cur}")
                cur = (int(np.prod(cur)),)
        elif k == "add":
            ref = a["ref"]
            if not -1 <= ref < i:
                raise ModelError(f"{name}: ref {ref} does not precede the layer")
            other = model.input_shape if ref == -1 else shapes[ref]
            if cur is not None and other is not None and len(cur) == len(other):
                if any(x is not None and y is not None and x != y for x, y in zip(cur, other)):
                    raise ModelError(f"{name}: cannot add {cur} and {other}")
            elif cur is not None and other is not None:
                raise ModelError(f"{name}: cannot add {cur} and {other}")
        shapes.append(cur)
    return shapes


def validate(model: ModelGraph) -> None:
    """Check parameter shapes, finiteness and layer-to-layer compatibility."""
    for i, layer in enumerate(model.layers):
        name = _layer_name(i, layer)
        for pname, shape in layer.param_shapes().items():
            if pname not in layer.params:
                raise ModelError(f"{name}: missing parameter {pname!r}")
            p = layer.params[pname]
            if p.shape != shape:
                raise ModelError(f"{name}: {pname} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise ModelError(f"{name}: {pname} contains non-finite values")
        if layer.kind == "batchnorm" and np.any(layer.params["var"] < 0):
            raise ModelError(f"{name}: negative running variance")
    infer_shapes(model)


# ---------------------------------------------------------------------------
# file I/O


def read_blob(path: Path, dtype: np.dtype = BLOB_DTYPE) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=dtype).copy()


def write_blob(path: Path, arr: np.ndarray, dtype: np.dtype = BLOB_DTYPE) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


_ATTR_KEYS = {
    "dense": ("in", "out"),
    "conv2d": ("in", "out", "kh", "kw", "stride", "padding"),
    "batchnorm": ("channels", "eps"),
    "avgpool": ("kernel", "global"),
    "add": ("ref",),
}


def layer_from_record(rec: dict, index: int, base: Path, extra_params: Sequence[str] = ()) -> Layer:
    """Build a layer from one manifest record, loading its blobs from ``base``."""
    kind = rec.get("kind")
    if kind not in LAYER_KINDS:
        raise ModelError(f"layer {index}: unknown kind {kind!r}")
    attrs = {k: rec[k] for k in _ATTR_KEYS.get(kind, ()) if k in rec}
    if kind == "conv2d":
        attrs.setdefault("stride", 1)
        attrs.setdefault("padding", 0)
    if kind == "batchnorm":
        attrs.setdefault("eps", 1e-5)
    if kind == "avgpool" and not attrs.get("global") and "kernel" not in attrs:
        raise ModelError(f"layer {index} (avgpool): needs 'kernel' or 'global'")
    if kind == "add" and "ref" not in attrs:
        raise ModelError(f"layer {index} (add): missing 'ref'")
    layer = Layer(kind, {}, attrs)
    try:
        shapes = layer.param_shapes()
    except KeyError as exc:
        raise ModelError(f"layer {index} ({kind}): missing attribute {exc}") from None
    for pname, shape in shapes.items():
        if pname in extra_params:
            continue
        if pname not in rec:
            raise ModelError(f"layer {index} ({kind}): no blob for {pname!r}")
        path = base / rec[pname]
        if not path.is_file():
            raise ModelError(f"layer {index} ({kind}): missing blob {path}")
        flat = read_blob(path)
        if flat.size != int(np.prod(shape)):
            raise ModelError(
                f"layer {index} ({kind}): {pname} blob holds {flat.size} floats, "
                f"declared shape {list(shape)}"
            )
        if not np.all(np.isfinite(flat)):
            raise ModelError(f"layer {index} ({kind}): {pname} has non-finite values")
        layer.params[pname] = flat.reshape(shape)
    return layer


def load_model(manifest_path: str | Path) -> ModelGraph:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read manifest {path}: {exc}") from None
    base = path.parent
    layers = [layer_from_record(rec, i, base) for i, rec in enumerate(manifest["layers"])]
    in_shape = manifest.get("input_shape")
    model = ModelGraph(layers, tuple(in_shape) if in_shape else None)
    validate(model)
    return model


def layer_record(layer: Layer) -> dict:
    rec: dict[str, Any] = {"kind": layer.kind}
    rec.update(layer.attrs)
    return rec


def save_model(model: ModelGraph, manifest_path: str | Path) -> None:
    """Write the manifest and one ``<index>_<param>.bin`` blob per parameter."""
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    records = []
    for i, layer in enumerate(model.layers):
        rec = layer_record(layer)
        for pname in PARAM_NAMES.get(layer.kind, ()):
            fname = f"{stem}.{i}_{pname}.bin"
            write_blob(path.parent / fname, layer.params[pname])
            rec[pname] = fname
        records.append(rec)
    manifest: dict[str, Any] = {"layers": records}
    if model.input_shape is not None:
        manifest["input_shape"] = list(model.input_shape)
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(path: str | Path, shape: Sequence[int] | None = None) -> Dataset:
    """Read a CSV of ``d`` feature columns followed by an integer label."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if raw.shape[0] == 0:
        raise ValueError(f"{path}: empty dataset")
    feats = raw[:, :-1].astype(np.float32)
    labels = raw[:, -1]
    if np.any(labels != np.round(labels)):
        raise ValueError(f"{path}: non-integer labels")
    if shape is not None:
        feats = feats.reshape((len(feats), *shape))
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"{path}: non-finite features")
    return Dataset(feats, labels.astype(np.int64))


def save_dataset(data: Dataset, path: str | Path) -> None:
    flat = data.features.reshape(len(data), -1)
    with open(path, "w") as fh:
        for row, label in zip(flat, data.labels):
            fh.write(",".join(f"{v:.9g}" for v in row) + f",{int(label)}\n")


# ---------------------------------------------------------------------------
# forward pass


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold ``x`` [n, c, h, w] into patches [n, oh, ow, c*kh*kw]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * kh * kw)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    out, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(out, -1).T + b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def batchnorm(x: np.ndarray, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (gamma / np.sqrt(var + eps)).astype(x.dtype)
    return (x - mean.reshape(shape)) * inv.reshape(shape) + beta.reshape(shape)


def avgpool(x: np.ndarray, kernel: int | None = None, global_: bool = False) -> np.ndarray:
    if global_:
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float32)
    n, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    x = x[:, :, : oh * kernel, : ow * kernel].reshape(n, c, oh, kernel, ow, kernel)
    return x.mean(axis=(3, 5), dtype=np.float32)


def apply_layer(layer: Layer, x: np.ndarray, skip: np.ndarray | None = None) -> np.ndarray:
    k, p, a = layer.kind, layer.params, layer.attrs
    if k == "dense":
        if x.ndim != 2 or x.shape[1] != a["in"]:
            raise ShapeError(f"dense expects [n, {a['in']}], got {list(x.shape)}")
        return x @ p["weights"].T + p["bias"]
    if k == "conv2d":
        if x.ndim != 4 or x.shape[1] != a["in"]:
            raise ShapeError(f"conv2d expects [n, {a['in']}, h, w], got {list(x.shape)}")
        return conv2d(x, p["weights"], p["bias"], a.get("stride", 1), a.get("padding", 0))
    if k == "batchnorm":
        if x.shape[1] != a["channels"]:
            raise ShapeError(f"batchnorm expects {a['channels']} channels, got {x.shape[1]}")
        return batchnorm(x, p["gamma"], p["beta"], p["mean"], p["var"], a.get("eps", 1e-5))
    if k == "relu":
        return np.maximum(x, 0, dtype=x.dtype)
    if k == "avgpool":
        if x.ndim != 4:
            raise ShapeError(f"avgpool expects [n, c, h, w], got {list(x.shape)}")
        return avgpool(x, a.get("kernel"), a.get("global", False))
    if k == "flatten":
        return x.reshape(len(x), -1)
    if k == "add":
        if skip is None or skip.shape != x.shape:
            raise ShapeError("residual add with mismatched shapes")
        return x + skip
    raise ModelError(f"unknown layer kind {k!r}")


def forward(model: ModelGraph, batch: np.ndarray, hook=None, return_all: bool = False):
    """Run ``batch`` through the graph and return the final output.

    ``hook(i, layer, y)`` may replace the output of layer ``i``; it is how the
    fake-quantized evaluators inject activation quantization.
    """
    x = np.asarray(batch, dtype=np.float32)
    if model.input_shape is not None and tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"batch shape {list(x.shape[1:])} does not match model input "
            f"{list(model.input_shape)}"
        )
    outputs: list[np.ndarray] = []
    cur = x
    for i, layer in enumerate(model.layers):
        skip = None
        if layer.kind == "add":
            ref = layer.attrs["ref"]
            skip = x if ref == -1 else outputs[ref]
        cur = apply_layer(layer, cur, skip)
        if hook is not None:
            cur = hook(i, layer, cur)
        outputs.append(cur)
    return outputs if return_all else cur


def row_minmax(w: np.ndarray) -> np.ndarray:
    """Per-row (min, max) along the leading axis, as an array [rows, 2]."""
    w = np.asarray(w)
    if w.ndim < 2:
        raise ShapeError("row_minmax needs a tensor of rank >= 2")
    if w.shape[0] == 0 or w[0].size == 0:
        raise ShapeError("row_minmax on an empty row")
    rows = w.reshape(w.shape[0], -1)
    return np.stack([rows.min(axis=1), rows.max(axis=1)], axis=1)


def accuracy(predictions: np.ndarray, labels: Sequence[int]) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim != 2 or len(predictions) != len(labels):
        raise ShapeError(
            f"predictions {list(predictions.shape)} do not match {len(labels)} labels"
        )
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(predictions, axis=1) == labels))
