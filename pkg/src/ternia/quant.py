"""Ternary quantization operators, residual expansion and activation ranges.

All three operators share uniform round-to-nearest on a per-row grid and
differ only in the step used for that grid::

    naive   s = lam
    tquant  s = 2/3 * lam               (thresholds at +-lam/3)
    mquant  s = 5 / (7 * sqrt(2)) * lam

where ``lam`` is the symmetric per-row range ``max(|min|, |max|)``.  Codes are
clamped to {-1, 0, 1}; rounding ties go away from zero.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Layer,
    ModelError,
    ModelGraph,
    PARAM_NAMES,
    layer_from_record,
    layer_record,
    read_blob,
    validate,
    write_blob,
)

MQUANT_FACTOR = 5.0 / (7.0 * math.sqrt(2.0))


class Operator(str, enum.Enum):
    NAIVE = "naive"
    TQUANT = "tquant"
    MQUANT = "mquant"

    @property
    def step_factor(self) -> float:
        return _STEP_FACTORS[self]

    @classmethod
    def parse(cls, op: "str | Operator") -> "Operator":
        try:
            return cls(op)
        except ValueError:
            raise ValueError(
                f"unknown operator {op!r}; expected one of {[o.value for o in cls]}"
            ) from None


_STEP_FACTORS = {
    Operator.NAIVE: 1.0,
    Operator.TQUANT: 2.0 / 3.0,
    Operator.MQUANT: MQUANT_FACTOR,
}


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _rows(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim < 2:
        raise ValueError(f"expected a tensor of rank >= 2, got shape {list(w.shape)}")
    return w.reshape(w.shape[0], -1)


def compute_scale(w: np.ndarray, bits: int | None = None) -> np.ndarray:
    """Per-row scale.

    With ``bits`` set, this is the asymmetric b-bit form
    ``max(|min| / 2**(b-1), |max| / (2**(b-1) - 1))``.  With ``bits=None`` it is
    the symmetric ternary range ``max(|min|, |max|)``.  All-zero rows get 0.
    """
    rows = _rows(w).astype(np.float64)
    lo, hi = np.abs(rows.min(axis=1)), np.abs(rows.max(axis=1))
    if bits is None:
        return np.maximum(lo, hi)
    if bits < 2:
        raise ValueError("bit-width must be >= 2")
    half = 2.0 ** (bits - 1)
    return np.maximum(lo / half, hi / (half - 1))


@dataclass
class TernaryTensor:
    codes: np.ndarray  # int8, source shape
    scale: np.ndarray  # float64 [rows], effective dequantization step

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def histogram(self) -> dict[int, int]:
        return {v: int(np.count_nonzero(self.codes == v)) for v in (-1, 0, 1)}


@dataclass
class ExpansionStack:
    terms: list[TernaryTensor] = field(default_factory=list)

    @property
    def order(self) -> int:
        return len(self.terms)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        total = np.zeros(self.terms[0].shape, dtype=np.float64)
        for t in self.terms:
            total += dequantize(t, np.float64)
        return total.astype(dtype)


@dataclass
class QuantizedTensorB:
    codes: np.ndarray  # int32, values in [-2**(b-1), 2**(b-1) - 1]
    bits: int
    scale: np.ndarray  # per-channel step
    axis: int = 1

    def dequantize(self) -> np.ndarray:
        shape = [1] * self.codes.ndim
        shape[self.axis] = -1
        return (self.codes * self.scale.reshape(shape)).astype(np.float32)


def ternary_codes(w: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Round ``w`` onto a per-row grid of spacing ``step`` and clamp to {-1, 0, 1}."""
    rows = _rows(w).astype(np.float64)
    step = np.asarray(step, dtype=np.float64)
    safe = np.where(step > 0, step, 1.0)
    codes = np.clip(round_half_away(rows / safe[:, None]), -1, 1)
    codes[step <= 0] = 0
    return codes.astype(np.int8).reshape(np.shape(w))


def quantize(w: np.ndarray, op: Operator | str) -> TernaryTensor:
    op = Operator.parse(op)
    step = op.step_factor * compute_scale(w)
    return TernaryTensor(ternary_codes(w, step), step)


def dequantize(t: TernaryTensor, dtype=np.float32) -> np.ndarray:
    rows = t.codes.reshape(t.codes.shape[0], -1) * t.scale[:, None]
    return rows.reshape(t.codes.shape).astype(dtype)


def expand(w: np.ndarray, op: Operator | str, order: int) -> ExpansionStack:
    """Residual expansion: each term quantizes what the previous terms missed."""
    if order < 1:
        raise ValueError("expansion order must be >= 1")
    residual = np.asarray(w, dtype=np.float64)
    stack = ExpansionStack()
    for _ in range(order):
        term = quantize(residual, op)
        stack.terms.append(term)
        residual = residual - dequantize(term, np.float64)
    return stack


def residual_maxabs(w: np.ndarray, stack: ExpansionStack) -> np.ndarray:
    """Per-row max |w - approx| after each term, shape [order + 1, rows]."""
    residual = _rows(np.asarray(w, dtype=np.float64))
    out = [np.abs(residual).max(axis=1)]
    for t in stack.terms:
        residual = residual - _rows(dequantize(t, np.float64))
        out.append(np.abs(residual).max(axis=1))
    return np.stack(out)


# ---------------------------------------------------------------------------
# activations


def act_range_from_bn(gamma: np.ndarray, beta: np.ndarray, n: float = 3.0) -> np.ndarray:
    """Data-free activation range ``|beta| + n * |gamma|`` per channel."""
    if n <= 0:
        raise ValueError("multiplier must be positive")
    return np.abs(np.asarray(beta, np.float64)) + n * np.abs(np.asarray(gamma, np.float64))


def act_range_from_data(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Per-channel max |x|, the max-range estimator."""
    x = np.asarray(x, dtype=np.float64)
    other = tuple(i for i in range(x.ndim) if i != axis)
    return np.abs(x).max(axis=other)


def activation_step(lam: np.ndarray, bits: int, op: Operator | str = Operator.NAIVE) -> np.ndarray:
    """Grid spacing for activations of symmetric range ``lam``.

    For 2 bits the operator's ternary step applies; wider grids use
    ``lam / 2**(b-1)`` over the interval [-2**(b-1), 2**(b-1) - 1].
    """
    lam = np.asarray(lam, dtype=np.float64)
    if bits == 2:
        return Operator.parse(op).step_factor * lam
    if bits < 2:
        raise ValueError("bit-width must be >= 2")
    return lam / 2.0 ** (bits - 1)


def quantize_activations(
    x: np.ndarray, bits: int, lam: np.ndarray | float, op: Operator | str = Operator.NAIVE, axis: int = 1
) -> QuantizedTensorB:
    x = np.asarray(x, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (x.shape[axis],))
    step = activation_step(lam, bits, op)
    lo, hi = (-1, 1) if bits == 2 else (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    shape = [1] * x.ndim
    shape[axis] = -1
    safe = np.where(step > 0, step, 1.0).reshape(shape)
    codes = np.clip(round_half_away(x / safe), lo, hi)
    codes = np.where((step > 0).reshape(shape), codes, 0)
    return QuantizedTensorB(codes.astype(np.int32), bits, step, axis)


def fake_quantize_activations(x, bits, lam, op=Operator.NAIVE, axis: int = 1) -> np.ndarray:
    return quantize_activations(x, bits, lam, op, axis).dequantize()


# ---------------------------------------------------------------------------
# model-level helpers


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Fold every batchnorm that directly follows a dense/conv layer into it.

    Residual references are remapped onto the surviving layers.
    """
    layers: list[Layer] = []
    remap: dict[int, int] = {-1: -1}
    for i, layer in enumerate(model.layers):
        prev = layers[-1] if layers else None
        if layer.kind == "batchnorm" and prev is not None and prev.is_weighted and remap.get(i - 1) == len(layers) - 1:
            p = layer.params
            mult = p["gamma"].astype(np.float64) / np.sqrt(p["var"].astype(np.float64) + layer.attrs.get("eps", 1e-5))
            w = prev.params["weights"].astype(np.float64)
            shape = (-1,) + (1,) * (w.ndim - 1)
            prev.params["weights"] = (w * mult.reshape(shape)).astype(np.float32)
            bias = (prev.params["bias"] - p["mean"]) * mult + p["beta"]
            prev.params["bias"] = bias.astype(np.float32)
            remap[i] = len(layers) - 1
            continue
        new = Layer(layer.kind, {k: v.copy() for k, v in layer.params.items()}, dict(layer.attrs))
        if new.kind == "add":
            new.attrs["ref"] = remap[new.attrs["ref"]]
        remap[i] = len(layers)
        layers.append(new)
    return ModelGraph(layers, model.input_shape)


def quantize_model(model: ModelGraph, op: Operator | str, order: int = 1) -> dict[int, ExpansionStack]:
    """Expand every weighted layer; returns stacks keyed by layer index."""
    return {i: expand(model.layers[i].params["weights"], op, order) for i in model.weighted_layers()}


def dequantized_model(model: ModelGraph, stacks: dict[int, ExpansionStack]) -> ModelGraph:
    out = model.copy()
    for i, stack in stacks.items():
        out.layers[i].params["weights"] = stack.dequantize(np.float32)
    return out


def save_quantized(
    model: ModelGraph, stacks: dict[int, ExpansionStack], op: Operator | str, path: str | Path
) -> None:
    """Write a quantized container: int8 code blobs and float32 scale blobs per term."""
    op = Operator.parse(op)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    records = []
    for i, layer in enumerate(model.layers):
        rec = layer_record(layer)
        if i in stacks:
            terms = []
            for j, term in enumerate(stacks[i].terms):
                cname, sname = f"{stem}.{i}_t{j}_codes.bin", f"{stem}.{i}_t{j}_scale.bin"
                write_blob(path.parent / cname, term.codes, np.dtype("i1"))
                write_blob(path.parent / sname, term.scale)
                terms.append({"codes": cname, "scale": sname})
            rec.update({"op": op.value, "order": stacks[i].order, "terms": terms})
            bname = f"{stem}.{i}_bias.bin"
            write_blob(path.parent / bname, layer.params["bias"])
            rec["bias"] = bname
        else:
            for pname in PARAM_NAMES.get(layer.kind, ()):
                fname = f"{stem}.{i}_{pname}.bin"
                write_blob(path.parent / fname, layer.params[pname])
                rec[pname] = fname
        records.append(rec)
    manifest: dict = {"layers": records}
    if model.input_shape is not None:
        manifest["input_shape"] = list(model.input_shape)
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_quantized(path: str | Path) -> tuple[ModelGraph, dict[int, ExpansionStack], Operator | None]:
    """Read a quantized container; weights of the returned graph are dequantized."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read manifest {path}: {exc}") from None
    base = path.parent
    layers, stacks, op = [], {}, None
    for i, rec in enumerate(manifest["layers"]):
        if "terms" not in rec:
            layers.append(layer_from_record(rec, i, base))
            continue
        layer = layer_from_record(rec, i, base, extra_params=("weights",))
        shape = layer.weight_shape()
        stack = ExpansionStack()
        for term in rec["terms"]:
            codes = read_blob(base / term["codes"], np.dtype("i1"))
            scale = read_blob(base / term["scale"]).astype(np.float64)
            if codes.size != int(np.prod(shape)) or scale.size != shape[0]:
                raise ModelError(f"layer {i} ({layer.kind}): term blobs do not match {list(shape)}")
            if np.any(np.abs(codes) > 1):
                raise ModelError(f"layer {i} ({layer.kind}): codes outside {{-1, 0, 1}}")
            stack.terms.append(TernaryTensor(codes.reshape(shape), scale))
        if len(stack.terms) != rec.get("order", len(stack.terms)) or not stack.terms:
            raise ModelError(f"layer {i} ({layer.kind}): order does not match terms")
        layer.params["weights"] = stack.dequantize(np.float32)
        stacks[i] = stack
        op = Operator.parse(rec["op"])
        layers.append(layer)
    in_shape = manifest.get("input_shape")
    model = ModelGraph(layers, tuple(in_shape) if in_shape else None)
    validate(model)
    return model, stacks, op


def contraction_factors(w: np.ndarray, op: Operator | str, order: int) -> np.ndarray:
    """Per-term ratios of residual max-abs, shape [order, rows]; nan where the residual is 0."""
    norms = residual_maxabs(w, expand(w, op, order))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms[:-1] > 0, norms[1:] / np.where(norms[:-1] > 0, norms[:-1], 1), np.nan)


def per_row_max_error(w: np.ndarray, approx: np.ndarray) -> np.ndarray:
    return np.abs(_rows(np.asarray(w, np.float64)) - _rows(np.asarray(approx, np.float64))).max(axis=1)



def data_free_act_ranges(model: ModelGraph, n: float = 3.0) -> dict[int, np.ndarray]:
    """Ranges for each relu whose input comes straight out of a batchnorm."""
    ranges = {}
    for i, layer in enumerate(model.layers):
        if layer.kind == "relu" and i > 0 and model.layers[i - 1].kind == "batchnorm":
            bn = model.layers[i - 1].params
            ranges[i] = act_range_from_bn(bn["gamma"], bn["beta"], n)
    return ranges


def act_quant_hook(ranges: dict[int, np.ndarray], bits: int, op: Operator | str = Operator.NAIVE):
    """Forward hook that fake-quantizes the output of every relu listed in ``ranges``."""

    def hook(i, layer, y):
        if i not in ranges:
            return y
        return fake_quantize_activations(y, bits, ranges[i], op)

    return hook
