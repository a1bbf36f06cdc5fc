"""Per-layer comparison of a float model against its quantized counterpart."""

from __future__ import annotations

import csv
import io

import numpy as np

from .core import ModelError, ModelGraph
from .quant import ExpansionStack, compute_scale, per_row_max_error

COLUMNS = (
    "layer", "kind", "order", "rows", "max_abs_error", "mse", "lambda_max",
    "max_error_over_lambda", "codes_minus1", "codes_zero", "codes_plus1", "zero_fraction",
)


def analyze(
    model: ModelGraph, quantized: ModelGraph, stacks: dict[int, ExpansionStack] | None = None
) -> list[dict]:
    """One row per weighted layer: errors against the float weights and the
    histogram of first-term codes (empty counts when no codes are known)."""
    if len(model) != len(quantized):
        raise ModelError(f"layer count differs: {len(model)} vs {len(quantized)}")
    stacks = stacks or {}
    rows = []
    for i in model.weighted_layers():
        ref, other = model.layers[i], quantized.layers[i]
        if other.kind != ref.kind or other.params["weights"].shape != ref.params["weights"].shape:
            raise ModelError(f"layer {i}: {ref.kind} does not match {other.kind}")
        w = ref.params["weights"].astype(np.float64)
        wq = other.params["weights"].astype(np.float64)
        lam = compute_scale(w)
        err = per_row_max_error(w, wq)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(lam > 0, err / np.where(lam > 0, lam, 1.0), 0.0)
        hist = stacks[i].terms[0].histogram() if i in stacks else {-1: 0, 0: 0, 1: 0}
        total = sum(hist.values())
        rows.append({
            "layer": i,
            "kind": ref.kind,
            "order": stacks[i].order if i in stacks else 0,
            "rows": w.shape[0],
            "max_abs_error": float(err.max()),
            "mse": float(np.mean((w - wq) ** 2)),
            "lambda_max": float(lam.max()),
            "max_error_over_lambda": float(ratio.max()),
            "codes_minus1": hist[-1],
            "codes_zero": hist[0],
            "codes_plus1": hist[1],
            "zero_fraction": hist[0] / total if total else 0.0,
        })
    return rows


def to_csv(rows: list[dict], columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else COLUMNS))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
