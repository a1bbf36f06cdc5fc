"""AdaRound-lite: learn per-weight up/down rounding on a calibration set.

The fitter only ever sees the per-row grid step, never the operator that
produced it, so any ternary operator's scales can be plugged in.

Soft weights are ``s * clip(floor(W / s) + h(V), -1, 1)`` with the rectified
sigmoid ``h(V) = clip(1.2 * sigmoid(V) - 0.1, 0, 1)``.  The objective is the
relative layer-output reconstruction error plus
``reg_weight * sum(c * (1 - |2 h - 1| ** beta))``, where ``c`` is each scalar's
own reconstruction curvature.  With that weighting any ``reg_weight > 1/4``
makes every coordinate concave once ``beta`` reaches 2, so the rounding
variables end up binary whatever the row scale or input energy.  ``beta`` is
annealed from ``beta_start`` to ``beta_end`` after a warm-up with no
regulariser and held at ``beta_end`` for the last ``hold`` fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, ModelGraph, forward, im2col
from .quant import ExpansionStack, Operator, TernaryTensor, compute_scale, dequantized_model

ZETA, GAMMA = 1.1, -0.1


class PtqError(RuntimeError):
    pass


@dataclass
class PtqConfig:
    iterations: int = 1000
    lr: float = 1e-2
    reg_weight: float = 1.0
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    hold: float = 0.2  # final fraction spent at beta_end
    batch_size: int = 0  # 0: full calibration set every step
    max_rows: int = 20000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.beta_end > self.beta_start:
            raise ValueError("beta must anneal from high to low")
        if not 0 <= self.warmup < 1 or not 0 <= self.hold < 1 or self.warmup + self.hold >= 1:
            raise ValueError("warmup and hold are fractions summing to less than 1")

    def beta_at(self, t: int) -> float | None:
        """Regulariser exponent at iteration ``t``; None during warm-up."""
        start = int(self.warmup * self.iterations)
        stop = self.iterations - int(self.hold * self.iterations)
        if t < start:
            return None
        frac = min((t - start) / max(stop - start - 1, 1), 1.0)
        return self.beta_end + (self.beta_start - self.beta_end) * (1.0 - frac)


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip((ZETA - GAMMA) / (1.0 + np.exp(-v)) + GAMMA, 0.0, 1.0)


def _inverse_rectified_sigmoid(h: np.ndarray) -> np.ndarray:
    p = (np.clip(h, 0.0, 1.0) - GAMMA) / (ZETA - GAMMA)
    return np.log(p / (1.0 - p))


@dataclass
class RoundingState:
    v: np.ndarray
    base: np.ndarray  # floor(W / s)
    step: np.ndarray  # [rows]

    @property
    def h(self) -> np.ndarray:
        return rectified_sigmoid(self.v)

    def soft_codes(self) -> np.ndarray:
        return np.clip(self.base + self.h, -1.0, 1.0)

    def hard_codes(self) -> np.ndarray:
        return np.clip(self.base + (self.h > 0.5), -1, 1).astype(np.int8)


@dataclass
class FitResult:
    tensor: TernaryTensor
    state: RoundingState
    losses: list[float] = field(default_factory=list)
    nearest_loss: float = math.nan
    final_loss: float = math.nan


def _grid_position(w: np.ndarray, step: np.ndarray) -> np.ndarray:
    safe = np.where(step > 0, step, 1.0)
    r = w / safe[:, None]
    near = np.rint(r)
    # snap values that sit on a grid point up to float noise
    return np.where(np.abs(r - near) < 1e-9, near, r)


def reconstruction_error(w: np.ndarray, w_hat: np.ndarray, gram: np.ndarray, ref: float) -> float:
    d = w_hat - w
    return float(np.einsum("ij,jk,ik->", d, gram, d) / ref)


def adaround_fit(w: np.ndarray, step: np.ndarray, x: np.ndarray, cfg: PtqConfig | None = None) -> FitResult:
    """Learn rounding for ``w`` [rows, k] on the grid ``step`` [rows] given inputs ``x`` [n, k]."""
    cfg = cfg or PtqConfig()
    w = np.asarray(w, dtype=np.float64)
    w = w.reshape(w.shape[0], -1)
    step = np.asarray(step, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise PtqError("empty calibration set")
    if x.shape[1] != w.shape[1]:
        raise PtqError(f"calibration inputs have {x.shape[1]} features, weights expect {w.shape[1]}")
    rng = np.random.default_rng(cfg.seed)

    pos = _grid_position(w, step)
    base = np.floor(pos)
    h0 = pos - base
    live = (base >= -1) & (base <= 0) & (step[:, None] > 0)  # only these can change value
    s = step[:, None]

    full_gram = x.T @ x / len(x)
    ref = float(np.einsum("ij,jk,ik->", w, full_gram, w)) or 1.0
    # per-scalar curvature of the reconstruction term; weighting the regulariser
    # by it keeps the balance independent of row scale and input energy
    curv = s * s * np.diag(full_gram)[None, :] / ref * live
    # weights fed by an all-zero input never move; start them saturated at nearest
    v0 = np.where(curv > 0, _inverse_rectified_sigmoid(h0), np.where(h0 > 0.5, 10.0, -10.0))
    state = RoundingState(v0, base, step)

    def hard_weights():
        return s * state.hard_codes()

    nearest = s * np.clip(np.rint(pos), -1, 1)
    result = FitResult(TernaryTensor(np.zeros(w.shape, np.int8), step), state)
    result.nearest_loss = reconstruction_error(w, nearest, full_gram, ref)

    m = np.zeros_like(state.v)
    v2 = np.zeros_like(state.v)
    b1, b2, eps = 0.9, 0.999, 1e-16  # tiny eps keeps low-energy inputs moving
    for t in range(cfg.iterations):
        if 0 < cfg.batch_size < len(x):
            xb = x[rng.choice(len(x), cfg.batch_size, replace=False)]
            gram = xb.T @ xb / len(xb)
        else:
            gram = full_gram
        h = state.h
        w_hat = s * np.clip(base + h, -1.0, 1.0)
        diff = w_hat - w
        dg = diff @ gram
        rec = float(np.sum(dg * diff)) / ref
        grad_h = 2.0 * dg / ref * s * live
        beta = cfg.beta_at(t)
        reg = 0.0
        if beta is not None:
            u = 2.0 * h - 1.0
            reg = cfg.reg_weight * float(np.sum(curv * (1.0 - np.abs(u) ** beta)))
            grad_h = grad_h - cfg.reg_weight * curv * beta * np.abs(u) ** (beta - 1) * np.sign(u) * 2.0
        loss = rec + reg
        if not math.isfinite(loss):
            raise PtqError(f"non-finite loss at iteration {t}")
        result.losses.append(loss)
        sig = 1.0 / (1.0 + np.exp(-state.v))
        inside = (h > 0.0) & (h < 1.0)
        grad_v = grad_h * (ZETA - GAMMA) * sig * (1.0 - sig) * inside
        m = b1 * m + (1 - b1) * grad_v
        v2 = b2 * v2 + (1 - b2) * grad_v * grad_v
        mh = m / (1 - b1 ** (t + 1))
        vh = v2 / (1 - b2 ** (t + 1))
        state.v = state.v - cfg.lr * mh / (np.sqrt(vh) + eps)

    result.tensor = TernaryTensor(state.hard_codes(), step)
    result.final_loss = reconstruction_error(w, hard_weights(), full_gram, ref)
    return result


def layer_inputs(model: ModelGraph, index: int, batch: np.ndarray) -> np.ndarray:
    """Inputs seen by weighted layer ``index``, as rows matching its flattened weights."""
    x = np.asarray(batch, dtype=np.float32)
    if index > 0:
        prefix = ModelGraph(model.layers[:index], model.input_shape)
        x = forward(prefix, x)
    layer = model.layers[index]
    if layer.kind == "conv2d":
        a = layer.attrs
        cols = im2col(x, a["kh"], a["kw"], a.get("stride", 1), a.get("padding", 0))
        return cols.reshape(-1, cols.shape[-1])
    return x


def ptq_quantize_model(
    model: ModelGraph, calib: Dataset, op: Operator | str, cfg: PtqConfig | None = None
) -> tuple[ModelGraph, dict[int, ExpansionStack], dict[int, FitResult]]:
    """Quantize weight layers in order, each calibrated on the already-quantized prefix.

    Returns the dequantized graph (activations untouched), the ternary stacks
    and the per-layer fit results.
    """
    cfg = cfg or PtqConfig()
    op = Operator.parse(op)
    if len(calib) == 0:
        raise PtqError("empty calibration set")
    current = model.copy()
    stacks: dict[int, ExpansionStack] = {}
    fits: dict[int, FitResult] = {}
    rng = np.random.default_rng(cfg.seed)
    for i in model.weighted_layers():
        x = layer_inputs(current, i, calib.features)
        if len(x) > cfg.max_rows:
            x = x[np.sort(rng.choice(len(x), cfg.max_rows, replace=False))]
        w = model.layers[i].params["weights"]
        step = op.step_factor * compute_scale(w)
        fit = adaround_fit(w, step, x, cfg)
        fit.tensor = TernaryTensor(fit.tensor.codes.reshape(w.shape), step)
        stacks[i] = ExpansionStack([fit.tensor])
        fits[i] = fit
        current = dequantized_model(current, {i: stacks[i]})
    return current, stacks, fits
