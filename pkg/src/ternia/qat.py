"""Quantization-aware training with a straight-through estimator.

Master weights stay in float64.  Each step the forward pass sees
``dequantize(quantize(W, op))`` with scales recomputed from the current
weights, and hidden activations quantized to ``abits`` bits against a running
max range.  The backward pass treats both quantizers as the identity inside
their clip range and as zero outside it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, Layer, ModelGraph, accuracy, im2col
from .quant import (
    ExpansionStack,
    Operator,
    compute_scale,
    dequantize,
    quantize,
    quantize_activations,
)
from .parallel import map_ordered

# (W) -> (W_used_in_forward, gradient mask)
WeightQuantizer = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TernaryWeightQuantizer:
    """Fake-quantize with fresh per-row scales; picklable so seeds can run in worker processes."""

    op: Operator

    def __call__(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lam = compute_scale(w)
        wq = dequantize(quantize(w, self.op), np.float64)
        shape = (-1,) + (1,) * (w.ndim - 1)
        mask = np.abs(w) <= lam.reshape(shape)
        return wq, mask


def ternary_weight_quantizer(op: Operator | str) -> WeightQuantizer:
    return TernaryWeightQuantizer(Operator.parse(op))


def identity_quantizer(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return w, np.ones(w.shape, dtype=bool)


# ---------------------------------------------------------------------------
# network


def parse_arch(arch: str) -> tuple[str, list[int]]:
    """``"mlp:16,16"`` or ``"cnn:8,8"`` -> (family, widths)."""
    family, _, rest = arch.partition(":")
    if family not in ("mlp", "cnn"):
        raise ValueError(f"unknown architecture {arch!r}; use mlp:<sizes> or cnn:<channels>")
    try:
        widths = [int(s) for s in rest.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"bad layer sizes in {arch!r}") from None
    if any(w <= 0 for w in widths):
        raise ValueError(f"layer sizes must be positive in {arch!r}")
    return family, widths


def build_layers(arch: str, input_shape: tuple[int, ...], classes: int, rng: np.random.Generator) -> list[Layer]:
    """He-initialised float64 layers for the requested architecture."""
    family, widths = parse_arch(arch)
    layers: list[Layer] = []

    def dense(n_in, n_out):
        w = rng.normal(scale=math.sqrt(2.0 / n_in), size=(n_out, n_in))
        return Layer("dense", {"weights": w, "bias": np.zeros(n_out)}, {"in": n_in, "out": n_out})

    if family == "mlp":
        if len(input_shape) != 1:
            raise ValueError("mlp expects flat [n, d] features")
        n_in = input_shape[0]
        for width in widths:
            layers += [dense(n_in, width), Layer("relu")]
            n_in = width
        layers.append(dense(n_in, classes))
    else:
        if len(input_shape) != 3:
            raise ValueError("cnn expects [n, c, h, w] features")
        c_in = input_shape[0]
        for c_out in widths:
            fan_in = c_in * 9
            w = rng.normal(scale=math.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
            attrs = {"in": c_in, "out": c_out, "kh": 3, "kw": 3, "stride": 1, "padding": 1}
            layers += [Layer("conv2d", {"weights": w, "bias": np.zeros(c_out)}, attrs), Layer("relu")]
            c_in = c_out
        layers += [Layer("avgpool", {}, {"global": True}), Layer("flatten"), dense(c_in, classes)]
    return layers


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`ternia.core.im2col`."""
    n, c, h, w = x_shape
    _, oh, ow, _ = dcols.shape
    d = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    g = p
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    weight_quantizer: WeightQuantizer | None = None
    abits: int | None = None
    act_ranges: dict[int, np.ndarray] = field(default_factory=dict)

    def forward(self, x: np.ndarray, train: bool = False):
        """Return logits and the per-layer cache needed by :meth:`backward`."""
        cache = []
        cur = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            k, p, a = layer.kind, layer.params, layer.attrs
            entry: dict = {}
            if layer.is_weighted:
                w, mask = (p["weights"], None)
                if self.weight_quantizer is not None:
                    w, mask = self.weight_quantizer(p["weights"])
                entry.update(w=w, mask=mask)
            if k == "dense":
                entry["x"] = cur
                cur = cur @ entry["w"].T + p["bias"]
            elif k == "conv2d":
                cols = im2col(cur, a["kh"], a["kw"], a["stride"], a["padding"])
                entry.update(cols=cols, x_shape=cur.shape)
                y = cols @ entry["w"].reshape(a["out"], -1).T + p["bias"]
                cur = y.transpose(0, 3, 1, 2)
            elif k == "relu":
                entry["pos"] = cur > 0
                cur = np.where(entry["pos"], cur, 0.0)
                if self.abits is not None:
                    cur, entry["act_mask"] = self._quantize_act(i, cur, train)
            elif k == "avgpool":
                if not a.get("global"):
                    raise ValueError("training supports global average pooling only")
                entry["x_shape"] = cur.shape
                cur = cur.mean(axis=(2, 3), keepdims=True)
            elif k == "flatten":
                entry["x_shape"] = cur.shape
                cur = cur.reshape(len(cur), -1)
            else:
                raise ValueError(f"training does not support {k} layers")
            cache.append(entry)
        return cur, cache

    def _quantize_act(self, i: int, x: np.ndarray, train: bool):
        if train:
            batch_max = np.abs(x).max(axis=tuple(d for d in range(x.ndim) if d != 1))
            prev = self.act_ranges.get(i)
            self.act_ranges[i] = batch_max if prev is None else np.maximum(prev, batch_max)
        lam = self.act_ranges.get(i)
        if lam is None:
            raise RuntimeError("activation ranges are unset; run a training step first")
        shape = (1, -1) + (1,) * (x.ndim - 2)
        mask = np.abs(x) <= lam.reshape(shape)
        return quantize_activations(x, self.abits, lam).dequantize().astype(np.float64), mask

    def backward(self, g: np.ndarray, cache) -> list[dict[str, np.ndarray]]:
        """Gradients for every weighted layer, in layer order (STE through quantizers)."""
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            layer, entry = self.layers[i], cache[i]
            k, a = layer.kind, layer.attrs
            if k == "dense":
                gw = g.T @ entry["x"]
                grads[i] = {"weights": gw, "bias": g.sum(axis=0)}
                g = g @ entry["w"]
            elif k == "conv2d":
                g2 = g.transpose(0, 2, 3, 1)
                flat = g2.reshape(-1, a["out"])
                cols = entry["cols"].reshape(len(flat), -1)
                gw = (flat.T @ cols).reshape(layer.params["weights"].shape)
                grads[i] = {"weights": gw, "bias": flat.sum(axis=0)}
                dcols = g2 @ entry["w"].reshape(a["out"], -1)
                g = col2im(dcols, entry["x_shape"], a["kh"], a["kw"], a["stride"], a["padding"])
            elif k == "relu":
                if "act_mask" in entry:
                    g = g * entry["act_mask"]
                g = g * entry["pos"]
            elif k == "avgpool":
                n, c, h, w = entry["x_shape"]
                g = np.broadcast_to(g / (h * w), entry["x_shape"])
            elif k == "flatten":
                g = g.reshape(entry["x_shape"])
            if layer.is_weighted and entry["mask"] is not None:
                grads[i]["weights"] = grads[i]["weights"] * entry["mask"]
        return grads

    def loss_and_grads(self, x, y, train: bool = True):
        logits, cache = self.forward(x, train=train)
        loss, g = softmax_xent(logits, y)
        return loss, self.backward(g, cache)

    def predict(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        return np.concatenate([self.forward(x[i : i + batch])[0] for i in range(0, len(x), batch)])

    def to_model(self) -> ModelGraph:
        """Full-precision master weights as a float32 graph."""
        layers = [
            Layer(l.kind, {k: v.astype(np.float32) for k, v in l.params.items()}, dict(l.attrs))
            for l in self.layers
        ]
        return ModelGraph(layers, tuple(self.input_shape))


# ---------------------------------------------------------------------------
# training


@dataclass
class QatConfig:
    arch: str = "mlp:16,16"
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    wbits: int = 2
    abits: int | None = 4
    op: str | None = "tquant"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        if self.op is not None:
            Operator.parse(self.op)
            if self.wbits != 2:
                raise ValueError("ternary runs need wbits = 2")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        parse_arch(self.arch)


@dataclass
class SeedRun:
    seed: int
    accuracy: float
    train_accuracy: float
    diverged: bool
    history: list[float]
    network: Network | None = None


@dataclass
class RunSummary:
    accuracies: list[float]
    mean: float
    std: float
    diverged_seeds: list[int]
    runs: list[SeedRun] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [
            {"seed": r.seed, "accuracy": r.accuracy, "train_accuracy": r.train_accuracy,
             "diverged": r.diverged, "history": r.history}
            for r in self.runs
        ]
        return d


def make_network(cfg: QatConfig, input_shape, classes: int, seed: int, quantizer: WeightQuantizer | None = None) -> Network:
    rng = np.random.default_rng(seed)
    layers = build_layers(cfg.arch, tuple(input_shape), classes, rng)
    if quantizer is None and cfg.op is not None:
        quantizer = ternary_weight_quantizer(cfg.op)
    return Network(layers, tuple(input_shape), quantizer, cfg.abits)


def train_network(net: Network, data: Dataset, cfg: QatConfig, seed: int) -> list[float]:
    """SGD with momentum; returns the per-epoch training-split accuracy."""
    rng = np.random.default_rng([seed, 1])
    x = data.features.astype(np.float64)
    y = data.labels
    velocity = [{k: np.zeros_like(v) for k, v in l.params.items()} for l in net.layers]
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = net.loss_and_grads(x[idx], y[idx], train=True)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss}")
            for layer, g, v in zip(net.layers, grads, velocity):
                for name, grad in g.items():
                    v[name] *= cfg.momentum
                    v[name] -= cfg.lr * grad
                    layer.params[name] += v[name]
        history.append(evaluate_quantized(net, data))
    return history


def evaluate_quantized(net: Network, data: Dataset) -> float:
    """Accuracy under the training forward (quantized weights and activations)."""
    return accuracy(net.predict(data.features.astype(np.float64)), data.labels)


def _run_seed(args) -> SeedRun:
    train, test, cfg, seed = args
    net = make_network(cfg, train.features.shape[1:], max(train.num_classes, test.num_classes), seed)
    try:
        history = train_network(net, train, cfg, seed)
    except (DivergenceError, FloatingPointError):
        return SeedRun(seed, float("nan"), float("nan"), True, [], None)
    return SeedRun(seed, evaluate_quantized(net, test), history[-1], False, history, net)


def summarize(runs: list[SeedRun]) -> RunSummary:
    accs = [r.accuracy for r in runs]
    ok = [a for a in accs if not math.isnan(a)]
    mean = float(np.mean(ok)) if ok else float("nan")
    std = float(np.std(ok, ddof=1)) if len(ok) >= 2 else 0.0
    return RunSummary(accs, mean, std, [r.seed for r in runs if r.diverged], runs)


def ste_train(train: Dataset, cfg: QatConfig, test: Dataset | None = None, workers: int | None = None) -> RunSummary:
    """Train one network per seed and summarise test accuracy (train split if no test set)."""
    test = train if test is None else test
    runs = map_ordered(_run_seed, [(train, test, cfg, s) for s in cfg.seeds], workers)
    return summarize(runs)


def export_quantized(net: Network, op: Operator | str) -> tuple[ModelGraph, dict[int, ExpansionStack]]:
    """The float32 master graph plus the order-1 ternary stacks used in the forward."""
    model = net.to_model()
    stacks = {
        i: ExpansionStack([quantize(net.layers[i].params["weights"], op)])
        for i in model.weighted_layers()
    }
    return model, stacks
