"""Command-line entry point: ``ternia <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Every report is JSON
and every table is CSV with a header row.  Outputs are staged in a temporary
directory and only moved into place once the command has succeeded.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets, gauss, ptq, qat, quant
from .analysis import analyze, to_csv
from .core import ModelGraph, accuracy, forward, load_dataset, load_model, save_dataset, save_model

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def report(command: str, argv: list[str], config: dict, metrics: dict, seed: int) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "metrics": metrics,
    }
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


@contextmanager
def staged(*targets: str | Path):
    """Yield a scratch directory; on success move everything in it next to ``targets``.

    Files are written into the scratch directory under their final basenames,
    so nothing appears at the destination if the command fails.
    """
    dests = {Path(t).parent.resolve() for t in targets}
    if len(dests) != 1:
        raise UsageError("all outputs of one command must share a directory")
    dest = dests.pop()
    if not dest.is_dir():
        raise FileNotFoundError(f"output directory {dest} does not exist")
    tmp = Path(tempfile.mkdtemp(prefix=".ternia-", dir=dest))
    try:
        yield tmp
        for f in sorted(tmp.iterdir()):
            os.replace(f, dest / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _sidecar(out: str, suffix: str) -> str:
    p = Path(out)
    return str(p.with_name(p.stem + suffix))


def _load_any(path: str):
    """A plain model or a quantized container, returned as (graph, stacks, op)."""
    manifest = json.loads(Path(path).read_text())
    if any("terms" in rec for rec in manifest.get("layers", [])):
        return quant.load_quantized(path)
    return load_model(path), {}, None


def _dataset_for(model: ModelGraph, path: str):
    shape = model.input_shape if model.input_shape and len(model.input_shape) > 1 else None
    return load_dataset(path, shape)


# ---------------------------------------------------------------------------
# subcommands


def cmd_quantize(args, argv):
    if args.order < 1:
        raise UsageError("--order must be >= 1")
    model = load_model(args.model)
    if args.fold_bn:
        model = quant.fold_batchnorm(model)
    stacks = quant.quantize_model(model, args.op, args.order)
    rows = []
    for i, stack in stacks.items():
        w = model.layers[i].params["weights"]
        norms = quant.residual_maxabs(w, stack)
        approx = np.zeros(w.shape)
        for j, term in enumerate(stack.terms):
            approx = approx + quant.dequantize(term, np.float64)
            rows.append({
                "layer": i,
                "term": j + 1,
                "residual_max_abs": float(norms[j + 1].max()),
                "residual_mse": float(np.mean((w - approx) ** 2)),
                "contraction": float(np.nanmax(np.where(norms[j] > 0, norms[j + 1] / np.where(norms[j] > 0, norms[j], 1), 0.0))),
                "zero_fraction": term.histogram()[0] / w.size,
            })
    qmodel = quant.dequantized_model(model, stacks)
    metrics = {"layers": analyze(model, qmodel, stacks), "residuals": rows}
    cfg = {"model": args.model, "op": args.op, "order": args.order, "fold_bn": args.fold_bn}
    report_path = args.report or _sidecar(args.out, ".report.json")
    csv_path = _sidecar(args.out, ".residuals.csv")
    with staged(args.out, report_path, csv_path) as tmp:
        quant.save_quantized(model, stacks, args.op, tmp / Path(args.out).name)
        (tmp / Path(csv_path).name).write_text(to_csv(rows))
        (tmp / Path(report_path).name).write_text(report("quantize", argv, cfg, metrics, args.seed))


def cmd_eval(args, argv):
    model, stacks, op = _load_any(args.model)
    data = _dataset_for(model, args.data)
    hook = None
    sources = {}
    if args.abits:
        ranges = quant.data_free_act_ranges(model, args.n_sigma)
        sources = {i: "batchnorm" for i in ranges}
        if args.act_range == "max" or any(l.kind == "relu" and i not in ranges for i, l in enumerate(model.layers)):
            observed = forward(model, data.features, return_all=True)
            for i, layer in enumerate(model.layers):
                if layer.kind == "relu" and (args.act_range == "max" or i not in ranges):
                    ranges[i] = quant.act_range_from_data(observed[i])
                    sources[i] = "max"
        hook = quant.act_quant_hook(ranges, args.abits, args.act_op)
    logits = forward(model, data.features, hook=hook)
    metrics = {
        "accuracy": accuracy(logits, data.labels),
        "samples": len(data),
        "weight_op": op.value if op else None,
        "orders": {str(i): s.order for i, s in stacks.items()},
        "activation_range_source": {str(i): s for i, s in sorted(sources.items())},
    }
    cfg = {"model": args.model, "data": args.data, "abits": args.abits, "act_op": args.act_op,
           "act_range": args.act_range, "n_sigma": args.n_sigma}
    with staged(args.out) as tmp:
        (tmp / Path(args.out).name).write_text(report("eval", argv, cfg, metrics, args.seed))


def cmd_ptq(args, argv):
    model = load_model(args.model)
    calib = _dataset_for(model, args.calib)
    cfg = ptq.PtqConfig(iterations=args.iters, lr=args.lr, reg_weight=args.reg_weight,
                        batch_size=args.batch_size, seed=args.seed)
    qmodel, stacks, fits = ptq.ptq_quantize_model(model, calib, args.op, cfg)
    loss_rows = [
        {"layer": i, "iteration": t, "loss": loss}
        for i, fit in fits.items()
        for t, loss in enumerate(fit.losses)
    ]
    metrics = {
        "layers": analyze(model, qmodel, stacks),
        "fits": {str(i): {"nearest_loss": f.nearest_loss, "final_loss": f.final_loss} for i, f in fits.items()},
    }
    if args.test:
        test = _dataset_for(model, args.test)
        metrics["accuracy"] = accuracy(forward(qmodel, test.features), test.labels)
        metrics["fp_accuracy"] = accuracy(forward(model, test.features), test.labels)
    config = {"model": args.model, "calib": args.calib, "op": args.op, "test": args.test,
              **{k: getattr(cfg, k) for k in ("iterations", "lr", "reg_weight", "beta_start", "beta_end", "warmup", "hold",
                                              "batch_size")}}
    report_path = args.report or _sidecar(args.out, ".report.json")
    csv_path = _sidecar(args.out, ".losses.csv")
    with staged(args.out, report_path, csv_path) as tmp:
        quant.save_quantized(model, stacks, args.op, tmp / Path(args.out).name)
        (tmp / Path(csv_path).name).write_text(to_csv(loss_rows, ("layer", "iteration", "loss")))
        (tmp / Path(report_path).name).write_text(report("ptq", argv, config, metrics, args.seed))


def cmd_qat(args, argv):
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    op = None if args.op == "none" else args.op
    train = load_dataset(args.data, args.input_shape)
    test = load_dataset(args.test, args.input_shape) if args.test else None
    cfg = qat.QatConfig(
        arch=args.arch, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, wbits=args.wbits, abits=args.abits or None, op=op,
        seeds=tuple(range(args.seed, args.seed + args.seeds)),
    )
    summary = qat.ste_train(train, cfg, test)
    config = {k: getattr(cfg, k) for k in ("arch", "epochs", "lr", "momentum", "batch_size", "wbits", "abits", "op", "seeds")}
    config.update(data=args.data, test=args.test)
    metrics = summary.to_dict()
    first = next((r for r in summary.runs if r.network is not None), None)
    if first is not None and first.network.act_ranges:
        metrics["activation_ranges"] = {str(i): r.tolist() for i, r in sorted(first.network.act_ranges.items())}
    outputs = [args.out] + ([args.model_out] if args.model_out else [])
    with staged(*outputs) as tmp:
        if args.model_out:
            if first is None:
                raise RuntimeError("every seed diverged; no model to write")
            target = tmp / Path(args.model_out).name
            if op is None:
                save_model(first.network.to_model(), target)
            else:
                quant.save_quantized(*qat.export_quantized(first.network, op), op, target)
        (tmp / Path(args.out).name).write_text(report("qat", argv, config, metrics, args.seed))


def cmd_theory(args, argv):
    if args.lam <= 0:
        raise UsageError("--lambda must be positive")
    rep = gauss.theory_report(args.lam, args.mc_samples, args.seed)
    config = {"lambda": args.lam, "mc_samples": args.mc_samples}
    with staged(args.out) as tmp:
        (tmp / Path(args.out).name).write_text(report("theory", argv, config, rep.to_dict(), args.seed))


def cmd_analyze(args, argv):
    model = load_model(args.model)
    qmodel, stacks, _ = _load_any(args.quantized)
    rows = analyze(model, qmodel, stacks)
    report_path = args.report or _sidecar(args.out, ".report.json")
    config = {"model": args.model, "quantized": args.quantized}
    with staged(args.out, report_path) as tmp:
        (tmp / Path(args.out).name).write_text(to_csv(rows))
        (tmp / Path(report_path).name).write_text(report("analyze", argv, config, {"layers": rows}, args.seed))


def cmd_make_data(args, argv):
    gen = {
        "gaussians": lambda s: datasets.gaussian_mixture(args.n, args.classes, args.dim, args.spread, seed=s),
        "spirals": lambda s: datasets.two_spirals(args.n, seed=s),
        "separable": lambda s: datasets.linearly_separable(args.n, args.dim, seed=s),
    }[args.kind]
    data = gen(args.seed)
    outputs = [args.out] + ([args.test_out] if args.test_out else [])
    with staged(*outputs) as tmp:
        if args.test_out:
            train, test = datasets.split(data, args.test_fraction, seed=args.seed)
            save_dataset(test, tmp / Path(args.test_out).name)
        else:
            train = data
        save_dataset(train, tmp / Path(args.out).name)


# ---------------------------------------------------------------------------


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ops = [o.value for o in quant.Operator]
    p = argparse.ArgumentParser(prog="ternia", description="Ternary quantization toolkit.")
    p.add_argument("--version", action="version", version=f"ternia {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root of every random stream (default 0)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("quantize", parents=[common], help="data-free ternary expansion of every weight layer")
    s.add_argument("--model", required=True)
    s.add_argument("--op", choices=ops, required=True)
    s.add_argument("--order", type=int, default=1)
    s.add_argument("--fold-bn", action="store_true", help="fold batchnorm into the preceding layer first")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", parents=[common], help="accuracy of a float or quantized model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--abits", type=int, choices=[2, 4, 8], help="fake-quantize relu outputs")
    s.add_argument("--act-op", choices=ops, default="naive", help="operator for 2-bit activations")
    s.add_argument("--act-range", choices=["bn", "max"], default="bn")
    s.add_argument("--n-sigma", type=float, default=3.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ptq", parents=[common], help="AdaRound-lite post-training quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--op", choices=ops, required=True)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--reg-weight", type=float, default=ptq.PtqConfig.reg_weight)
    s.add_argument("--batch-size", type=int, default=0)
    s.add_argument("--test")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_ptq)

    s = sub.add_parser("qat", parents=[common], help="straight-through quantization-aware training")
    s.add_argument("--arch", default="mlp:16,16")
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--input-shape", type=_shape, help="per-sample shape for image CSVs, e.g. 1,8,8")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    s.add_argument("--wbits", type=int, default=2)
    s.add_argument("--abits", type=int, default=4, help="0 keeps activations in float")
    s.add_argument("--op", choices=ops + ["none"], default="tquant")
    s.add_argument("--out", required=True)
    s.add_argument("--model-out")
    s.set_defaults(func=cmd_qat)

    s = sub.add_parser("theory", parents=[common], help="Gaussian-prior error analysis")
    s.add_argument("--lambda", dest="lam", type=float, default=3.0)
    s.add_argument("--mc-samples", type=int, default=1_000_000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_theory)

    s = sub.add_parser("analyze", parents=[common], help="per-layer error table")
    s.add_argument("--model", required=True)
    s.add_argument("--quantized", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("make-data", parents=[common], help="write a synthetic dataset as CSV")
    s.add_argument("--kind", choices=sorted(datasets.GENERATORS), default="gaussians")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--spread", type=float, default=2.0)
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.add_argument("--out", required=True)
    s.add_argument("--test-out")
    s.set_defaults(func=cmd_make_data)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"ternia {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"ternia {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
