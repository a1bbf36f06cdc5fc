import json

import numpy as np
import pytest

from ternia import core, datasets, qat

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_manifest(tmp_path, layers, input_shape=None, name="m.json"):
    """Write a manifest; ``layers`` holds dicts whose array values become blobs."""
    records = []
    for i, layer in enumerate(layers):
        rec = {}
        for key, value in layer.items():
            if isinstance(value, (list, np.ndarray)):
                fname = f"l{i}_{key}.bin"
                core.write_blob(tmp_path / fname, np.asarray(value, dtype=np.float32))
                rec[key] = fname
            else:
                rec[key] = value
        records.append(rec)
    manifest = {"layers": records}
    if input_shape is not None:
        manifest["input_shape"] = list(input_shape)
    path = tmp_path / name
    path.write_text(json.dumps(manifest))
    return path


# toy setups shared by the trend tests --------------------------------------

PTQ_SEEDS = (0, 1, 2)
QAT_SEEDS = (0, 1, 2, 3, 4)


def ptq_task():
    data = datasets.gaussian_mixture(3000, classes=4, dim=8, spread=3.0, seed=7)
    return datasets.split(data, 0.3, seed=1)


def qat_task():
    data = datasets.gaussian_mixture(2000, classes=4, dim=2, spread=2.0, seed=123)
    return datasets.split(data, 0.3, seed=1)


def qat_config(op, seeds=QAT_SEEDS):
    return qat.QatConfig(arch="mlp:16,16", epochs=10, lr=0.05, op=op, abits=4 if op else None, seeds=tuple(seeds))


@pytest.fixture(scope="session")
def ptq_models():
    """Three full-precision 3-layer MLPs (one per seed) with their calibration sets."""
    train, test = ptq_task()
    out = []
    for seed in PTQ_SEEDS:
        cfg = qat.QatConfig(arch="mlp:32,32", epochs=20, lr=0.05, op=None, abits=None, seeds=(seed,))
        net = qat.make_network(cfg, train.features.shape[1:], 4, seed)
        qat.train_network(net, train, cfg, seed)
        calib = train.subset(np.random.default_rng(seed).choice(len(train), 256, replace=False))
        out.append((seed, net.to_model(), calib))
    return out, test
