import os
from pathlib import Path

import numpy as np
import pytest

from lgm import build_graph

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain_spec(sizes, labels, input_labels=2):
    """Dense chain ``v -> h1 -> ... -> y``; the last size/label is the output."""
    layers = [{"name": "v", "role": "input", "channels": sizes[0], "spatial": [],
               "labels": input_labels}]
    for i, (n, l) in enumerate(zip(sizes[1:-1], labels[1:-1])):
        layers.append({"name": f"h{i + 1}", "role": "hidden", "channels": n, "spatial": [],
                       "labels": l})
    layers.append({"name": "y", "role": "output", "channels": 1, "spatial": [],
                   "labels": labels[-1]})
    conns = [{"from": a["name"], "to": b["name"]} for a, b in zip(layers, layers[1:])]
    return {"layers": layers, "connections": conns}


@pytest.fixture
def small_chain():
    """v(4, binary) -> h(2, 3 labels) -> y(3 classes); loopy at the node level."""
    return build_graph(chain_spec([4, 2, 1], [2, 3, 3]))


def conv_spec(kind="Conv", length=7, kernel=3, stride=2, hidden_channels=2, classes=3):
    return {
        "layers": [
            {"name": "v", "role": "input", "channels": 1, "spatial": [length], "labels": 2},
            {"name": "h", "role": "hidden", "channels": hidden_channels, "labels": 2},
            {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": classes},
        ],
        "connections": [
            {"from": "v", "to": "h", "kind": kind, "kernel": [kernel], "stride": [stride],
             "dilation": [1]},
            {"from": "h", "to": "y", "kind": "Dense"},
        ],
    }


def mnist_dir():
    """Directory holding the four MNIST IDX files (optionally .gz), or None."""
    root = os.environ.get("LGM_MNIST_DIR")
    if not root:
        return None
    root = Path(root)
    for name in MNIST_FILES:
        if not (root / name).exists() and not (root / f"{name}.gz").exists():
            return None
    return root


def mnist_path(root, name):
    p = Path(root) / name
    return p if p.exists() else Path(root) / f"{name}.gz"


# ------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES = {}
ACCEPTANCE_CRITERIA = {
    "1": "tree exactness", "2": "gradient fidelity", "3": "reductions",
    "4": "MF monotonicity", "5": "truncation separation", "6": "soft-clamp gain",
    "6-full": "soft-clamp gain, full scale", "7": "inference-method ordering",
    "8": "partial observation", "8-fill": "belief-fill rendering",
    "9a": "analytic = backprop, exact regime", "9b": "analytic < backprop, loopy regime",
}


def record_criterion(key, passed, detail):
    """Store and print one acceptance line; ``passed`` is True, False or None (not run)."""
    status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
    line = f"criterion {key:<6} {status:<8} {ACCEPTANCE_CRITERIA[key]}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print("\n" + line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key, name in ACCEPTANCE_CRITERIA.items():
        line = ACCEPTANCE_LINES.get(key) or \
            f"criterion {key:<6} {'NOT RUN':<8} {name}: deselected in this session"
        terminalreporter.write_line(line)
