"""Reproduction runs on MNIST or FashionMNIST through the command-line tool.

Usage::

    LGM_MNIST_DIR=/data/mnist python3 demos/05_mnist_reproductions.py truncation runs/
    python3 demos/05_mnist_reproductions.py --list

The data directory must hold the four standard IDX files (optionally
gzipped).  FashionMNIST ships with the same file names, so pointing the
variable at it runs the same experiments on that data set.  Each experiment
writes one JSON run config per variant and calls ``lgm train`` on it; the
resulting summary.json holds the test accuracy.
"""
import json
import os
import sys
from pathlib import Path

from lgm.cli import main

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DENSE = {"preset": "dense", "hidden": [100]}

# name -> list of (variant, graph, training settings, train subset)
EXPERIMENTS = {
    # iterations below the depth cannot classify; T=2 reaches the output
    "truncation": [
        (f"T{t}", DENSE, {"iterations": t, "clamping": "binarize", "max_epochs": 5}, 10000)
        for t in (1, 2, 3, 5)
    ],
    # grey values as soft clamps against binarized input
    "soft_clamp": [
        (mode, DENSE, {"iterations": 5, "clamping": mode}, None) for mode in ("soft", "binarize")
    ],
    # inference methods on the convolutional net
    "methods": [
        (f"{m}", {"preset": "mininet", "kind": "Conv"}, {"method": m, "iterations": 5}, None)
        for m in ("MF", "LBP", "TRW")
    ],
    # coarse requantization of the input: 2**n colors, n + 1 hidden labels
    "requantize": [
        (f"colors{2 ** n}", {"preset": "mininet", "kind": "Local", "input_labels": 2 ** n,
                             "hidden_labels": n + 1},
         {"iterations": 5, "clamping": "quantize", "n_colors": 2 ** n}, None)
        for n in (1, 2, 3)
    ],
    # randomly hidden input pixels, with label smoothing
    "partial": [
        (f"pobs{p}", {"preset": "mininet", "kind": "Local"},
         {"iterations": 5, "p_obs": p, "label_smoothing": 0.1}, None)
        for p in (1.0, 0.7, 0.4)
    ],
    # analytic gradient against backpropagation on a loopy model
    "analytic": [
        (g, {"preset": "dense", "hidden": [100, 100]},
         {"iterations": 5, "clamping": "binarize", "gradient": g, "max_epochs": 5}, 10000)
        for g in ("backprop", "analytic")
    ],
}


def data_paths(root):
    out = {}
    for key, name in FILES.items():
        p = Path(root) / name
        out[key] = str(p if p.exists() else p.with_name(name + ".gz"))
    return out


def run(experiment, out_root):
    root = os.environ.get("LGM_MNIST_DIR")
    if not root:
        sys.exit("set LGM_MNIST_DIR to the directory holding the IDX files")
    results = {}
    for variant, graph, settings, subset in EXPERIMENTS[experiment]:
        run_dir = Path(out_root) / experiment / variant
        run_dir.mkdir(parents=True, exist_ok=True)
        config = {"graph": graph, "out": str(run_dir.resolve()), "train": settings,
                  "train_subset": subset, **data_paths(root)}
        path = run_dir / "config.json"
        path.write_text(json.dumps(config, indent=2))
        print(f"== {experiment}/{variant}")
        code = main(["train", "--config", str(path), "-v"])
        if code != 0:
            print(f"   exit code {code}")
            continue
        summary = json.loads((run_dir / "summary.json").read_text())
        results[variant] = summary.get("test_accuracy")
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == "--list":
        for name, variants in EXPERIMENTS.items():
            print(name + ":", ", ".join(v[0] for v in variants))
    elif len(sys.argv) == 3 and sys.argv[1] in EXPERIMENTS:
        run(sys.argv[1], sys.argv[2])
    else:
        sys.exit(__doc__)
