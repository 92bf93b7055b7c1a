"""``lgm`` command-line tool: train, eval, predict, fill and verify.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .clamping import ClampSpec, binarize, quantize
from .data import Dataset, IdxFormatError, load_idx, read_pgm, split, write_pgm
from .inference import run_inference
from .model import GraphError, build_graph, dense_chain_spec, mininet_spec
from .train import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("lgm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRICS_HEADER = ["epoch", "train_nll", "val_nll", "val_accuracy"]
CHECKPOINT_NAME = "checkpoint.lgm"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    graph: object = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    val_fraction: float = 0.2
    out: str = "runs/default"
    train: dict = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return str(p if p.is_absolute() else base / p)


def _graph_spec(g):
    """Inline spec, a path to a JSON spec, or a preset ``{"preset": ...}``."""
    if isinstance(g, dict) and "preset" in g:
        kw = {k: v for k, v in g.items() if k != "preset"}
        if g["preset"] == "dense":
            return dense_chain_spec(**kw)
        if g["preset"] == "mininet":
            return mininet_spec(**kw)
        raise ConfigError(f"unknown graph preset {g['preset']!r}")
    return g


def load_run_config(path, seed=None, out=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    base = path.parent
    known = set(RunConfig.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    unknown = [k for k in raw if k not in known and k not in train_fields]
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = RunConfig(**{k: v for k, v in raw.items() if k in known and k != "train"})
    cfg.train = dict(raw.get("train", {}))
    cfg.train.update({k: v for k, v in raw.items() if k in train_fields})
    if isinstance(cfg.graph, str):
        cfg.graph = _resolve(base, cfg.graph)
    for k in ("train_images", "train_labels", "test_images", "test_labels"):
        setattr(cfg, k, _resolve(base, getattr(cfg, k)))
    if seed is not None:
        cfg.train["seed"] = int(seed)
    cfg.out = str(out) if out is not None else _resolve(base, cfg.out)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig):
    if cfg.graph is None:
        raise ConfigError("config needs a 'graph' entry")
    if isinstance(cfg.graph, str) and not Path(cfg.graph).exists():
        raise ConfigError(f"graph spec not found: {cfg.graph}")
    for k in ("train_images", "train_labels", "test_images", "test_labels"):
        p = getattr(cfg, k)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"dataset file not found: {p}")
    try:
        tc = cfg.train_config
        tc.inference()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid training settings: {e}") from e
    if tc.clamping not in ("soft", "binarize", "quantize"):
        raise ConfigError(f"unknown clamping mode {tc.clamping!r}")
    if tc.clamping == "quantize" and tc.n_colors < 2:
        raise ConfigError("quantize needs n_colors >= 2")
    if not 0.0 <= tc.p_obs <= 1.0:
        raise ConfigError("p_obs must lie in [0, 1]")
    graph = build_run_graph(cfg)
    want = tc.n_colors if tc.clamping == "quantize" else 2
    got = graph.layers[graph.input_layers[0]].labels
    if got != want:
        raise ConfigError(f"input layer has {got} labels but clamping {tc.clamping!r} needs {want}")


def build_run_graph(cfg: RunConfig):
    return build_graph(_graph_spec(cfg.graph))


def _subset(ds: Dataset, n, seed):
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng([seed, 7]).permutation(len(ds))[:n])
    return ds.subset(idx)


def load_splits(cfg: RunConfig):
    """(train, validation, test-or-None) datasets per the run config."""
    seed = cfg.train_config.seed
    if cfg.train_images is None or cfg.train_labels is None:
        raise ConfigError("config needs train_images and train_labels")
    pool = _subset(load_idx(cfg.train_images, cfg.train_labels), cfg.train_subset, seed)
    tr, va = split(pool, seed, cfg.val_fraction)
    te = None
    if cfg.test_images and cfg.test_labels:
        te = _subset(load_idx(cfg.test_images, cfg.test_labels), cfg.test_subset, seed)
    return tr, va, te


def _config_dict(cfg: RunConfig):
    d = asdict(cfg)
    d["graph"] = _graph_spec(cfg.graph) if not isinstance(cfg.graph, str) else \
        json.loads(Path(cfg.graph).read_text())
    return d


def _thread_limit():
    raw = os.environ.get("LGM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LGM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("LGM_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def write_metrics(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out)
    tc = cfg.train_config
    graph = build_run_graph(cfg)
    tr, va, te = load_splits(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(tr, va, graph, tc)
    summary = {"best_epoch": result.best_epoch, "epochs": len(result.history),
               "val": result.history[result.best_epoch] if result.history else None}
    if te is not None:
        m = evaluate(te, graph, result.params, tc)
        summary["test_accuracy"], summary["test_nll"] = m.accuracy, m.nll
    ckpt = Checkpoint(graph, result.params, asdict(tc), result.history,
                      {"run_config": _config_dict(cfg), "best_epoch": result.best_epoch})
    save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    write_metrics(out / "metrics.csv", result.history)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _checkpoint_path(args):
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.config:
        return Path(load_run_config(args.config, args.seed, args.out).out) / CHECKPOINT_NAME
    raise ConfigError("need --checkpoint or --config")


def _load_ckpt(args) -> Checkpoint:
    path = _checkpoint_path(args)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _stored_run_config(ckpt: Checkpoint, args) -> RunConfig:
    if args.config:
        return load_run_config(args.config, args.seed, args.out)
    raw = ckpt.extra.get("run_config")
    if raw is None:
        raise ConfigError("checkpoint carries no run config; pass --config")
    cfg = RunConfig(**raw)
    validate_run_config(cfg)
    return cfg


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args)
    cfg = _stored_run_config(ckpt, args)
    tc = TrainConfig.from_dict(ckpt.config)
    tr, va, te = load_splits(cfg)
    data = {"train": tr, "val": va, "test": te}[args.split]
    if data is None:
        raise ConfigError(f"no {args.split} data configured")
    m = evaluate(data, ckpt.graph, ckpt.params, tc)
    print(f"split {args.split}\naccuracy {m.accuracy!r}\nnll {m.nll!r}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / f"eval_{args.split}.json",
                    {"split": args.split, "accuracy": m.accuracy, "nll": m.nll, "n": len(data)})
    if args.min_accuracy is not None and m.accuracy < args.min_accuracy:
        print(f"accuracy {m.accuracy:.4f} below required {args.min_accuracy:.4f}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _read_image(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"image not found: {path}")
    if path.suffix == ".npy":
        img = np.load(path)
        if img.dtype != np.uint8:
            return np.asarray(img, dtype=np.float64)
        return img.astype(np.float64) / 255.0
    return read_pgm(path).astype(np.float64) / 255.0


def image_clamps(graph, tc: TrainConfig, image, observed=None) -> ClampSpec:
    """One-sample clamp of the input layer from an image in [0, 1]."""
    layer = graph.layers[graph.input_layers[0]]
    if image.size != layer.n_nodes:
        raise ConfigError(f"image has {image.size} pixels but the input layer has "
                          f"{layer.n_nodes} nodes (expected e.g. 28x28)")
    x = image.reshape((1,) + layer.node_shape)
    obs = None if observed is None else observed.reshape(x.shape)
    if tc.clamping == "soft":
        return ClampSpec.soft_values(x, layer.name, observed=obs)
    labels = binarize(x) if tc.clamping == "binarize" else quantize(x, tc.n_colors)
    return ClampSpec.hard_labels(labels, layer.name, observed=obs)


def _read_mask(args, shape):
    if not args.mask:
        return None
    m = _read_image(args.mask)
    if m.shape != shape:
        raise ConfigError(f"mask shape {m.shape} differs from image shape {shape}")
    return m > 0


def predict(ckpt: Checkpoint, image, observed=None):
    tc = TrainConfig.from_dict(ckpt.config)
    clamps = image_clamps(ckpt.graph, tc, image, observed)
    res = run_inference(ckpt.graph, ckpt.params, clamps, tc.inference(evaluation=True))
    p = res.probabilities()[0].reshape(-1)
    entropy = float(-np.sum(p * np.log(np.maximum(p, np.finfo(float).tiny))))
    return p, int(np.argmax(p)), entropy, res


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args)
    img = _read_image(args.image)
    p, label, entropy, _ = predict(ckpt, img, _read_mask(args, img.shape))
    print("probabilities " + " ".join(f"{v:.6f}" for v in p))
    print(f"argmax {label}\nentropy {entropy:.6f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "prediction.json",
                    {"probabilities": p.tolist(), "argmax": label, "entropy": entropy})
    return EXIT_OK


def fill_image(ckpt: Checkpoint, image, observed):
    """Observed pixels keep their byte value; the rest show their expected intensity."""
    _, _, _, res = predict(ckpt, image, observed)
    layer = ckpt.graph.layers[ckpt.graph.input_layers[0]]
    probs = res.probabilities(layer.name)[0]
    levels = np.arange(layer.labels) / (layer.labels - 1)
    mean = (probs * levels).sum(axis=-1).reshape(image.shape)
    rendered = np.floor(255 * mean + 0.5)
    original = np.floor(255 * image + 0.5)
    return np.where(observed, original, rendered).astype(np.uint8)


def cmd_fill(args) -> int:
    if not args.mask:
        raise ConfigError("fill needs --mask")
    ckpt = _load_ckpt(args)
    img = _read_image(args.image)
    if img.ndim != 2:
        raise ConfigError("fill needs a 2-D image")
    out = fill_image(ckpt, img, _read_mask(args, img.shape))
    target = Path(args.out or "fill.pgm")
    if target.suffix != ".pgm":
        target.mkdir(parents=True, exist_ok=True)
        target = target / "fill.pgm"
    write_pgm(target, out)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run_all(quick=args.quick)
    print(verify_mod.report(results))
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------- main

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (or file for fill)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="lgm", description="Layered graphical models")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--min-accuracy", type=float)
    for name, text in (("predict", "class probabilities for one image"),
                       ("fill", "render beliefs for unobserved pixels")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--image", required=True)
        p.add_argument("--mask", help="greymap; nonzero pixels are observed")
    ve = sub.add_parser("verify", parents=[common], help="run oracle self checks")
    ve.add_argument("--quick", action="store_true")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "fill": cmd_fill,
            "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.config:
        print("error: train needs --config", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, GraphError, CheckpointError, IdxFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
