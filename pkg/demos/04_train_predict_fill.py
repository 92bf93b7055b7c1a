"""Train a tiny model end to end, then query it with hidden pixels.

The data are 5x5 "digits": a vertical stroke (class 0), the same stroke with
a closed top (class 1, think of a 4 against a 9) and a bottom bar (class 2).
Training hides 30% of the pixels at random so the model learns to reason
about missing input.  Afterwards we hide the top rows of a class-1 image and
watch the prediction become uncertain between classes 0 and 1, and render
the model's guess for the hidden pixels as a PGM image.
"""
import sys
from pathlib import Path

import numpy as np

from lgm import build_graph
from lgm.checkpoint import Checkpoint, save_checkpoint
from lgm.cli import fill_image, predict
from lgm.data import Dataset, split, write_pgm
from lgm.train import TrainConfig, evaluate, train

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out_dir.mkdir(parents=True, exist_ok=True)

stroke = np.zeros((5, 5))
stroke[:, 2] = 1
closed = stroke.copy()
closed[0, 1:4] = 1
closed[1, 1] = 1
bar = np.zeros((5, 5))
bar[4, :] = 1
patterns = np.stack([stroke, closed, bar])

rng = np.random.default_rng(0)
labels = rng.integers(0, 3, 600)
images = np.clip(patterns[labels] + rng.normal(0, 0.15, (600, 5, 5)), 0, 1)
train_set, val_set = split(Dataset(images, labels), seed=0)
print("train/val sizes:", len(train_set), len(val_set))

spec = {
    "layers": [
        {"name": "v", "role": "input", "channels": 1, "spatial": [5, 5], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 8, "spatial": [], "labels": 2},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 3},
    ],
    "connections": [{"from": "v", "to": "h"}, {"from": "h", "to": "y"}],
}
graph = build_graph(spec)
config = TrainConfig(iterations=3, step_size=0.05, max_epochs=15, batch_size=20, p_obs=0.7,
                     label_smoothing=0.1)
result = train(train_set, val_set, graph, config,
               on_epoch=lambda row: print("epoch {epoch}: train nll {train_nll:.3f} "
                                          "val nll {val_nll:.3f} val acc {val_accuracy:.3f}".format(**row)))
print("best epoch:", result.best_epoch)
print("validation accuracy with 30% of pixels hidden:",
      evaluate(val_set, graph, result.params, config).accuracy)

ckpt = Checkpoint(graph, result.params, vars(config), result.history)
save_checkpoint(out_dir / "toy.lgm", ckpt)

# A clean class-1 image, first fully visible and then with the top two rows hidden.
image = patterns[1]
visible = np.ones((5, 5), bool)
visible[:2] = False
for name, observed in (("full view", None), ("top hidden", visible)):
    p, label, entropy, _ = predict(ckpt, image, observed)
    print(f"{name:>10}: p = {np.round(p, 3)}  argmax {label}  entropy {entropy:.3f}")

# Hidden pixels are drawn as the model's probability of "ink", observed ones as given.
filled = fill_image(ckpt, image, visible)
write_pgm(out_dir / "filled.pgm", filled)
print("filled image (0-255):")
print(filled)
print("wrote", out_dir / "filled.pgm")
