"""Soft clamping: conditioning on a grey value instead of a hard bit.

A grey pixel q in [0, 1] is folded into its neighbours as the expected
pairwise energy q * E(1, .) + (1 - q) * E(0, .).  At q = 0 and q = 1 this is
exactly the hard clamp, and in between the resulting NLL is a lower bound on
the NLL averaged over the two hard choices.
"""
import numpy as np

from lgm import ClampSpec, InferenceConfig, build_graph, run_inference
from lgm.exact import exact_nll
from lgm.verify import random_parameters

spec = {
    "layers": [
        {"name": "v", "role": "input", "channels": 1, "spatial": [], "labels": 2},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 3},
    ],
    "connections": [{"from": "v", "to": "y"}],
}
graph = build_graph(spec)
params = random_parameters(graph, np.random.default_rng(3))
cfg = InferenceConfig("LBP", "Sequential", 2)

# The endpoints agree bit for bit with hard clamping.
for bit in (0, 1):
    hard = run_inference(graph, params, ClampSpec.hard_labels(np.array([[bit]]), "v"), cfg)
    soft = run_inference(graph, params, ClampSpec.soft_values(np.array([[float(bit)]]), "v"), cfg)
    print(f"q={bit}: identical beliefs:", np.array_equal(hard.output.data, soft.output.data))

# Between the endpoints the surrogate sits below the mixture of hard NLLs.
target = 2
nll0 = exact_nll(graph, params, ClampSpec.hard_labels(np.array([[0]]), "v"), target)
nll1 = exact_nll(graph, params, ClampSpec.hard_labels(np.array([[1]]), "v"), target)
print(" q    surrogate  mixture")
for q in np.linspace(0, 1, 6):
    s = exact_nll(graph, params, ClampSpec.soft_values(np.array([[q]]), "v"), target)
    print(f"{q:4.1f}  {s:9.4f}  {(1 - q) * nll0 + q * nll1:7.4f}")
