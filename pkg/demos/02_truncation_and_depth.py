"""Why the number of inference iterations has to reach the output.

With truncated inference the classifier is the result of T sweeps.  If T is
smaller than the distance from the input to the output, the evidence never
arrives and the prediction is whatever the output's own energies say.
"""
import numpy as np

from lgm import (ClampSpec, InferenceConfig, build_graph, dense_chain_spec, init_parameters,
                 run_inference)

graph = build_graph(dense_chain_spec(hidden=(20, 20), input_nodes=30, classes=5))
print("layer depth:", graph.depth)

params = init_parameters(graph, seed=1, scale=2.0)
rng = np.random.default_rng(0)
a = ClampSpec.hard_labels(rng.integers(0, 2, (1, 30)), "v")
b = ClampSpec.hard_labels(rng.integers(0, 2, (1, 30)), "v")

for t in range(1, graph.depth + 2):
    cfg = InferenceConfig("LBP", "Sequential", t)
    pa = run_inference(graph, params, a, cfg).probabilities()[0, 0]
    pb = run_inference(graph, params, b, cfg).probabilities()[0, 0]
    print(f"T={t}: two different images give outputs that differ by {np.abs(pa - pb).max():.3e}")

# The same holds for every method and both schedules: below the depth the
# output cannot tell the two images apart.
for method in ("MF", "LBP", "TRW"):
    for schedule in ("Sequential", "Parallel"):
        cfg = InferenceConfig(method, schedule, graph.depth - 1)
        pa = run_inference(graph, params, a, cfg).probabilities()[0, 0]
        pb = run_inference(graph, params, b, cfg).probabilities()[0, 0]
        print(f"{method:>3} {schedule:<10} T=depth-1: identical outputs:", np.array_equal(pa, pb))
