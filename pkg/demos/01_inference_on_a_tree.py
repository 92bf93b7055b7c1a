"""Message passing on a tree-shaped model, checked against brute force.

A layered model whose node graph has no cycles is a tree, so sum-product
message passing should reproduce the exact marginals once information has
had time to cross the whole tree.
"""
import numpy as np

from lgm import ClampSpec, InferenceConfig, build_graph, run_inference
from lgm.exact import exact_map, exact_marginals
from lgm.verify import is_node_forest, node_diameter, random_parameters

# Three input pixels feed one hidden node with 3 labels, which feeds a
# 4-class output.  Every node has exactly one path to every other node.
spec = {
    "layers": [
        {"name": "v", "role": "input", "channels": 3, "spatial": [], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 1, "spatial": [], "labels": 3},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 4},
    ],
    "connections": [{"from": "v", "to": "h"}, {"from": "h", "to": "y"}],
}
graph = build_graph(spec)
print("node graph is a tree:", is_node_forest(graph), " diameter:", node_diameter(graph))

rng = np.random.default_rng(0)
params = random_parameters(graph, rng)

# Observe the first two pixels and leave the third one free.
clamps = ClampSpec.hard_labels(np.array([[1, 0, 0]]), "v", observed=np.array([[True, True, False]]))
exact = exact_marginals(graph, params, clamps)
print("exact P(y):", np.round(exact["y"][0], 4))

# Believes start at zero, so the first sweep only carries pairwise
# information; one more sweep than the diameter solves the tree exactly.
for t in range(1, node_diameter(graph) + 2):
    res = run_inference(graph, params, clamps, InferenceConfig("LBP", "Sequential", t))
    err = np.abs(res.probabilities("y")[0] - exact["y"][0]).max()
    print(f"T={t}: max error on the output {err:.2e}")

# Max-product decoding recovers the most probable joint assignment.
mp = run_inference(graph, params, clamps, InferenceConfig("MaxProduct", "Sequential", 3))
ref = exact_map(graph, params, clamps)
print("max-product labels h, y:", mp.decode("h")[0], mp.decode("y")[0])
print("enumeration labels h, y:", ref["h"], ref["y"])
