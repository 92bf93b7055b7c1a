"""Layered graphical models trained through truncated variational inference."""
from .clamping import ClampSpec, binarize, condition, hard_clamp, quantize, soft_clamp
from .inference import InferenceConfig, compute_rho, run_inference
from .model import (Parameters, build_graph, count_parameters, dense_chain_spec, flip,
                    init_parameters, mininet_spec)

__version__ = "0.1.0"

__all__ = ["ClampSpec", "InferenceConfig", "Parameters", "binarize", "build_graph", "compute_rho",
           "condition", "count_parameters", "dense_chain_spec", "flip", "hard_clamp",
           "init_parameters", "mininet_spec", "quantize", "run_inference", "soft_clamp"]
