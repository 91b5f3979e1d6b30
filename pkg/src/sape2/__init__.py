"""Semantic-aware 2D position encoding for vision-transformer attention.

The bias between two patches comes from content-gated positional vectors:
sigmoid gates over query-key similarity accumulate into fractional per-axis
positions, a learnable table is interpolated at those positions, and the
pairwise Euclidean distances of the resulting vectors (x plus y) are added
to the attention logits. Baseline encodings, a small trainable ViT, scalar
reference oracles, and a CLI harness round out the package.
"""

from .core import (PatchGrid, PositionTable, Sape2Encoding, accumulate_positions,
                   attention_with_pe, axis_bias, build_axis_vectors,
                   compute_gates, interpolate_logits, sape2_bias)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "PatchGrid", "PositionTable", "Sape2Encoding", "Tensor",
    "accumulate_positions", "attention_with_pe", "axis_bias",
    "build_axis_vectors", "compute_gates", "interpolate_logits",
    "no_grad", "sape2_bias", "__version__",
]
