"""Variational networks with multiplicative weight noise.

Training minimizes total cross-entropy plus beta times the nats the
weights carry about the training set; the subpackages provide the
network and its hand-written backward pass (vnn), the information
quantities and bounds (infotheory), nuisance generation and density
ratio MI estimation (nuisance_lab), dataset and checkpoint I/O
(data_io), and the experiment harness plus CLI (experiments, cli).
"""

from .numeric_core import Rng, Tensor, derive_seed, matmul, tensor

__all__ = ["Rng", "Tensor", "derive_seed", "matmul", "tensor"]
__version__ = "0.1.0"
