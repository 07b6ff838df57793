"""Historical prompt memory for Siamese-style trackers.

The package provides the mask-refined prompt encoder, the FIFO key/value
memory bank with its L2-softmax readout, the prediction head and losses, and
a deterministic synthetic tracking harness (``histprompt.harness``).
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
