"""Differentiable architecture search for graph classification.

The package searches over networks built from selection-fusion-aggregation
blocks: each block picks which earlier feature maps to use, fuses them, and
runs one message-passing operator. A temperature-scaled softmax relaxes the
discrete choices so the whole supernet trains by gradient descent; argmax
derivation then yields a discrete architecture that is retrained from
scratch.
"""

__version__ = "0.1.0"
