"""Delta-rule memory kernels, gated softmax/linear attention and a toy decoder."""

__version__ = "0.1.0"
