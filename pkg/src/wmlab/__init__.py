"""White-box neural network watermarking lab.

Embeds, hides, extracts, attacks, and verifies watermarks carried in the
weights of small fully-connected classifiers, on top of a self-contained
reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .kernels import backend_name  # noqa: F401
