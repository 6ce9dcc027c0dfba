"""Composed image-text retrieval on a small numpy autodiff engine.

Modules, bottom up: ``numkernel`` (tensors and reverse-mode gradients),
``datastore`` (file formats and synthetic data), ``textprep``,
``encoders``, ``composers``, ``model``, ``training``, ``metrics``,
``ensemble`` and ``cli``.
"""

__version__ = "0.1.0"
