"""Desk-scale federated learning simulator for layout hotspot classification.

Subpackages cover the minimal differentiable model engine (``nn``), synthetic
layout generation and spectral feature extraction (``layout``), group-lasso
channel selection (``features``), the federated round state machine
(``engine``), convergence-bound monitors (``diagnostics``), confusion-matrix
metrics (``metrics``), and the command-line harness (``cli``).

Hot numeric kernels are numba-compiled by default; set ``FEDLITH_BACKEND=numpy``
to force the pure-numpy path (see ``fedlith.backend``).
"""

__version__ = "0.1.0"

from fedlith.backend import active_backend

__all__ = ["active_backend", "__version__"]
