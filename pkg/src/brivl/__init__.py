"""Desk-scale two-tower cross-modal contrastive learning toolkit.

Two encoders (image and text) are trained into one joint embedding space
with momentum encoders and dual negative queues, on a synthetic weakly
correlated image/text corpus.  Includes retrieval and zero-shot evaluation
plus two embedding-inversion tools (pixel-space gradient ascent and
codebook-generator inversion).
"""

import os

# BRIVL_THREADS caps BLAS worker threads; must be exported before numpy
# loads its backend, hence before any submodule import.
_threads = os.environ.get("BRIVL_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from .autodiff import ShapeError, Tensor, no_grad  # noqa: E402
from .rng import SplitMix64  # noqa: E402

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "no_grad", "SplitMix64", "__version__"]
