"""sitenet: joint training of a two-branch CNN across heterogeneous image sites.

Core pieces: a small reverse-mode autodiff engine over float64 NumPy arrays,
batch normalization with optional per-site statistics, a contrastive embedding
loss, a synthetic two-site data generator, and a cross-validated experiment
harness comparing single-site, joint, per-site-norm, and contrastive training.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
