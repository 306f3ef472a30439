"""Joint image reconstruction and indirect diffeomorphic registration.

An unrolled Douglas-Rachford fixed-point iteration whose inversion block
solves (A^T A + rho I) u = A^T y + rho v against the physical forward
operator and whose registration block predicts an initial momentum and
warps the template along the induced diffeomorphic flow.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, DiffNode, CustomGradOp, backward, no_grad

__all__ = ["Tensor", "DiffNode", "CustomGradOp", "backward", "no_grad", "__version__"]
