"""W-Net face super-resolution on a small numpy autograd engine."""
import os as _os

# Bitwise-reproducible training needs a fixed BLAS reduction order, so default
# to one thread unless the caller has chosen otherwise.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .model import WNet, WNetConfig  # noqa: E402
from .tensor import Tensor, no_grad, precision  # noqa: E402

__all__ = ["Tensor", "WNet", "WNetConfig", "no_grad", "precision"]
__version__ = "0.1.0"
