from __future__ import annotations

import numpy as np

from conceptmoe.errors import KernelSizeError
from conceptmoe.numerics.tensor import Tensor


def gaussian_kernel2d(size: int, sigma: float) -> Tensor:
    """size x size Gaussian weights normalised to sum to one.

    ``sigma=inf`` gives the flat box filter.
    """
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise KernelSizeError(f"kernel size must be a positive odd integer, got {size!r}")
    if not sigma > 0:
        raise KernelSizeError(f"sigma must be positive, got {sigma!r}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    d2 = d[:, None] ** 2 + d[None, :] ** 2
    k = np.exp(-d2 / (2.0 * float(sigma) ** 2))
    return Tensor(k / k.sum())
