"""Fixed high-pass (SRM) residual extraction."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SrmKernel:
    taps: tuple[tuple[int, ...], ...]
    scale: Fraction

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.taps, dtype=dtype) * float(self.scale)


_K1 = (
    (0, 0, 0, 0, 0),
    (0, -1, 2, -1, 0),
    (0, 2, -4, 2, 0),
    (0, -1, 2, -1, 0),
    (0, 0, 0, 0, 0),
)
_K2 = (
    (-1, 2, -2, 2, -1),
    (2, -6, 8, -6, 2),
    (-2, 8, -12, 8, -2),
    (2, -6, 8, -6, 2),
    (-1, 2, -2, 2, -1),
)
_K3 = (
    (0, 0, 0, 0, 0),
    (0, 0, 0, 0, 0),
    (0, 1, -2, 1, 0),
    (0, 0, 0, 0, 0),
    (0, 0, 0, 0, 0),
)


def srm_kernels() -> list[SrmKernel]:
    return [
        SrmKernel(_K1, Fraction(1, 4)),
        SrmKernel(_K2, Fraction(1, 12)),
        SrmKernel(_K3, Fraction(1, 2)),
    ]


def kernel_bank(dtype=torch.float32) -> torch.Tensor:
    """Kernels as a ``(3, 1, 5, 5)`` conv weight."""
    return torch.tensor(np.stack([k.as_array() for k in srm_kernels()])[:, None], dtype=dtype)


def residuals_torch(images: torch.Tensor) -> torch.Tensor:
    """Batched residuals: ``(N, 3, H, W)`` RGB -> ``(N, 3, H, W)`` kernel responses."""
    w = torch.tensor(LUMA, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    luma = (images * w).sum(dim=1, keepdim=True)
    padded = F.pad(luma, (2, 2, 2, 2), mode="reflect")
    return F.conv2d(padded, kernel_bank(images.dtype).to(images.device))


def extract_residuals(image: np.ndarray) -> np.ndarray:
    """Residual stack of an ``(H, W, 3)`` image; channel k is the response of kernel k.

    Correlation with the kernels as printed, on luminance, reflect-padded by 2.
    No truncation or quantization is applied.
    """
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    return residuals_torch(x)[0].permute(1, 2, 0).numpy()
