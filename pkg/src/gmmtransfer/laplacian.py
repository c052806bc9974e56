"""5x5 discrete Laplacian stencil and replicate-padded convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import PlanarF64Image

KERNEL_SIZE = 5
_R = KERNEL_SIZE // 2


@dataclass(frozen=True, eq=False)
class LaplacianKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (KERNEL_SIZE, KERNEL_SIZE):
            raise ValueError(f"kernel must be {KERNEL_SIZE}x{KERNEL_SIZE}, got {w.shape}")
        off = w.copy()
        off[_R, _R] = 0.0
        if w[_R, _R] != -off.sum():
            raise ValueError("center weight must cancel the off-center weights")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def center_weight(self) -> float:
        return float(self.weights[_R, _R])

    @property
    def neighbor_weight_sum(self) -> float:
        """Sum of the 24 off-center weights."""
        return -self.center_weight

    def offsets(self):
        """Yield ``(dy, dx, weight)`` for every nonzero off-center tap."""
        for i in range(KERNEL_SIZE):
            for j in range(KERNEL_SIZE):
                if (i, j) != (_R, _R) and self.weights[i, j] != 0.0:
                    yield i - _R, j - _R, float(self.weights[i, j])


def default_kernel() -> LaplacianKernel:
    w = np.ones((KERNEL_SIZE, KERNEL_SIZE))
    w[_R, _R] = -(KERNEL_SIZE * KERNEL_SIZE - 1)
    return LaplacianKernel(w)


def laplacian_planes(planes: np.ndarray, kernel: LaplacianKernel | None = None) -> np.ndarray:
    """Apply the stencil to a ``(C, H, W)`` array with clamp-to-edge padding.

    Evaluated in neighbor-difference form, sum_j w_j * (x_j - x_m), which
    equals the zero-sum correlation exactly in real arithmetic and returns
    exact zeros on constant input.
    """
    kernel = kernel or default_kernel()
    planes = np.asarray(planes, dtype=np.float64)
    _, h, w = planes.shape
    padded = np.pad(planes, ((0, 0), (_R, _R), (_R, _R)), mode="edge")
    out = np.zeros_like(planes)
    for dy, dx, wt in kernel.offsets():
        shifted = padded[:, _R + dy : _R + dy + h, _R + dx : _R + dx + w]
        out += wt * (shifted - planes)
    return out


def laplacian_adjoint(residual: np.ndarray, kernel: LaplacianKernel | None = None) -> np.ndarray:
    """Transpose of :func:`laplacian_planes` as a linear map.

    Needed for the exact gradient of the regularizer; replicate padding
    folds the contributions of out-of-image taps back onto edge pixels.
    """
    kernel = kernel or default_kernel()
    r = np.asarray(residual, dtype=np.float64)
    c, h, w = r.shape
    acc = np.zeros((c, h + 2 * _R, w + 2 * _R))
    for dy, dx, wt in kernel.offsets():
        acc[:, _R + dy : _R + dy + h, _R + dx : _R + dx + w] += wt * r
    # fold the padded border back onto the clamped edge rows/cols
    for i in range(_R):
        acc[:, _R, :] += acc[:, i, :]
        acc[:, _R + h - 1, :] += acc[:, _R + h + i, :]
    for i in range(_R):
        acc[:, :, _R] += acc[:, :, i]
        acc[:, :, _R + w - 1] += acc[:, :, _R + w + i]
    inner = acc[:, _R : _R + h, _R : _R + w]
    return inner + kernel.center_weight * r


def convolve(img: PlanarF64Image, kernel: LaplacianKernel | None = None) -> PlanarF64Image:
    return PlanarF64Image(img.width, img.height, laplacian_planes(img.planes, kernel))


def source_laplacian(source: PlanarF64Image, kernel: LaplacianKernel | None = None) -> PlanarF64Image:
    """Laplacian of the normalized source, computed once per transfer run."""
    return convolve(source, kernel)
