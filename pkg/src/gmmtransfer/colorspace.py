"""sRGB <-> CIELAB conversion (D65) and the normalized Lab scale.

The optimizer never sees raw Lab values. Every distance, variance and
Laplacian is computed on normalized pixels::

    (L / 100, (a + 128) / 255, (b + 128) / 255)

which puts all three channels on roughly [0, 1].
"""

from __future__ import annotations

import numpy as np

from .imageio import PlanarF64Image, RgbImage

# D65 reference white
WHITE = np.array([0.95047, 1.0, 1.08883])

_PRIMARIES_XY = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])

_DELTA = 6.0 / 29.0
_LAB_SCALE = np.array([100.0, 255.0, 255.0])
_LAB_OFFSET = np.array([0.0, 128.0, 128.0])


def _rgb_to_xyz_matrix() -> np.ndarray:
    # Columns are the primaries' XYZ scaled so that RGB (1, 1, 1) maps onto
    # WHITE exactly; a published rounded matrix misses it by ~1e-7, which
    # leaks into a*/b* on the gray axis.
    x, y = _PRIMARIES_XY[:, 0], _PRIMARIES_XY[:, 1]
    prim = np.stack([x / y, np.ones(3), (1.0 - x - y) / y])
    scale = np.linalg.solve(prim, WHITE)
    return prim * scale


RGB_TO_XYZ = _rgb_to_xyz_matrix()
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

_DECODE_LUT = np.array(
    [
        c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4
        for c in np.arange(256) / 255.0
    ]
)


class LabImage(PlanarF64Image):
    """Three-plane CIELAB image (L, a, b), raw or normalized units."""

    def __post_init__(self):
        super().__post_init__()
        if self.channels != 3:
            raise ValueError(f"LabImage needs 3 planes, got {self.channels}")

    @property
    def L(self) -> np.ndarray:
        return self.planes[0]

    @property
    def a(self) -> np.ndarray:
        return self.planes[1]

    @property
    def b(self) -> np.ndarray:
        return self.planes[2]


def srgb_decode(rgb8: np.ndarray) -> np.ndarray:
    """8-bit sRGB samples to linear light in [0, 1]."""
    return _DECODE_LUT[np.asarray(rgb8, dtype=np.uint8)]


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear light to 8-bit sRGB, clamping to [0, 1] first."""
    c = np.clip(linear, 0.0, 1.0)
    v = np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3.0 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab_pixels(rgb8: np.ndarray) -> np.ndarray:
    """Convert ``(..., 3)`` 8-bit sRGB to ``(..., 3)`` CIELAB."""
    lin = srgb_decode(rgb8)
    xyz = _matvec(RGB_TO_XYZ, lin) / WHITE
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb_pixels(lab: np.ndarray) -> np.ndarray:
    """Convert ``(..., 3)`` CIELAB to 8-bit sRGB with gamut clamping."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE
    return srgb_encode(_matvec(XYZ_TO_RGB, xyz))


def _matvec(m, v):
    # Explicit multiply-add keeps the result independent of BLAS threading.
    return np.stack(
        [v[..., 0] * m[i, 0] + v[..., 1] * m[i, 1] + v[..., 2] * m[i, 2] for i in range(3)],
        axis=-1,
    )


def srgb_to_lab(img: RgbImage) -> LabImage:
    lab = rgb_to_lab_pixels(img.data)
    return LabImage(img.width, img.height, np.moveaxis(lab, -1, 0))


def lab_to_srgb(img: PlanarF64Image) -> RgbImage:
    rgb = lab_to_rgb_pixels(np.moveaxis(img.planes, 0, -1))
    return RgbImage(img.width, img.height, rgb)


def normalize_lab(p):
    """Map Lab values (last axis = L, a, b) onto the unit scale."""
    return (np.asarray(p, dtype=np.float64) + _LAB_OFFSET) / _LAB_SCALE


def denormalize_lab(p):
    return np.asarray(p, dtype=np.float64) * _LAB_SCALE - _LAB_OFFSET


def normalize_image(img: LabImage) -> LabImage:
    planes = (img.planes + _LAB_OFFSET[:, None, None]) / _LAB_SCALE[:, None, None]
    return LabImage(img.width, img.height, planes)


def denormalize_image(img: PlanarF64Image) -> LabImage:
    planes = img.planes * _LAB_SCALE[:, None, None] - _LAB_OFFSET[:, None, None]
    return LabImage(img.width, img.height, planes)


def raw_lab_variance_to_normalized(sigma2: float) -> float:
    """Rescale a variance in raw Lab units using the L-channel scale."""
    return sigma2 / _LAB_SCALE[0] ** 2
