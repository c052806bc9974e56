"""Continuous example-based color transfer with a regularized Gaussian mixture."""

from .colorspace import LabImage, lab_to_srgb, normalize_lab, srgb_to_lab
from .imageio import PlanarF64Image, RgbImage, load_image, save_image
from .laplacian import LaplacianKernel, convolve, default_kernel, source_laplacian
from .metrics import MetricsReport, baseline_meanstd, psnr, ssim
from .neighbor import NeighborIndex, build_index
from .transfer import (
    GmmState,
    PosteriorTable,
    TransferConfig,
    TransferResult,
    e_step,
    m_step_centroids,
    m_step_variances,
    nll,
    objective_gradient,
    objective_q,
    run_transfer,
)

__version__ = "0.1.0"
