"""Regularized EM color transfer.

The example image's pixels are treated as samples of a Gaussian mixture
whose centroids are the pixels of the image being transferred. Each EM
iteration computes responsibilities, takes one damped gradient step on
the centroids (data pull plus a Laplacian term that keeps the source's
local structure) and re-estimates the per-centroid isotropic variances.
All math runs on normalized Lab pixels; see :mod:`gmmtransfer.colorspace`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import colorspace
from .colorspace import LabImage
from .errors import ConfigInvalid, DegenerateVariance, DimensionMismatch
from .imageio import RgbImage
from .laplacian import LaplacianKernel, default_kernel, laplacian_adjoint, laplacian_planes
from .neighbor import NeighborIndex, build_index, sq_distances

log = logging.getLogger(__name__)

DIM = 3
RAW_SIGMA2_INIT = 5.0
MODES = ("truncated", "full")

# rows x columns handled per block in the dense passes
_BLOCK = 1 << 18

FrameSink = Callable[[int, RgbImage], None]
IterationMonitor = Callable[[int, float], None]


@dataclass(frozen=True)
class TransferConfig:
    """Hyper-parameters of one transfer run.

    ``sigma2_init`` and ``sigma2_floor`` are in normalized Lab units; the
    default initial variance is 5 raw Lab units rescaled by the L range.
    """

    sigma2_init: float = colorspace.raw_lab_variance_to_normalized(RAW_SIGMA2_INIT)
    mu: float = 0.003
    alpha: float = 0.1
    q_max: int = 50
    k_nn: int = 10
    sigma2_floor: float = 1e-6
    save_every: int = 1
    mode: str = "truncated"

    def __post_init__(self):
        problems = []
        if not 0.0 < self.alpha <= 1.0:
            problems.append(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.mu >= 0.0:
            problems.append(f"mu must be >= 0, got {self.mu}")
        if self.q_max < 1:
            problems.append(f"q_max must be >= 1, got {self.q_max}")
        if self.k_nn < 1:
            problems.append(f"k_nn must be >= 1, got {self.k_nn}")
        if not self.sigma2_floor > 0.0:
            problems.append(f"sigma2_floor must be > 0, got {self.sigma2_floor}")
        if not self.sigma2_init > self.sigma2_floor:
            problems.append(
                f"sigma2_init ({self.sigma2_init}) must exceed sigma2_floor ({self.sigma2_floor})"
            )
        if self.save_every < 1:
            problems.append(f"save_every must be >= 1, got {self.save_every}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if problems:
            raise ConfigInvalid("; ".join(problems))


@dataclass
class GmmState:
    """Mutable optimizer state: centroids ``X`` as ``(M, 3)`` pixels in
    row-major order of a ``width`` x ``height`` image, one variance each."""

    X: np.ndarray
    sigma2: np.ndarray
    width: int
    height: int
    q: int = 0
    sigma2_floor: float = 1e-6

    @classmethod
    def initial(cls, x0: LabImage, sigma2: float, sigma2_floor: float = 1e-6) -> "GmmState":
        X = x0.pixels()
        return cls(X, np.full(X.shape[0], float(sigma2)), x0.width, x0.height, 0, sigma2_floor)

    @property
    def M(self) -> int:
        return self.X.shape[0]

    def planes(self) -> np.ndarray:
        return self.X.T.reshape(DIM, self.height, self.width)

    def lab_image(self) -> LabImage:
        """Current centroids as a de-normalized Lab image."""
        return colorspace.denormalize_image(LabImage(self.width, self.height, self.planes()))

    def check_variances(self) -> None:
        if np.any(self.sigma2 < self.sigma2_floor) or not np.all(np.isfinite(self.sigma2)):
            raise DegenerateVariance(
                f"variance below floor {self.sigma2_floor}: min {self.sigma2.min()}"
            )


@dataclass(frozen=True, eq=False)
class PosteriorTable:
    """Responsibilities stored per centroid row.

    ``indices[m, j]`` is an example index and ``weights[m, j]`` its
    responsibility. In ``full`` mode every row spans all K examples and
    each column sums to one over centroids. In ``truncated`` mode a row
    holds only that centroid's neighbors and sums to one across the row.
    """

    indices: np.ndarray
    weights: np.ndarray
    mode: str

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def dense(self, K: int) -> np.ndarray:
        """Expand to an ``(M, K)`` matrix; meant for tests and small inputs."""
        out = np.zeros((self.weights.shape[0], K))
        rows = np.arange(self.weights.shape[0])[:, None]
        out[rows, self.indices] = self.weights
        return out


@dataclass
class TransferResult:
    final: LabImage
    state: GmmState
    initial_nll: float
    nll_trace: list[float] = field(default_factory=list)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)


def _row_blocks(n_rows: int, n_cols: int):
    step = max(1, _BLOCK // max(1, n_cols))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def nll(state: GmmState, Y: np.ndarray) -> float:
    """Negative log-likelihood of the example pixels under the full mixture."""
    state.check_variances()
    Y = np.asarray(Y, dtype=np.float64)
    s2 = state.sigma2
    log_norm = -0.5 * DIM * np.log(2.0 * math.pi * s2) - math.log(state.M)
    total = 0.0
    for blk in _row_blocks(Y.shape[0], state.M):
        d2 = sq_distances(state.X[None, :, :], Y[blk, None, :])
        ll = _logsumexp(log_norm - d2 / (2.0 * s2), axis=1)
        total += float(np.sum(ll))
    return -total


def e_step(
    state: GmmState,
    Y: np.ndarray,
    index: NeighborIndex | None = None,
    mode: str = "truncated",
) -> PosteriorTable:
    """Compute responsibilities with the current centroids and variances.

    ``full`` normalizes each example pixel's weights over all centroids.
    ``truncated`` scores only each centroid's stored neighbors and
    normalizes within the centroid's row.
    """
    state.check_variances()
    Y = np.asarray(Y, dtype=np.float64)
    if mode == "full":
        K = Y.shape[0]
        logits = np.empty((state.M, K))
        for blk in _row_blocks(state.M, K):
            d2 = sq_distances(Y[None, :, :], state.X[blk, None, :])
            logits[blk] = -d2 / (2.0 * state.sigma2[blk, None])
        weights = np.exp(logits - _logsumexp(logits, axis=0)[None, :])
        indices = np.broadcast_to(np.arange(K), (state.M, K))
        return PosteriorTable(indices, weights, "full")
    if mode != "truncated":
        raise ValueError(f"unknown mode {mode!r}")
    if index is None:
        raise ValueError("truncated mode needs a NeighborIndex")
    if len(index) != state.M:
        raise DimensionMismatch(f"index covers {len(index)} centroids, state has {state.M}")
    idx = index.neighbors
    d2 = sq_distances(Y[idx], state.X[:, None, :])
    logits = -d2 / (2.0 * state.sigma2[:, None])
    weights = np.exp(logits - _logsumexp(logits, axis=1)[:, None])
    return PosteriorTable(idx, weights, "truncated")


def _weighted_sums(X: np.ndarray, Y: np.ndarray, post: PosteriorTable):
    """Per centroid: sum_k p (y_k - x_m), sum_k p ||y_k - x_m||^2, sum_k p."""
    M, n = post.weights.shape
    pull = np.empty((M, DIM))
    spread = np.empty(M)
    for blk in _row_blocks(M, n):
        p = post.weights[blk]
        diff = Y[post.indices[blk]] - X[blk, None, :]
        pull[blk] = np.sum(p[:, :, None] * diff, axis=1)
        spread[blk] = np.sum(p * sq_distances(diff, np.zeros(DIM)), axis=1)
    return pull, spread, post.row_sums()


def laplacian_residual(state: GmmState, delta_s: np.ndarray, kernel: LaplacianKernel) -> np.ndarray:
    """``Lap(X) - Lap(S)`` as ``(M, 3)`` pixels; ``delta_s`` is ``(3, H, W)``."""
    r = laplacian_planes(state.planes(), kernel) - delta_s
    return r.reshape(DIM, -1).T


def objective_q(
    state: GmmState,
    Y: np.ndarray,
    post: PosteriorTable,
    delta_s: np.ndarray,
    kernel: LaplacianKernel | None = None,
    reg_weight: float = 1.0,
) -> float:
    """M-step objective: expected data cost plus ``reg_weight`` times the
    Laplacian penalty ``0.5 * sum ||Lap(X) - Lap(S)||^2``.

    The log-variance term carries the factor d/2 of an isotropic
    3-D Gaussian, which is what makes the variance update its minimizer.
    """
    state.check_variances()
    kernel = kernel or default_kernel()
    Y = np.asarray(Y, dtype=np.float64)
    _, spread, mass = _weighted_sums(state.X, Y, post)
    data = np.sum(spread / (2.0 * state.sigma2)) + np.sum(0.5 * DIM * mass * np.log(state.sigma2))
    r = laplacian_residual(state, delta_s, kernel)
    return float(data + reg_weight * 0.5 * np.sum(r * r))


def objective_gradient(
    state: GmmState,
    Y: np.ndarray,
    post: PosteriorTable,
    delta_s: np.ndarray,
    kernel: LaplacianKernel | None = None,
    reg_weight: float = 1.0,
) -> np.ndarray:
    """Exact gradient of :func:`objective_q` with respect to ``X``.

    The regularizer part is ``Lap^T (Lap X - Lap S)``: every pixel sits in
    25 windows, so its own residual (weighted by the center coefficient)
    and its neighbors' residuals both contribute. Compare
    :func:`frozen_neighbor_gradient`.
    """
    kernel = kernel or default_kernel()
    Y = np.asarray(Y, dtype=np.float64)
    pull, _, _ = _weighted_sums(state.X, Y, post)
    data = -pull / state.sigma2[:, None]
    r = laplacian_residual(state, delta_s, kernel)
    r_planes = r.T.reshape(DIM, state.height, state.width)
    reg = laplacian_adjoint(r_planes, kernel).reshape(DIM, -1).T
    return data + reg_weight * reg


def frozen_neighbor_gradient(
    state: GmmState,
    Y: np.ndarray,
    post: PosteriorTable,
    delta_s: np.ndarray,
    kernel: LaplacianKernel | None = None,
) -> np.ndarray:
    """Per-pixel derivative with every neighbor ``x_m'`` held fixed.

    Only pixel m's own window is differentiated, giving
    ``-(sum of off-center weights) * (Lap X - Lap S)_m`` for the
    regularizer. The centroid update steps along the negative of this
    direction; it is not the gradient of :func:`objective_q`.
    """
    kernel = kernel or default_kernel()
    pull, _, _ = _weighted_sums(state.X, np.asarray(Y, dtype=np.float64), post)
    r = laplacian_residual(state, delta_s, kernel)
    return -pull / state.sigma2[:, None] - kernel.neighbor_weight_sum * r


def m_step_centroids(
    state: GmmState,
    Y: np.ndarray,
    post: PosteriorTable,
    kernel: LaplacianKernel,
    delta_s: np.ndarray,
    alpha: float,
    mu: float,
) -> np.ndarray:
    """One simultaneous gradient step on all centroids; returns new ``X``.

    ``x += alpha * sum p (y - x) / sum p + mu * (Lap(X)_m - Lap(S)_m)``.
    Every neighbor read uses the pre-step centroids. Centroids with zero
    responsibility mass get no data pull.
    """
    Y = np.asarray(Y, dtype=np.float64)
    pull, _, mass = _weighted_sums(state.X, Y, post)
    safe = np.where(mass > 0.0, mass, 1.0)
    step = np.where((mass > 0.0)[:, None], pull / safe[:, None], 0.0)
    X_new = state.X + alpha * step
    if mu != 0.0:
        X_new = X_new + mu * laplacian_residual(state, delta_s, kernel)
    return X_new


def m_step_variances(
    X_new: np.ndarray,
    Y: np.ndarray,
    post: PosteriorTable,
    sigma2_floor: float = 1e-6,
    previous: np.ndarray | None = None,
) -> np.ndarray:
    """Per-centroid variance ``sum p ||x - y||^2 / (3 sum p)``, floored.

    Rows with zero mass keep ``previous`` when given, otherwise the floor.
    """
    Y = np.asarray(Y, dtype=np.float64)
    _, spread, mass = _weighted_sums(np.asarray(X_new, dtype=np.float64), Y, post)
    safe = np.where(mass > 0.0, mass, 1.0)
    s2 = spread / (DIM * safe)
    if previous is not None:
        s2 = np.where(mass > 0.0, s2, previous)
    return np.maximum(s2, sigma2_floor)


def frame_of(state: GmmState) -> RgbImage:
    return colorspace.lab_to_srgb(state.lab_image())


def run_transfer(
    source: RgbImage,
    example: RgbImage,
    cfg: TransferConfig | None = None,
    sink: FrameSink | None = None,
    kernel: LaplacianKernel | None = None,
    monitor: IterationMonitor | None = None,
) -> TransferResult:
    """Run the full continuous transfer loop.

    ``sink(q, frame)`` is called with the untouched source for ``q = 0``
    and then after every iteration that is a multiple of
    ``cfg.save_every``. ``monitor(q, nll)`` sees every iteration. Source
    and example sizes may differ.
    """
    cfg = cfg or TransferConfig()
    kernel = kernel or default_kernel()
    S = colorspace.normalize_image(colorspace.srgb_to_lab(source))
    Y = colorspace.normalize_image(colorspace.srgb_to_lab(example)).pixels()

    state = GmmState.initial(S, cfg.sigma2_init, cfg.sigma2_floor)
    index = build_index(state.X, Y, cfg.k_nn) if cfg.mode == "truncated" else None
    delta_s = laplacian_planes(S.planes, kernel)

    if sink is not None:
        sink(0, source)
    initial = nll(state, Y)
    trace = []
    for q in range(1, cfg.q_max + 1):
        post = e_step(state, Y, index, cfg.mode)
        X_new = m_step_centroids(state, Y, post, kernel, delta_s, cfg.alpha, cfg.mu)
        state.sigma2 = m_step_variances(X_new, Y, post, cfg.sigma2_floor, state.sigma2)
        state.X = X_new
        state.q = q
        trace.append(nll(state, Y))
        log.debug("iteration %d nll %.9g", q, trace[-1])
        if monitor is not None:
            monitor(q, trace[-1])
        if sink is not None and q % cfg.save_every == 0:
            sink(q, frame_of(state))
    return TransferResult(state.lab_image(), state, initial, trace)
