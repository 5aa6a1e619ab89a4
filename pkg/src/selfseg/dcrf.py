"""Fully connected CRF with Gaussian spatial + bilateral kernels, mean-field inference.

Labels are ``0..C`` with background at index 0 treated like any other label.
Pairwise compatibility is Potts.  The normative path materialises the dense
``N x N`` kernel (N = H*W); at the sizes used here (<= 96 x 96) that fits in
memory and is reused across iterations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .structures import CamStack

PROB_CLAMP = 1e-6

# per-thread kernel buffer reused across calls; a fresh N x N allocation is
# page-faulted in on every image, which costs as much as filling it
_scratch = threading.local()


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 10
    spatial_weight: float = 3.0
    spatial_sigma: float = 3.0
    bilateral_weight: float = 4.0
    bilateral_sigma_xy: float = 20.0
    bilateral_sigma_rgb: float = 0.1
    # separable evaluation of the spatial kernel; matches the dense path to rounding
    spatial_fast_path: bool = True

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("crf iterations must be >= 0")
        if min(self.spatial_sigma, self.bilateral_sigma_xy, self.bilateral_sigma_rgb) <= 0:
            raise ValueError("crf sigmas must be > 0")
        if min(self.spatial_weight, self.bilateral_weight) < 0:
            raise ValueError("crf weights must be >= 0")


def build_unary(cams: CamStack, tau: float) -> np.ndarray:
    """-log label probabilities, shape (C+1, H, W).

    Background scores ``tau``, each present class scores its CAM value and
    absent classes score 0; scores are normalised per pixel and clamped to
    ``[1e-6, 1 - 1e-6]`` before the log.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    c, h, w = cams.maps.shape
    scores = np.zeros((c + 1, h, w))
    scores[0] = tau
    for k in cams.present_classes:
        scores[k] = cams.maps[k - 1]
    probs = scores / scores.sum(axis=0, keepdims=True)
    return -np.log(np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP))


def softmax_neg(energy: np.ndarray, axis: int = 0) -> np.ndarray:
    z = -energy
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _gauss_1d(n: int, sigma: float) -> np.ndarray:
    d = np.arange(n, dtype=np.float64)
    return np.exp(-((d[:, None] - d[None, :]) ** 2) / (2.0 * sigma * sigma))


def pairwise_kernel(
    image: np.ndarray, params: CrfParams, include_spatial: bool = True, out: np.ndarray | None = None
) -> np.ndarray:
    """Dense symmetric N x N weighted kernel with a zero diagonal (row-major pixels).

    Built in blocks of image rows so each block stays cache-sized.  The
    bilateral exponent -|f_i - f_j|^2 / 2 + log(weight) comes out of a single
    Gram product of features augmented with their half squared norms.
    """
    h, w = image.shape[:2]
    n = h * w
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.concatenate(
        [
            np.stack([yy.ravel(), xx.ravel()], axis=1) / params.bilateral_sigma_xy,
            image.reshape(n, -1).astype(np.float64) / params.bilateral_sigma_rgb,
        ],
        axis=1,
    )
    half_sq = 0.5 * (feats * feats).sum(axis=1, keepdims=True)
    ones = np.ones((n, 1))
    bilateral = params.bilateral_weight > 0
    if bilateral:
        lhs = np.hstack([feats, -half_sq, ones, np.full((n, 1), np.log(params.bilateral_weight))])
        rhs = np.ascontiguousarray(np.hstack([feats, ones, -half_sq, ones]).T)
    spatial = include_spatial and params.spatial_weight > 0
    if spatial:
        gy = params.spatial_weight * _gauss_1d(h, params.spatial_sigma)
        gx = _gauss_1d(w, params.spatial_sigma)
    kern = np.empty((n, n)) if out is None else out
    rows_per_block = max(1, 64 // w)
    for y0 in range(0, h, rows_per_block):
        y1 = min(h, y0 + rows_per_block)
        sl = slice(y0 * w, y1 * w)
        blk = kern[sl]
        if bilateral:
            np.dot(lhs[sl], rhs, out=blk)
            np.exp(blk, out=blk)
        else:
            blk[:] = 0.0
        if spatial:
            blk += np.kron(gy[y0:y1], gx)
    np.fill_diagonal(kern, 0.0)
    return kern


def _spatial_messages(q: np.ndarray, params: CrfParams) -> np.ndarray:
    """Separable spatial filtering of Q (L, H, W), excluding the self term."""
    h, w = q.shape[1:]
    gy = _gauss_1d(h, params.spatial_sigma)
    gx = _gauss_1d(w, params.spatial_sigma)
    return params.spatial_weight * (np.matmul(np.matmul(gy, q), gx.T) - q)


def mean_field_refine(
    unary: np.ndarray,
    image: np.ndarray,
    params: CrfParams,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Mean-field marginals Q of shape (L, H, W).

    ``image`` is H x W x 3 in [0, 1].  ``callback(i, Q)`` is invoked after each
    of the ``params.iterations`` updates.
    """
    params.validate()
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 3:
        raise ValueError(f"unary must be L x H x W, got {unary.shape}")
    if image.shape[:2] != unary.shape[1:]:
        raise ValueError(f"image extent {image.shape[:2]} != unary extent {unary.shape[1:]}")
    q = softmax_neg(unary)
    if params.iterations == 0 or (params.spatial_weight == 0 and params.bilateral_weight == 0):
        for i in range(params.iterations):
            if callback:
                callback(i, q)
        return q
    nl, h, w = unary.shape
    fast = params.spatial_fast_path and params.spatial_weight > 0
    kern = None
    if params.bilateral_weight > 0 or not fast:
        n = h * w
        buf = getattr(_scratch, "kernel", None)
        if buf is None or buf.shape != (n, n):
            buf = _scratch.kernel = np.empty((n, n))
        kern = pairwise_kernel(image, params, include_spatial=not fast, out=buf)
    for i in range(params.iterations):
        if kern is not None:
            # kernel is symmetric, so Q @ K gives the messages
            msg = (q.reshape(nl, -1) @ kern).reshape(nl, h, w)
        else:
            msg = np.zeros_like(q)
        if fast:
            msg += _spatial_messages(q, params)
        # Potts: the penalty for label l is the message mass on every other
        # label, i.e. the per-pixel total minus msg[l]; the softmax drops the total
        q = softmax_neg(unary - msg)
        if callback:
            callback(i, q)
    return q
