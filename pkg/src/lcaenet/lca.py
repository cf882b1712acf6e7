"""Local contrast distance (LCD) maps and local contrast attention (LCA) weights.

Four fixed ``(2d+1) x (2d+1)`` operators compare each pixel with the two
neighbours at offset ``d`` along one direction::

    lcd_k(m, n) = alpha * x(m, n) - beta * (x(p1) + x(p2))

Map order is main diagonal, anti-diagonal, horizontal, vertical. The
attention weight is ``sigmoid(lcd_1 * lcd_2 + lcd_3 * lcd_4)``, which sits at
0.5 on flat background (when ``alpha == 2 * beta``) and approaches 1 on
compact bright or dark blobs. Pixels outside the image count as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .errors import DimensionError, InputError
from .nn.functional import conv2d

# (row, col) unit offsets of the neighbour pair for each operator
DIRECTIONS = ((1, 1), (1, -1), (0, 1), (1, 0))
DIRECTION_NAMES = ("diagonal", "anti-diagonal", "horizontal", "vertical")

# which two products are summed inside the sigmoid
PAIRINGS = {
    "diagonals": ((0, 1), (2, 3)),  # diagonal*anti-diagonal + horizontal*vertical
    "mixed": ((0, 2), (1, 3)),      # diagonal*horizontal + anti-diagonal*vertical
}
DEFAULT_PAIRING = "diagonals"


@dataclass(frozen=True)
class LcaParams:
    """Operator weights: ``alpha`` on the centre, ``beta`` on each neighbour, dilation ``d``."""

    alpha: float = 1.0
    beta: float = 0.5
    d: int = 1

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dilation d must be a positive integer, got {self.d}")
        object.__setattr__(self, "d", int(self.d))

    @property
    def size(self) -> int:
        return 2 * self.d + 1


def _check_image(image: np.ndarray, params: LcaParams) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise DimensionError(f"expected an image of shape (..., H, W), got {image.shape}")
    h, w = image.shape[-2:]
    if h < params.size or w < params.size:
        raise DimensionError(f"image {h}x{w} smaller than the {params.size}x{params.size} operator (d={params.d})")
    if not np.all(np.isfinite(image)):
        raise InputError("image contains non-finite pixels")
    return image


def lca_operators(params: LcaParams) -> np.ndarray:
    """The four fixed operators stacked as a ``(4, L, L)`` array, ``L = 2d + 1``."""
    d = params.d
    ops = np.zeros((4, params.size, params.size))
    for k, (dr, dc) in enumerate(DIRECTIONS):
        ops[k, d, d] = params.alpha
        ops[k, d - dr * d, d - dc * d] = -params.beta
        ops[k, d + dr * d, d + dc * d] = -params.beta
    return ops


def lcd_maps(image: np.ndarray, params: LcaParams) -> np.ndarray:
    """Directional contrast maps, ``(H, W) -> (4, H, W)``.

    Leading batch axes are allowed: ``(N, H, W) -> (N, 4, H, W)``.
    """
    image = _check_image(image, params)
    lead = image.shape[:-2]
    h, w = image.shape[-2:]
    batch = image.reshape(-1, 1, h, w)
    kernels = lca_operators(params)[:, None]
    maps = conv2d(batch, kernels, padding=params.d).data
    return maps.reshape(*lead, 4, h, w)


def lca_weights(maps: np.ndarray, pairing: str = DEFAULT_PAIRING) -> np.ndarray:
    """Attention weights in (0, 1) from a ``(..., 4, H, W)`` stack of LCD maps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 3 or maps.shape[-3] != 4:
        raise DimensionError(f"expected four co-registered maps (..., 4, H, W), got {maps.shape}")
    (a, b), (c, e) = PAIRINGS[pairing]
    f = np.moveaxis(maps, -3, 0)
    return expit(f[a] * f[b] + f[c] * f[e])


def local_contrast_attention(image: np.ndarray, params: LcaParams, pairing: str = DEFAULT_PAIRING) -> np.ndarray:
    """``lca_weights(lcd_maps(image))``, batch-aware."""
    return lca_weights(lcd_maps(image, params), pairing)


@numba.njit(cache=False)
def _oracle_loops(x, alpha, beta, d, pa, pb, pc, pe):
    h, w = x.shape
    out = np.empty((h, w))
    lcd = np.empty(4)
    for m in range(h):
        for n in range(w):
            for k in range(4):
                if k == 0:
                    dr, dc = 1, 1
                elif k == 1:
                    dr, dc = 1, -1
                elif k == 2:
                    dr, dc = 0, 1
                else:
                    dr, dc = 1, 0
                r1, c1 = m - dr * d, n - dc * d
                r2, c2 = m + dr * d, n + dc * d
                v1 = x[r1, c1] if 0 <= r1 < h and 0 <= c1 < w else 0.0
                v2 = x[r2, c2] if 0 <= r2 < h and 0 <= c2 < w else 0.0
                lcd[k] = alpha * x[m, n] - beta * (v1 + v2)
            z = lcd[pa] * lcd[pb] + lcd[pc] * lcd[pe]
            if z >= 0:
                out[m, n] = 1.0 / (1.0 + np.exp(-z))
            else:
                ez = np.exp(z)
                out[m, n] = ez / (1.0 + ez)
    return out


def lca_oracle(image: np.ndarray, params: LcaParams, pairing: str = DEFAULT_PAIRING) -> np.ndarray:
    """Reference LCA by explicit per-pixel loops, no convolution machinery.

    Only accepts a single ``(H, W)`` image.
    """
    image = _check_image(image, params)
    if image.ndim != 2:
        raise DimensionError("the oracle takes a single (H, W) image")
    (a, b), (c, e) = PAIRINGS[pairing]
    return _oracle_loops(np.ascontiguousarray(image), float(params.alpha), float(params.beta), params.d, a, b, c, e)


def hyperparameter_grid(ds=(1, 2, 3, 4), alphas=(1.0, 1.5, 2.0), betas=(0.5, 1.0)) -> list[LcaParams]:
    """Cartesian (d, alpha, beta) grid in row order d-major, then alpha, then beta."""
    return [LcaParams(alpha=a, beta=b, d=d) for d in ds for a in alphas for b in betas]
