"""Zernike polynomials on the unit disc.

Single-index convention is OSA/ANSI: ``j = (n*(n+2) + m) // 2`` with radial
order ``n`` and azimuthal frequency ``m`` (``m < 0`` selects the sine term).
Normalization is chosen so that the continuous inner product of two
polynomials over the unit disc equals ``pi * delta_ij``; equivalently each
polynomial has unit root-mean-square over the disc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ZernikeDomainError",
    "DiscGrid",
    "Topography",
    "index_to_nm",
    "nm_to_index",
    "eval_zernike",
    "zernike_basis",
    "eval_expansion",
    "gram_matrix",
]


class ZernikeDomainError(ValueError):
    """Raised when a point outside the closed unit disc is evaluated."""


class DiscGrid:
    """Square pixel grid with a unit-disc aperture mask.

    Pixel centers sit at ``x = (2*c + 1) / D - 1`` for column ``c`` (and the
    same formula in ``y`` for row ``r``), so the grid is symmetric about the
    origin and no center lands outside ``[-1, 1]``. The aperture is the
    closed disc ``x**2 + y**2 <= 1``; ``d_prime`` counts in-aperture pixels.
    """

    __slots__ = ("D", "x", "y", "mask", "d_prime")

    def __init__(self, D: int):
        if D < 1:
            raise ValueError(f"grid size must be positive, got {D}")
        centers = (2.0 * np.arange(D) + 1.0) / D - 1.0
        x = np.broadcast_to(centers[np.newaxis, :], (D, D)).copy()
        y = np.broadcast_to(centers[:, np.newaxis], (D, D)).copy()
        mask = x * x + y * y <= 1.0
        for a in (x, y, mask):
            a.setflags(write=False)
        self.D = D
        self.x = x
        self.y = y
        self.mask = mask
        self.d_prime = int(mask.sum())

    @property
    def pixel_area(self) -> float:
        return (2.0 / self.D) ** 2

    @property
    def pixel_pitch(self) -> float:
        return 2.0 / self.D

    def __eq__(self, other) -> bool:
        return isinstance(other, DiscGrid) and other.D == self.D

    def __hash__(self) -> int:
        return hash(("DiscGrid", self.D))

    def __repr__(self) -> str:
        return f"DiscGrid(D={self.D})"


@dataclass(frozen=True)
class Topography:
    """Height map on a disc aperture, in meters; invalid pixels are zeroed."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError("topography values and mask must be equal 2-d shapes")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("topography contains non-finite values inside the aperture")

    @property
    def D(self) -> int:
        return self.values.shape[0]


def index_to_nm(j: int) -> tuple[int, int]:
    """Map an OSA/ANSI single index to the (n, m) order pair."""
    if j < 0:
        raise ValueError(f"index must be non-negative, got {j}")
    n = (math.isqrt(8 * j + 1) - 1) // 2
    m = 2 * j - n * (n + 2)
    return n, m


def nm_to_index(n: int, m: int) -> int:
    """Inverse of :func:`index_to_nm`."""
    if n < 0 or abs(m) > n or (n - m) % 2 != 0:
        raise ValueError(f"invalid Zernike order pair (n={n}, m={m})")
    return (n * (n + 2) + m) // 2


@lru_cache(maxsize=None)
def _radial_coeffs(n: int, m_abs: int) -> tuple[float, ...]:
    # Coefficients of rho**(n - 2k), k = 0..(n - m_abs)/2, exact integers.
    coeffs = []
    for k in range((n - m_abs) // 2 + 1):
        c = (
            (-1) ** k
            * math.factorial(n - k)
            // (
                math.factorial(k)
                * math.factorial((n + m_abs) // 2 - k)
                * math.factorial((n - m_abs) // 2 - k)
            )
        )
        coeffs.append(float(c))
    return tuple(coeffs)


def _eval_nm(n: int, m: int, x, y):
    m_abs = abs(m)
    rho2 = x * x + y * y
    coeffs = _radial_coeffs(n, m_abs)
    # Horner in rho**2 leaves the residual rho**m_abs factor to attach below.
    radial = np.full_like(rho2, coeffs[0])
    for c in coeffs[1:]:
        radial = radial * rho2 + c
    if m_abs >= 2:
        radial = radial * rho2 ** (m_abs // 2)
    if m_abs % 2 == 1:
        radial = radial * np.sqrt(rho2)
    if m == 0:
        return math.sqrt(n + 1.0) * radial
    theta = np.arctan2(y, x)
    angular = np.cos(m_abs * theta) if m > 0 else np.sin(m_abs * theta)
    return math.sqrt(2.0 * (n + 1.0)) * radial * angular


def eval_zernike(j: int, x: float, y: float) -> float:
    """Evaluate polynomial ``j`` at one point of the closed unit disc."""
    if x * x + y * y > 1.0:
        raise ZernikeDomainError(f"point ({x}, {y}) lies outside the unit disc")
    n, m = index_to_nm(j)
    return float(_eval_nm(n, m, np.float64(x), np.float64(y)))


@lru_cache(maxsize=8)
def _basis_for(D: int, n_terms: int) -> np.ndarray:
    grid = DiscGrid(D)
    basis = np.zeros((n_terms, D, D), dtype=np.float64)
    xm = grid.x[grid.mask]
    ym = grid.y[grid.mask]
    for j in range(n_terms):
        n, m = index_to_nm(j)
        basis[j][grid.mask] = _eval_nm(n, m, xm, ym)
    basis.setflags(write=False)
    return basis


def zernike_basis(n_terms: int, grid: DiscGrid) -> np.ndarray:
    """Stack of the first ``n_terms`` polynomials sampled on ``grid``.

    Shape ``(n_terms, D, D)``; out-of-aperture pixels are zero. The result is
    cached per ``(D, n_terms)`` and read-only.
    """
    if n_terms < 1:
        raise ValueError(f"need at least one term, got {n_terms}")
    return _basis_for(grid.D, n_terms)


def eval_expansion(coeffs: np.ndarray, grid: DiscGrid) -> Topography:
    """Sum ``coeffs[j] * Z_j`` over the aperture; coefficients in meters."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1 or coeffs.size < 1:
        raise ValueError("coefficients must be a non-empty 1-d vector")
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("coefficients must be finite")
    basis = zernike_basis(coeffs.size, grid)
    values = np.tensordot(coeffs, basis, axes=1)
    values[~grid.mask] = 0.0
    return Topography(values=values, mask=grid.mask)


def gram_matrix(n_terms: int, grid: DiscGrid) -> np.ndarray:
    """Pairwise discrete inner products ``sum_p Z_i Z_j * pixel_area``.

    Converges to ``pi * identity`` as the grid refines; used to verify the
    normalization convention.
    """
    basis = zernike_basis(n_terms, grid)
    flat = basis[:, grid.mask]
    return (flat @ flat.T) * grid.pixel_area
