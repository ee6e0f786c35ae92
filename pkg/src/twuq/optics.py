"""Synthetic four-channel optical forward model.

Maps a difference topography to a stack of four optical-path-length-
difference images. Each channel sees the topography through a double-pass
tilted reflection plus a weak slope-coupling nonlinearity, and an optional
calibration-error perturbation built from two double-Zernike reference
planes (a source-side plane evaluated at the channel's source coordinate
and a pixel-side plane evaluated at the pixel itself). The perturbation
scales linearly with the model's error fraction ``alpha``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .zernike import DiscGrid, Topography, ZernikeDomainError, eval_zernike, zernike_basis

__all__ = [
    "AsphereDesign",
    "ChannelConfig",
    "ReferencePlaneModel",
    "OpldStack",
    "GridMismatchError",
    "default_asphere_design",
    "asphere_sag",
    "reference_plane_path",
    "forward_model",
    "set_calibration_error",
    "calibrate_perturbation_scale",
    "add_noise",
    "gradient",
    "channel_masks",
]

N_CHANNELS = 4

DEFAULT_SLOPE_GAIN = 0.5


class GridMismatchError(ValueError):
    """Input shapes disagree with the evaluation grid."""


@dataclass(frozen=True)
class AsphereDesign:
    """Rotationally symmetric design surface: conic base + even polynomial.

    ``R`` is the paraxial radius in meters, ``kappa`` the conic constant and
    ``A`` the seven even-order coefficients for r**4 .. r**16.
    """

    R: float
    kappa: float
    A: tuple[float, ...]

    def __post_init__(self):
        if self.R == 0.0:
            raise ValueError("paraxial radius must be nonzero")
        if len(self.A) != 7:
            raise ValueError(f"expected 7 even-order coefficients, got {len(self.A)}")


def default_asphere_design() -> AsphereDesign:
    """Asphere used as the design surface for data generation."""
    return AsphereDesign(
        R=0.0202,
        kappa=-1.0,
        A=(
            5.4145e03,
            -8.0413e05,
            -2.9871e09,
            -1.4918e12,
            1.3777e15,
            4.4258e18,
            -3.4928e21,
        ),
    )


def asphere_sag(design: AsphereDesign, r: float) -> float:
    """Surface sag at radial coordinate ``r`` (meters)."""
    r2 = r * r
    conic_arg = 1.0 - (1.0 + design.kappa) * r2 / (design.R * design.R)
    if conic_arg < 0.0:
        raise ZernikeDomainError(
            f"conic square root argument negative at r={r}: {conic_arg}"
        )
    sag = r2 / (design.R * (1.0 + math.sqrt(conic_arg)))
    poly = 0.0
    for a in reversed(design.A):
        poly = poly * r2 + a
    return sag + poly * r2 * r2


@dataclass(frozen=True)
class ChannelConfig:
    """One of the four acquisition channels.

    ``theta`` is the incidence tilt in radians, ``source_uv`` the normalized
    source coordinate used by the source-side reference plane, ``slope_dir``
    the unit direction of the slope-coupling term, and the sector fields
    define the channel's validity wedge (width >= 360 covers the full disc).
    """

    k: int
    theta: float
    source_uv: tuple[float, float]
    slope_dir: tuple[float, float]
    sector_center_deg: float
    sector_width_deg: float

    def __post_init__(self):
        if not 1 <= self.k <= N_CHANNELS:
            raise ValueError(f"channel id must be 1..{N_CHANNELS}, got {self.k}")
        if not 0.0 <= self.theta < math.pi / 3:
            raise ValueError(f"tilt angle out of range [0, pi/3): {self.theta}")
        u, v = self.source_uv
        if not (-1.0 <= u <= 1.0 and -1.0 <= v <= 1.0):
            raise ValueError(f"source coordinate outside unit square: {self.source_uv}")


@dataclass(frozen=True)
class ReferencePlaneModel:
    """Double-Zernike coefficient matrices and the error fraction ``alpha``.

    ``Q`` parameterizes the source-side plane (rows couple to the local
    intersection, columns to the source coordinate), ``P`` the pixel-side
    plane. ``alpha = 0`` makes the perturbation exactly zero.
    """

    Q: np.ndarray
    P: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        for name, mat in (("Q", self.Q), ("P", self.P)):
            if mat.ndim != 2:
                raise ValueError(f"{name} must be a matrix, got ndim={mat.ndim}")
            if not np.all(np.isfinite(mat)):
                raise ValueError(f"{name} contains non-finite entries")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"error fraction must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class OpldStack:
    """Four optical-path-length-difference images with validity flags.

    Invalid entries hold the sentinel 0.0 and are excluded from every norm.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape or self.values.ndim != 3:
            raise ValueError("values and valid flags must share one 3-d shape")
        if self.values.shape[0] != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channels, got {self.values.shape[0]}")

    @property
    def D(self) -> int:
        return self.values.shape[1]


def reference_plane_path(
    coeffs: np.ndarray,
    local: tuple[float, float],
    outer: tuple[float, float],
) -> float:
    """Double-Zernike path contribution of one reference plane (meters).

    ``sum_i (sum_j coeffs[i, j] * Z_j(outer)) * Z_i(local)`` with both points
    inside the closed unit disc. Row index couples to ``local``, column index
    to ``outer``; index 0 is piston.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n_local, n_outer = coeffs.shape
    z_local = np.array([eval_zernike(i, *local) for i in range(n_local)])
    z_outer = np.array([eval_zernike(j, *outer) for j in range(n_outer)])
    return float(z_local @ coeffs @ z_outer)


def _sector_mask(grid: DiscGrid, center_deg: float, width_deg: float) -> np.ndarray:
    if width_deg >= 360.0:
        return grid.mask.copy()
    phi = np.arctan2(grid.y, grid.x)
    delta = phi - math.radians(center_deg)
    delta = np.abs((delta + np.pi) % (2.0 * np.pi) - np.pi)
    return grid.mask & (delta <= math.radians(width_deg) / 2.0)


def channel_masks(channels: Sequence[ChannelConfig], grid: DiscGrid) -> np.ndarray:
    """Per-channel validity masks, each a subset of the aperture."""
    return np.stack(
        [_sector_mask(grid, c.sector_center_deg, c.sector_width_deg) for c in channels]
    )


def gradient(topo: Topography, grid: DiscGrid) -> tuple[np.ndarray, np.ndarray]:
    """Aperture-aware first derivatives in unit-disc coordinates.

    Central differences where both neighbours are inside the aperture,
    one-sided at the aperture boundary, zero where no neighbour exists.
    """
    h = grid.pixel_pitch
    t = topo.values
    mask = topo.mask

    def one_axis(axis: int) -> np.ndarray:
        fwd_val = np.zeros_like(t)
        bwd_val = np.zeros_like(t)
        fwd_ok = np.zeros_like(mask)
        bwd_ok = np.zeros_like(mask)
        take_fwd = [slice(None)] * 2
        take_bwd = [slice(None)] * 2
        put_fwd = [slice(None)] * 2
        put_bwd = [slice(None)] * 2
        take_fwd[axis] = slice(1, None)
        put_fwd[axis] = slice(None, -1)
        take_bwd[axis] = slice(None, -1)
        put_bwd[axis] = slice(1, None)
        fwd_val[tuple(put_fwd)] = t[tuple(take_fwd)]
        fwd_ok[tuple(put_fwd)] = mask[tuple(take_fwd)]
        bwd_val[tuple(put_bwd)] = t[tuple(take_bwd)]
        bwd_ok[tuple(put_bwd)] = mask[tuple(take_bwd)]
        central = (fwd_val - bwd_val) / (2.0 * h)
        fwd_only = (fwd_val - t) / h
        bwd_only = (t - bwd_val) / h
        out = np.where(
            fwd_ok & bwd_ok,
            central,
            np.where(fwd_ok, fwd_only, np.where(bwd_ok, bwd_only, 0.0)),
        )
        out[~mask] = 0.0
        return out

    return one_axis(1), one_axis(0)


def _perturbation_fields(
    channels: Sequence[ChannelConfig],
    ref_planes: ReferencePlaneModel,
    grid: DiscGrid,
) -> np.ndarray:
    """Unit-alpha perturbation per channel: source plane + pixel plane."""
    n_i, n_j = ref_planes.Q.shape
    n_k, n_h = ref_planes.P.shape
    basis_i = zernike_basis(max(n_i, n_k, n_h), grid)
    source = np.empty((len(channels), grid.D, grid.D))
    for idx, ch in enumerate(channels):
        z_outer = np.array([eval_zernike(j, *ch.source_uv) for j in range(n_j)])
        eff = ref_planes.Q @ z_outer
        source[idx] = np.tensordot(eff, basis_i[:n_i], axes=1)
    pixel = np.einsum("kh,kxy,hxy->xy", ref_planes.P, basis_i[:n_k], basis_i[:n_h])
    return source + pixel[np.newaxis]


def forward_model(
    topo: Topography,
    channels: Sequence[ChannelConfig],
    ref_planes: ReferencePlaneModel,
    grid: DiscGrid,
    slope_gain: float = DEFAULT_SLOPE_GAIN,
) -> OpldStack:
    """Map a topography to its four-channel path-length-difference stack.

    Valid entries hold ``2*cos(theta_k)*T + slope_gain*(a_k*dT/dx +
    b_k*dT/dy)*T + alpha*(source_plane_k + pixel_plane)``; entries outside a
    channel's sector or the aperture are invalid with sentinel 0.
    """
    if len(channels) != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channel configs, got {len(channels)}")
    if topo.values.shape != (grid.D, grid.D):
        raise GridMismatchError(
            f"topography shape {topo.values.shape} does not match grid D={grid.D}"
        )
    masks = channel_masks(channels, grid)
    gx, gy = gradient(topo, grid)
    values = np.zeros((N_CHANNELS, grid.D, grid.D))
    pert = None
    if ref_planes.alpha != 0.0:
        pert = _perturbation_fields(channels, ref_planes, grid)
    for idx, ch in enumerate(channels):
        a, b = ch.slope_dir
        field = 2.0 * math.cos(ch.theta) * topo.values
        field = field + slope_gain * (a * gx + b * gy) * topo.values
        if pert is not None:
            field = field + ref_planes.alpha * pert[idx]
        values[idx] = np.where(masks[idx], field, 0.0)
    return OpldStack(values=values, valid=masks)


def set_calibration_error(
    ref_planes: ReferencePlaneModel, fraction: float
) -> ReferencePlaneModel:
    """Copy of the model with the error fraction replaced."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"error fraction must lie in [0, 1], got {fraction}")
    return dataclasses.replace(ref_planes, alpha=float(fraction))


def calibrate_perturbation_scale(
    Q: np.ndarray,
    P: np.ndarray,
    target_rmsd: float,
    probe_topos: Sequence[Topography],
    channels: Sequence[ChannelConfig],
    grid: DiscGrid,
    slope_gain: float = DEFAULT_SLOPE_GAIN,
) -> tuple[np.ndarray, np.ndarray]:
    """Rescale ``Q`` and ``P`` by one factor to hit a target perturbation rms.

    The target is the root-mean-square deviation, over all valid pixels of
    the probe set, between the fully perturbed (``alpha = 1``) and clean
    forward outputs.
    """
    if target_rmsd <= 0.0:
        raise ValueError(f"target rms deviation must be positive, got {target_rmsd}")
    if len(probe_topos) == 0:
        raise ValueError("probe set must be nonempty")
    raw = ReferencePlaneModel(Q=np.asarray(Q, dtype=np.float64), P=np.asarray(P, dtype=np.float64))
    sum_sq = 0.0
    count = 0
    for topo in probe_topos:
        clean = forward_model(topo, channels, raw, grid, slope_gain)
        perturbed = forward_model(
            topo, channels, set_calibration_error(raw, 1.0), grid, slope_gain
        )
        delta = perturbed.values[perturbed.valid] - clean.values[clean.valid]
        sum_sq += float(delta @ delta)
        count += delta.size
    rms = math.sqrt(sum_sq / count)
    if rms == 0.0:
        raise ValueError("perturbation matrices produce a zero field; cannot scale")
    factor = target_rmsd / rms
    return raw.Q * factor, raw.P * factor


def add_noise(stack: OpldStack, sigma: float, seed: int) -> OpldStack:
    """Independent zero-mean Gaussian noise on valid entries, seeded."""
    if sigma < 0.0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    values = stack.values.copy()
    if sigma > 0.0:
        rng = np.random.default_rng(seed)
        values[stack.valid] += sigma * rng.standard_normal(int(stack.valid.sum()))
    return OpldStack(values=values, valid=stack.valid.copy())
