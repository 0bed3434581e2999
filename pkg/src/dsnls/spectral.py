"""Dirichlet sine basis on (0,1): fields, projections, norms, cubic term.

The basis is L2-normalized, e_k(x) = sqrt(2) sin(k pi x) for k >= 1, with
Dirichlet Laplacian eigenvalues mu_k = (k pi)^2.  Nonlinear products are
formed pointwise on a collocation grid x_j = j/(n_quad+1), j = 1..n_quad,
and projected back by the discrete sine transform; with n_quad >= 4*n_modes
the retained band of the cubic term is alias-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import NumericsError

_SQRT2 = np.sqrt(2.0)


def eigenvalue(n: int) -> float:
    """Eigenvalue mu_n = (n pi)^2 of the Dirichlet Laplacian on (0,1)."""
    if n < 1:
        raise ValueError(f"mode index must be >= 1, got {n}")
    return (n * np.pi) ** 2


def default_n_quad(n_modes: int) -> int:
    """Smallest collocation count >= 4*n_modes with a fast DST length.

    DST-I of length N runs as an FFT of length 2(N+1); pick N so that N+1
    is 5-smooth to avoid Bluestein fallbacks in the hot loops.
    """
    return sfft.next_fast_len(4 * n_modes + 1) - 1


class SpectralSpace:
    """Retained eigenbasis plus the collocation grid for cubic products.

    Instances are immutable and shareable between workers; all derived
    arrays are precomputed once.
    """

    def __init__(self, n_modes: int, n_quad: int | None = None):
        if n_modes < 1:
            raise ValueError("n_modes must be a positive integer")
        if n_quad is None:
            n_quad = default_n_quad(n_modes)
        if n_quad < 4 * n_modes:
            raise ValueError(
                f"n_quad={n_quad} violates the dealiasing requirement "
                f"n_quad >= 4*n_modes = {4 * n_modes}"
            )
        self.n_modes = int(n_modes)
        self.n_quad = int(n_quad)
        k = np.arange(1, self.n_modes + 1)
        self.eigenvalues = (k * np.pi) ** 2
        self.grid = np.arange(1, self.n_quad + 1) / (self.n_quad + 1)
        self.quad_weight = 1.0 / (self.n_quad + 1)
        self._fwd_scale = 1.0 / (_SQRT2 * (self.n_quad + 1))

    def __eq__(self, other):
        return (
            isinstance(other, SpectralSpace)
            and self.n_modes == other.n_modes
            and self.n_quad == other.n_quad
        )

    def __hash__(self):
        return hash((self.n_modes, self.n_quad))

    def __repr__(self):
        return f"SpectralSpace(n_modes={self.n_modes}, n_quad={self.n_quad})"

    def to_values(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate fields on the collocation grid.

        coeffs has shape (..., n_modes); returns (..., n_quad).
        """
        pad = np.zeros(coeffs.shape[:-1] + (self.n_quad,), dtype=coeffs.dtype)
        pad[..., : self.n_modes] = coeffs
        return sfft.dst(pad, type=1, axis=-1) / _SQRT2

    def from_values(self, values: np.ndarray) -> np.ndarray:
        """Project grid values onto the retained band (..., n_modes)."""
        out = sfft.dst(values, type=1, axis=-1)
        return out[..., : self.n_modes] * self._fwd_scale

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature of grid samples; exact for the dealiased sine band."""
        return values.sum(axis=-1) * self.quad_weight


@dataclass(frozen=True)
class SpectralField:
    """A state u = sum_k coeffs[k-1] e_k, immutable by convention."""

    coeffs: np.ndarray
    space: SpectralSpace

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (self.space.n_modes,):
            raise ValueError(
                f"coeffs shape {c.shape} does not match n_modes={self.space.n_modes}"
            )
        if not np.all(np.isfinite(c.view(float))):
            raise ValueError("field coefficients must be finite")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def values(self) -> np.ndarray:
        return self.space.to_values(self.coeffs)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs + other.coeffs, self.space)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs - other.coeffs, self.space)

    def __mul__(self, scalar) -> "SpectralField":
        return SpectralField(self.coeffs * scalar, self.space)

    __rmul__ = __mul__


def zero_field(space: SpectralSpace) -> SpectralField:
    return SpectralField(np.zeros(space.n_modes, dtype=complex), space)


def mode_field(space: SpectralSpace, n: int, amplitude=1.0) -> SpectralField:
    """amplitude * e_n."""
    if not 1 <= n <= space.n_modes:
        raise ValueError(f"mode {n} outside 1..{space.n_modes}")
    c = np.zeros(space.n_modes, dtype=complex)
    c[n - 1] = amplitude
    return SpectralField(c, space)


def project_low(u: SpectralField, N: int) -> SpectralField:
    """P_N u: keep modes k <= N, zero the rest."""
    if not 0 <= N <= u.space.n_modes:
        raise ValueError(f"cutoff N={N} outside 0..{u.space.n_modes}")
    c = np.array(u.coeffs)
    c[N:] = 0.0
    return SpectralField(c, u.space)


def project_high(u: SpectralField, N: int) -> SpectralField:
    """Q_N u = u - P_N u."""
    if not 0 <= N <= u.space.n_modes:
        raise ValueError(f"cutoff N={N} outside 0..{u.space.n_modes}")
    c = np.array(u.coeffs)
    c[:N] = 0.0
    return SpectralField(c, u.space)


def sobolev_norm(u: SpectralField, s: float) -> float:
    """(sum_k mu_k^s |u_k|^2)^(1/2); s=0 is L2, s=1 the H1_0 norm."""
    if not -1.0 <= s <= 3.0:
        raise ValueError(f"s={s} outside the supported range [-1, 3]")
    return float(np.sqrt(sobolev_norm_sq(u.coeffs, u.space, s)))


def sobolev_norm_sq(coeffs: np.ndarray, space: SpectralSpace, s: float) -> np.ndarray:
    """Batched squared Sobolev norm over the trailing mode axis."""
    w = space.eigenvalues**s if s != 0 else 1.0
    mag = coeffs.real**2 + coeffs.imag**2
    return (mag * w).sum(axis=-1)


def cubic_values(values: np.ndarray) -> np.ndarray:
    """Pointwise |u|^2 u on the grid."""
    return (values.real**2 + values.imag**2) * values


def cubic_nonlinearity(u: SpectralField) -> SpectralField:
    """Spectral coefficients of |u|^2 u, dealiased by collocation."""
    vals = u.values()
    w = cubic_values(vals)
    if not np.all(np.isfinite(w.view(float))):
        bad = np.flatnonzero(~np.isfinite(np.abs(w)))[0]
        raise NumericsError(
            f"cubic term overflowed at collocation point x={u.space.grid[bad]:.6f}",
            location=int(bad),
        )
    return SpectralField(u.space.from_values(w), u.space)


def lp_norm(u: SpectralField, p) -> float:
    """L^p norm by quadrature (p in {2, 4, 6}) or grid max (p = inf)."""
    if p == 2:
        return float(np.linalg.norm(u.coeffs))
    vals = u.values()
    mag = np.abs(vals)
    if p == np.inf or p == "inf":
        return float(mag.max())
    if p in (4, 6):
        return float(u.space.integrate(mag**p) ** (1.0 / p))
    raise ValueError(f"unsupported p={p}; use 2, 4, 6 or inf")
