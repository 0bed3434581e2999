"""Diagonal additive noise: coefficients b_n, Hilbert-Schmidt norms, streams.

Noise increments are complex by default: mode n receives
b_n * (xi + i*zeta) * sqrt(dt/2) with xi, zeta independent standard normals,
so each complex mode has total variance b_n^2 * dt.  Streams are
counter-based (Philox keyed through SeedSequence spawn keys), so any
(master seed, stream key) pair reproduces its draws bit-identically and
results never depend on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import eigenvalue


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal noise operator restricted to the retained modes."""

    b: np.ndarray
    n_star: int
    sigma_0: float = field(init=False)
    B0: float = field(init=False)
    B1: float = field(init=False)
    B3: float = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("b must be a nonempty 1-d vector")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("b must be finite and nonnegative")
        if not 1 <= self.n_star <= b.size:
            raise ValueError(f"n_star={self.n_star} outside 1..{b.size}")
        if np.any(b[: self.n_star] <= 0):
            bad = int(np.flatnonzero(b[: self.n_star] <= 0)[0]) + 1
            raise ValueError(
                f"non-degeneracy requires b_n > 0 for n <= n_star; b_{bad} = 0"
            )
        b = b.copy()
        b.flags.writeable = False
        mu = np.array([eigenvalue(n) for n in range(1, b.size + 1)])
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma_0", float(b[: self.n_star].min()))
        object.__setattr__(self, "B0", float((b**2).sum()))
        object.__setattr__(self, "B1", float((mu * b**2).sum()))
        object.__setattr__(self, "B3", float((mu**3 * b**2).sum()))

    @property
    def n_modes(self) -> int:
        return self.b.size


def make_noise_spec(
    n_modes: int, n_star: int, amplitude: float, decay: float
) -> NoiseSpec:
    """Power-law profile b_n = amplitude * n^(-decay).

    decay > 3.5 is required so that B3 = sum mu_n^3 b_n^2 stays summable in
    the n_modes -> infinity limit.
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    if decay <= 3.5:
        raise ValueError(
            f"decay p={decay} rejected: B3 = sum (n pi)^6 (c n^-p)^2 diverges "
            "as n_modes grows unless p > 3.5"
        )
    n = np.arange(1, n_modes + 1, dtype=float)
    return NoiseSpec(b=amplitude * n ** (-decay), n_star=n_star)


def noise_spec_from_b(b, n_star: int) -> NoiseSpec:
    """Noise spec from an explicit coefficient vector."""
    return NoiseSpec(b=np.asarray(b, dtype=float), n_star=n_star)


class NoiseStream:
    """A reproducible stream of Wiener increments.

    The stream identity is (master_seed, key...); identical identities give
    bit-identical draw sequences, distinct identities are independent.
    """

    def __init__(self, master_seed: int, *key: int):
        self.seed_id = (int(master_seed),) + tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed_id[0], spawn_key=self.seed_id[1:])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def standard_normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None):
        return self._gen.random(shape)

    def draw_increments(
        self, n_steps: int, n_modes: int, dt: float, real_only: bool = False
    ) -> np.ndarray:
        """Raw Wiener increments dW, shape (n_steps, n_modes), complex."""
        if real_only:
            z = self.standard_normal((n_steps, n_modes)) * np.sqrt(dt)
            return z.astype(complex)
        z = self.standard_normal((n_steps, n_modes, 2)) * np.sqrt(dt / 2.0)
        return z[..., 0] + 1j * z[..., 1]


def stream(master_seed: int, *key: int) -> NoiseStream:
    return NoiseStream(master_seed, *key)


@dataclass(frozen=True)
class NoisePath:
    """Per-step raw increments dW (before applying b), replayable."""

    increments: np.ndarray  # (n_steps, n_modes) complex
    dt: float
    seed_id: tuple

    def __post_init__(self):
        inc = np.asarray(self.increments)
        if inc.ndim != 2:
            raise ValueError("increments must have shape (n_steps, n_modes)")
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]


def sample_path(
    spec: NoiseSpec,
    n_steps: int,
    dt: float,
    src: NoiseStream,
    real_only: bool = False,
) -> NoisePath:
    """Draw a whole path of raw increments from a stream."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    inc = src.draw_increments(n_steps, spec.n_modes, dt, real_only=real_only)
    return NoisePath(increments=inc, dt=dt, seed_id=src.seed_id)


def sample_increment(spec: NoiseSpec, dt: float, src: NoiseStream) -> np.ndarray:
    """One forcing increment b*dW per mode."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dw = src.draw_increments(1, spec.n_modes, dt)[0]
    return spec.b * dw


def apply_b(spec: NoiseSpec, dw: np.ndarray) -> np.ndarray:
    """Color raw increments by the diagonal operator b."""
    return spec.b * dw


def sigma_l_inverse_apply(spec: NoiseSpec, v: np.ndarray) -> np.ndarray:
    """Invert the low-mode block: componentwise division by b_n, n <= n_star.

    v must vanish above n_star (sigma_l only acts there).
    """
    v = np.asarray(v)
    if v.shape[-1] == spec.n_star:
        low = v
    elif v.shape[-1] == spec.n_modes:
        if np.any(v[..., spec.n_star :] != 0):
            raise ValueError("input has support above n_star")
        low = v[..., : spec.n_star]
    else:
        raise ValueError(
            f"expected trailing dimension {spec.n_star} or {spec.n_modes}"
        )
    out = np.zeros(v.shape[:-1] + (spec.n_modes,), dtype=v.dtype)
    out[..., : spec.n_star] = low / spec.b[: spec.n_star]
    return out
