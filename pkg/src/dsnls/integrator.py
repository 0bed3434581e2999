"""Time stepping for du + (alpha u + iAu - i|u|^2 u)dt = b dW + h dt.

Strang splitting with exact sub-flows: the linear half-step multiplies mode
k by exp(-(alpha + i mu_k) dt/2); the nonlinear step is the exact pointwise
rotation u -> u exp(i |u|^2 dt) on the collocation grid, which conserves
|u(x)| at every grid point.  Noise (and the optional low-mode drift h) is
added after the deterministic map, so each step is conditionally Gaussian
given the current state.  All kernels operate on batched coefficient arrays
(..., n_modes) and are deterministic given their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NumericsError
from .noise import NoisePath, NoiseSpec
from .spectral import SpectralField, SpectralSpace

_SCHEMES = ("strang", "lie")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float
    dt: float
    scheme: str = "strang"
    nonlinearity: bool = True
    snapshot_stride: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"scheme must be one of {_SCHEMES}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")


@lru_cache(maxsize=64)
def _linear_factors(space: SpectralSpace, alpha: float, dt: float):
    lam = alpha + 1j * space.eigenvalues
    return np.exp(-lam * dt / 2.0), np.exp(-lam * dt)


def _rotate(values: np.ndarray, dt: float) -> np.ndarray:
    # u -> u * exp(i |u|^2 dt), computed with real cos/sin (exp on complex
    # arrays is measurably slower in the hot loop)
    theta = (values.real**2 + values.imag**2) * dt
    c, s = np.cos(theta), np.sin(theta)
    return (values.real * c - values.imag * s) + 1j * (
        values.real * s + values.imag * c
    )


def deterministic_map(coeffs: np.ndarray, space: SpectralSpace, cfg: SolverConfig):
    """One deterministic Strang/Lie step on batched coefficients."""
    half, full = _linear_factors(space, cfg.alpha, cfg.dt)
    if not cfg.nonlinearity:
        return coeffs * full
    if cfg.scheme == "strang":
        c = coeffs * half
        c = space.from_values(_rotate(space.to_values(c), cfg.dt))
        return c * half
    c = coeffs * full
    return space.from_values(_rotate(space.to_values(c), cfg.dt))


def step_coeffs(
    coeffs: np.ndarray,
    space: SpectralSpace,
    cfg: SolverConfig,
    dwb: np.ndarray | None = None,
    h: np.ndarray | None = None,
) -> np.ndarray:
    """Full step on batched coefficients: deterministic map + dWb + h dt."""
    c = deterministic_map(coeffs, space, cfg)
    if dwb is not None:
        c = c + dwb
    if h is not None:
        c = c + h * cfg.dt
    return c


def step(
    u: SpectralField,
    cfg: SolverConfig,
    dwb: np.ndarray | None = None,
    h: np.ndarray | None = None,
) -> SpectralField:
    """Advance a single field by one step; h must live on the low modes."""
    c = step_coeffs(u.coeffs, u.space, cfg, dwb=dwb, h=h)
    if not np.all(np.isfinite(c.view(float))):
        raise NumericsError("step produced non-finite coefficients", step=1)
    return SpectralField(c, u.space)


@dataclass
class Trajectory:
    """Snapshots of one path plus the driving noise, enough to replay."""

    times: np.ndarray
    coeffs: np.ndarray  # (n_snapshots, n_modes)
    space: SpectralSpace
    cfg: SolverConfig
    noise: NoisePath | None
    spec: NoiseSpec | None = None
    drift_log: np.ndarray | None = None
    _states: tuple = field(default=None, repr=False, compare=False)

    @property
    def states(self) -> tuple[SpectralField, ...]:
        if self._states is None:
            self._states = tuple(
                SpectralField(c, self.space) for c in self.coeffs
            )
        return self._states

    @property
    def final(self) -> SpectralField:
        return SpectralField(self.coeffs[-1], self.space)

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a snapshot time")
        return i


def _n_steps(T_final: float, dt: float) -> int:
    K = int(round(T_final / dt))
    if abs(K * dt - T_final) > 1e-9 * max(1.0, T_final):
        raise ValueError(f"T_final={T_final} is not an integer multiple of dt={dt}")
    return K


def simulate(
    u0: SpectralField,
    T_final: float,
    cfg: SolverConfig,
    noise: NoisePath | None,
    spec: NoiseSpec | None = None,
    h_schedule: np.ndarray | None = None,
) -> Trajectory:
    """Integrate from u0 to T_final; deterministic given (u0, cfg, noise).

    noise holds raw increments dW; the diagonal operator from `spec` colors
    them.  h_schedule, if given, is a (n_steps, n_modes) array of low-mode
    drift values applied with the left-point rule.
    """
    space = u0.space
    K = _n_steps(T_final, cfg.dt)
    if noise is not None:
        if spec is None:
            raise ValueError("a NoiseSpec is required to color a NoisePath")
        if noise.n_steps < K:
            raise ValueError(f"noise path has {noise.n_steps} steps, need {K}")
    if h_schedule is not None and len(h_schedule) < K:
        raise ValueError("h_schedule shorter than the number of steps")

    stride = cfg.snapshot_stride
    snaps = [u0.coeffs.copy()]
    times = [0.0]
    c = u0.coeffs.copy()
    for j in range(K):
        dwb = spec.b * noise.increments[j] if noise is not None else None
        h = h_schedule[j] if h_schedule is not None else None
        c = step_coeffs(c, space, cfg, dwb=dwb, h=h)
        if not np.all(np.isfinite(c.view(float))):
            raise NumericsError(
                f"non-finite state at step {j + 1} (t={(j + 1) * cfg.dt:.6g})",
                step=j + 1,
            )
        if (j + 1) % stride == 0 or j + 1 == K:
            snaps.append(c.copy())
            times.append((j + 1) * cfg.dt)
    return Trajectory(
        times=np.array(times),
        coeffs=np.array(snaps),
        space=space,
        cfg=cfg,
        noise=noise,
        spec=spec,
        drift_log=h_schedule if h_schedule is not None else None,
    )


def replay(traj: Trajectory) -> Trajectory:
    """Re-run a trajectory from its stored noise; bit-identical by contract."""
    u0 = SpectralField(traj.coeffs[0], traj.space)
    return simulate(
        u0,
        float(traj.times[-1]),
        traj.cfg,
        traj.noise,
        spec=traj.spec,
        h_schedule=traj.drift_log,
    )


def simulate_synchronized(
    u0_1: SpectralField,
    u0_2: SpectralField,
    N: int,
    T_final: float,
    cfg: SolverConfig,
    shared_noise: NoisePath,
    spec: NoiseSpec,
) -> tuple[Trajectory, Trajectory]:
    """Drive two states with the same noise, slaving u2's low modes to u1.

    After every step the coefficients k <= N of u2 are overwritten by those
    of u1, enforcing the low-mode identity exactly at grid times; high-mode
    noise is identical by construction.
    """
    space = u0_1.space
    if u0_2.space != space:
        raise ValueError("fields live in different spaces")
    if not 0 <= N <= space.n_modes:
        raise ValueError(f"sync cutoff N={N} outside 0..{space.n_modes}")
    K = _n_steps(T_final, cfg.dt)
    if shared_noise.n_steps < K:
        raise ValueError("noise path too short")

    stride = cfg.snapshot_stride
    c1 = u0_1.coeffs.copy()
    c2 = u0_2.coeffs.copy()
    c2[:N] = c1[:N]
    snaps1, snaps2, times = [c1.copy()], [c2.copy()], [0.0]
    both = np.stack([c1, c2])
    for j in range(K):
        dwb = spec.b * shared_noise.increments[j]
        both = step_coeffs(both, space, cfg, dwb=dwb)
        both[1, :N] = both[0, :N]
        if not np.all(np.isfinite(both.view(float))):
            raise NumericsError(f"non-finite state at step {j + 1}", step=j + 1)
        if (j + 1) % stride == 0 or j + 1 == K:
            snaps1.append(both[0].copy())
            snaps2.append(both[1].copy())
            times.append((j + 1) * cfg.dt)
    t = np.array(times)
    mk = lambda snaps: Trajectory(
        times=t,
        coeffs=np.array(snaps),
        space=space,
        cfg=cfg,
        noise=shared_noise,
        spec=spec,
    )
    return mk(snaps1), mk(snaps2)
