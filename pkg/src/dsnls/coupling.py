"""The coupling construction: maximal couplings, Girsanov epochs, l0 record.

An epoch of length T couples two solution laws through their images
(low modes X, high-mode noise eta).  The first component is always
simulated plainly; a shadow high-mode block driven by the same low-mode
path and high-mode noise supplies the drift that the second law would
need, and the identity of (X, eta) is accepted with probability
min(1, density ratio).  On rejection the second component is resampled
from the residual law by rejection.  The density between the two
conditionally-Gaussian discrete kernels is exact (not a continuum
approximation), so both marginals are exact solution laws in
distribution; residual resampling is capped at a retry limit, with
exhaustion surfaced in the epoch log.

Case b truncates the drift: it is zeroed once an energy envelope, the
weighted-distance integral, or the drift-energy budget
sigma_0^-2 C_* exp(a - alpha/2 (k-l) T) would be exceeded, so the budget
bound holds by construction.  An accepted identity is mapped back to a
plain solution by re-integrating past the truncation time with the
recovered noise, which keeps the marginal exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .functionals import FunctionalConstants, hamiltonian_batch
from .integrator import SolverConfig, deterministic_map, step_coeffs
from .noise import NoiseSpec, NoiseStream
from .spectral import SpectralField, SpectralSpace, sobolev_norm_sq

INF = math.inf


# --- finite maximal coupling -------------------------------------------------


def tv_discrete(p, q) -> float:
    """Total variation distance between two finite distributions."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return 0.5 * float(np.abs(p - q).sum())


def _check_distribution(p) -> np.ndarray:
    p = np.asarray(p, float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a nonempty 1-d vector")
    if np.any(p < -1e-15):
        raise ValueError("distribution has negative mass")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"distribution not normalized (mass {p.sum():.6g})")
    return np.clip(p, 0.0, None)


def _inverse_cdf(p: np.ndarray, u: float) -> int:
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), p.size - 1))


def maximal_coupling_discrete(mu1, mu2, rng) -> tuple[int, int]:
    """Sample a maximal coupling of two finite distributions.

    Draws from the overlap measure min(mu1, mu2) with probability equal to
    its mass (the samples then coincide), otherwise from the normalized
    residuals independently by inverse CDF; the residual supports are
    disjoint, so P(equal) = 1 - TV(mu1, mu2) exactly and both marginals
    are exact.
    """
    p = _check_distribution(mu1)
    q = _check_distribution(mu2)
    if p.size != q.size:
        raise ValueError("distributions must live on a common finite set")
    overlap = np.minimum(p, q)
    w = overlap.sum()
    if rng.random() < w:
        k = _inverse_cdf(overlap, rng.random())
        return k, k
    i = _inverse_cdf(p - overlap, rng.random())
    j = _inverse_cdf(q - overlap, rng.random())
    return i, j


# --- Girsanov bookkeeping ----------------------------------------------------


def girsanov_log_weight(drifts: np.ndarray, increments: np.ndarray, dt: float):
    """Exact log density of the drift-shifted path law at the given path.

    drifts and increments have shape (..., n_steps, n_low); increments are
    the raw Wiener increments of the low modes.  With the complex-noise
    convention (each mode has total variance dt, i.e. dt/2 per real
    component) the normalized discrete Girsanov density is

        log w = sum_j [ 2 Re<d_j, dW_j> - |d_j|^2 dt ].
    """
    d = np.asarray(drifts)
    dw = np.asarray(increments)
    if d.shape != dw.shape:
        raise ValueError(f"drift shape {d.shape} != increment shape {dw.shape}")
    ito = (d.real * dw.real + d.imag * dw.imag).sum(axis=(-1, -2))
    energy = (d.real**2 + d.imag**2).sum(axis=(-1, -2)) * dt
    return 2.0 * ito - energy


@dataclass
class GirsanovAccumulator:
    """Running log-density and drift energy along one path."""

    log_density: float = 0.0
    drift_energy: float = 0.0
    truncation_active: bool = True

    def add(self, d: np.ndarray, dw: np.ndarray, dt: float):
        if not self.truncation_active:
            return
        e = float((d.real**2 + d.imag**2).sum() * dt)
        self.log_density += float(
            2.0 * (d.real * dw.real + d.imag * dw.imag).sum() - e
        )
        self.drift_energy += e

    def truncate(self):
        self.truncation_active = False


# --- parameters and records --------------------------------------------------


@dataclass(frozen=True)
class CouplingParams:
    """Epoch parameters; fitted constants ship as defaults in the CLI."""

    T: float
    T1: float
    d0: float
    R0: float
    R1: float
    kappa: float
    B: float  # fitted C_4' (energy growth rate)
    n_star: int
    c_star: float  # fitted C_*(d0) for the case-b budgets
    c6_prime: float  # fitted C_6' for the case-a energy envelope
    rho_a: float | None = None  # case-a envelope slack; defaults to kappa
    a: float | None = None  # budget exponent offset; defaults to kappa
    retry_cap: int = 64
    shared_step1: bool = True
    monitor_stride: int = 5

    def __post_init__(self):
        if min(self.T, self.T1, self.d0, self.R0, self.R1, self.kappa) <= 0:
            raise ValueError("all coupling parameters must be positive")
        if self.B <= 0 or self.c_star <= 0 or self.c6_prime <= 0:
            raise ValueError("fitted constants must be positive")
        if self.R0 < self.d0:
            raise ValueError("R0 >= d0 is required")
        if self.T1 > self.T + 1e-12:
            raise ValueError("T1 <= T is required")
        if self.n_star < 1 or self.retry_cap < 1 or self.monitor_stride < 1:
            raise ValueError("n_star, retry_cap and monitor_stride must be >= 1")

    @property
    def rho(self) -> float:
        return self.kappa if self.rho_a is None else self.rho_a

    @property
    def a_exp(self) -> float:
        return self.kappa if self.a is None else self.a

    def drift_budget(self, gap: float, alpha: float, sigma_0: float) -> float:
        """sigma_0^-2 C_*(d0) exp(a - alpha/2 (k-l) T)."""
        return (
            self.c_star
            / sigma_0**2
            * math.exp(self.a_exp - 0.5 * alpha * gap * self.T)
        )

    def wd_budget(self, gap: float, alpha: float) -> float:
        return self.c_star * math.exp(self.a_exp - 0.5 * alpha * gap * self.T)

    def env4_bound(self, t_since_l) -> float:
        return self.kappa + 1.0 + self.d0**4 + self.d0**8 + self.B * t_since_l

    def env6_bound(self, t: float) -> float:
        """kappa'(rho, t, R1) = 2 (R1^6 + C_6' t + rho (R1^12 + t))."""
        return 2.0 * (self.R1**6 + self.c6_prime * t + self.rho * (self.R1**12 + t))


@dataclass(frozen=True)
class EpochOutcome:
    k: int
    branch: str  # 'a', 'b' or 'trivial'
    met: bool
    coupled: bool
    h1: float
    h2: float
    log_weight: float = 0.0
    drift_energy: float = 0.0
    budget: float = INF
    truncated: bool = False
    tau_step: int | None = None
    env_ok: bool = True
    wd_integral: float = 0.0
    resid_rounds: int = 0
    resid_exhausted: bool = False
    small_ball: bool | None = None
    acc_h4: tuple = (0.0, 0.0)

    def log_row(self) -> dict:
        return {
            "k": self.k,
            "branch": self.branch,
            "met": bool(self.met),
            "coupled": bool(self.coupled),
            "H1": self.h1,
            "H2": self.h2,
            "log_weight": self.log_weight,
            "drift_energy": self.drift_energy,
            "budget": None if self.budget == INF else self.budget,
            "truncated": bool(self.truncated),
            "resid_rounds": self.resid_rounds,
            "resid_exhausted": bool(self.resid_exhausted),
        }


@dataclass
class L0Record:
    """The l0 bookkeeping process and its predicate components."""

    d0: float
    values: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    acc_h4: tuple = (0.0, 0.0)  # int H^4 ds since lT, per component

    @property
    def current(self) -> float:
        return self.values[-1] if self.values else INF

    @property
    def k(self) -> int:
        return len(self.values) - 1

    @property
    def coupled_at(self) -> float:
        """First epoch k with l0(k) <= k, or inf if never coupled."""
        for k, v in enumerate(self.values):
            if v <= k:
                return k
        return INF

    def check_consistency(self):
        """Hard assertions for the monotone-consistency conditions."""
        vals = self.values
        for k in range(len(vals) - 1):
            nxt = vals[k + 1]
            if nxt <= k and vals[k] != nxt:
                raise RuntimeError(
                    f"l0 consistency violated: l0({k + 1})={nxt}, l0({k})={vals[k]}"
                )
        for k, (v, fl) in enumerate(zip(vals, self.flags)):
            if v == k and not fl["h_le_d0"]:
                raise RuntimeError(f"l0({k})={k} but H_{k} > d0")


def init_l0(c1, c2, h1, h2, n_star, d0) -> L0Record:
    rec = L0Record(d0=d0)
    lows_equal = bool(np.array_equal(c1[:n_star], c2[:n_star]))
    h_ok = bool(h1 + h2 <= d0)
    rec.values.append(0 if (lows_equal and h_ok) else INF)
    rec.flags.append({"lows_equal": lows_equal, "h_le_d0": h_ok, "env_ok": True})
    return rec


def advance_l0(record: L0Record, outcome: EpochOutcome, energies, d0: float) -> L0Record:
    """Update the record for epoch k+1 according to the P_{l,k} predicate."""
    h_ok = bool(float(energies[0]) + float(energies[1]) <= d0)
    prev = record.current
    if outcome.branch == "b":
        success = outcome.met and outcome.env_ok and not outcome.truncated
        new_l = prev if success else INF
        lows_equal = outcome.met
    elif outcome.branch == "a":
        new_l = (record.k + 1) if (outcome.coupled and h_ok) else INF
        lows_equal = outcome.met
    else:
        new_l, lows_equal = INF, False
    if new_l == INF:
        acc = (0.0, 0.0)
    elif new_l == record.k + 1:
        acc = (0.0, 0.0)  # integral restarts at the new streak origin
    else:
        acc = (
            record.acc_h4[0] + outcome.acc_h4[0],
            record.acc_h4[1] + outcome.acc_h4[1],
        )
    rec = L0Record(
        d0=record.d0,
        values=record.values + [new_l],
        flags=record.flags
        + [
            {
                "lows_equal": bool(lows_equal),
                "h_le_d0": h_ok,
                "env_ok": bool(outcome.env_ok),
            }
        ],
        acc_h4=acc,
    )
    rec.check_consistency()
    return rec


# --- batched epoch kernels ---------------------------------------------------


@dataclass
class _KernelResult:
    u_final: np.ndarray  # carrier final state
    v_final: np.ndarray  # shadow final state
    logw: np.ndarray
    drift_energy: np.ndarray
    tau: np.ndarray  # first trigger step per run (K if never)
    env_tripped: np.ndarray
    frozen_state: np.ndarray  # target-law state captured at the freeze step
    wd_integral: np.ndarray
    acc_h4_1: np.ndarray  # within-epoch int H^4 ds, y1 side
    acc_h4_2: np.ndarray  # within-epoch int H^4 ds, y2 side


def _case_a_kernel(
    cu, cv, inc, bridge, space, cfg, spec, consts, params, *, carrier_is_target
):
    """Bridged epoch kernel for case a (no truncation of the drift).

    cu is the carrier, cv seeds the shadow.  bridge has shape (C, K+1, nst)
    and interpolates the low-mode difference to zero; it sits on the y1
    side, whose observed low path is P u1 + bridge.  The E_{u,6} envelope
    kappa'(rho, t, R1) is monitored and reported but does not alter the
    dynamics; a trigger marks the epoch as not-coupled.
    """
    C, K, M = inc.shape
    nst = params.n_star
    dt = cfg.dt
    b_low = spec.b[:nst]
    alpha = cfg.alpha

    u = cu.copy()
    v = cv.copy()
    logw = np.zeros(C)
    de = np.zeros(C)
    tau = np.full(C, K, dtype=int)
    env_tripped = np.zeros(C, bool)
    stride = params.monitor_stride
    last_mon = 0
    h6_1 = h6_2 = h4_1 = h4_2 = None
    acc6_1 = np.zeros(C)
    acc6_2 = np.zeros(C)
    acc4_1 = np.zeros(C)
    acc4_2 = np.zeros(C)

    for j in range(K):
        if j % stride == 0 or h6_1 is None:
            f1, f2 = (v, u) if carrier_is_target else (u, v)
            h_1 = hamiltonian_batch(f1, space, consts.c0)
            h_2 = hamiltonian_batch(f2, space, consts.c0)
            elapsed = (j - last_mon) * dt
            if h6_1 is not None:
                acc6_1 += h6_1 * elapsed
                acc6_2 += h6_2 * elapsed
                acc4_1 += h4_1 * elapsed
                acc4_2 += h4_2 * elapsed
            h6_1, h6_2 = h_1**6, h_2**6
            h4_1, h4_2 = h_1**4, h_2**4
            last_mon = j
            bound = params.env6_bound(j * dt)
            bad = (~env_tripped) & (
                (h6_1 + 6.0 * alpha * acc6_1 > bound)
                | (h6_2 + 6.0 * alpha * acc6_2 > bound)
            )
            if bad.any():
                env_tripped |= bad
                tau[bad & (tau == K)] = j

        det_u = deterministic_map(u, space, cfg)
        det_v = deterministic_map(v, space, cfg)
        if carrier_is_target:
            m1 = det_v[:, :nst] + bridge[:, j + 1]
            m2 = det_u[:, :nst]
        else:
            m1 = det_u[:, :nst] + bridge[:, j + 1]
            m2 = det_v[:, :nst]
        d = (m2 - m1) / (b_low * dt)
        d_sq = (d.real**2 + d.imag**2).sum(axis=-1) * dt
        dbeta = inc[:, j, :nst]
        dbeta1 = dbeta + d * dt if carrier_is_target else dbeta
        logw += 2.0 * (d.real * dbeta1.real + d.imag * dbeta1.imag).sum(axis=-1) - d_sq
        de += d_sq

        dwb = spec.b * inc[:, j]
        u = det_u + dwb
        v = det_v + dwb
        if carrier_is_target:
            v[:, :nst] = u[:, :nst] - bridge[:, j + 1]
        else:
            v[:, :nst] = u[:, :nst] + bridge[:, j + 1]

    elapsed = (K - last_mon) * dt
    acc4_1 += h4_1 * elapsed
    acc4_2 += h4_2 * elapsed
    return _KernelResult(
        u_final=u, v_final=v, logw=logw, drift_energy=de, tau=tau,
        env_tripped=env_tripped, frozen_state=np.zeros((0,)),
        wd_integral=np.zeros(C), acc_h4_1=acc4_1, acc_h4_2=acc4_2,
    )


def _case_b_kernel(
    cu, cv, inc, acc0_1, acc0_2, offsets, budgets, wd_budgets,
    space, cfg, spec, consts, params, *, carrier_is_target=False,
):
    """Truncated epoch kernel for case b.

    cu is the carrier, cv seeds the shadow; low modes are identical at
    entry.  The drift freezes once the E_{u,4} envelope, the weighted
    distance integral, or the drift-energy budget would be exceeded, so
    drift_energy <= budget holds by construction; the target-law state is
    captured at the freeze step for plain re-integration.
    """
    C, K, M = inc.shape
    nst = params.n_star
    dt = cfg.dt
    b_low = spec.b[:nst]
    alpha = cfg.alpha

    u = cu.copy()
    v = cv.copy()
    v[:, :nst] = u[:, :nst]
    logw = np.zeros(C)
    de = np.zeros(C)
    wd = np.zeros(C)
    tau = np.full(C, K, int)
    frozen = np.zeros(C, bool)
    env_tripped = np.zeros(C, bool)
    frozen_state = np.zeros((C, M), complex)
    acc4_1 = np.zeros(C)
    acc4_2 = np.zeros(C)
    stride = params.monitor_stride
    last_mon = 0
    h4_1 = h4_2 = None
    l_last = np.ones(C)

    def _freeze(mask, j):
        target_side = u if carrier_is_target else v
        idx = np.flatnonzero(mask)
        frozen_state[idx] = target_side[idx]
        tau[idx] = j
        frozen[idx] = True

    for j in range(K):
        if j % stride == 0 or h4_1 is None:
            f1, f2 = (v, u) if carrier_is_target else (u, v)
            h_1 = hamiltonian_batch(f1, space, consts.c0)
            h_2 = hamiltonian_batch(f2, space, consts.c0)
            elapsed = (j - last_mon) * dt
            if h4_1 is not None:
                acc4_1 += h4_1 * elapsed
                acc4_2 += h4_2 * elapsed
            h4_1, h4_2 = h_1**4, h_2**4
            l_last = 1.0 + h4_1 + h4_2
            last_mon = j
            bound = params.env4_bound(j * dt + offsets)
            e1 = h4_1 + 4.0 * alpha * (acc0_1 + acc4_1)
            e2 = h4_2 + 4.0 * alpha * (acc0_2 + acc4_2)
            bad = (~frozen) & ((e1 > bound) | (e2 > bound))
            if bad.any():
                env_tripped |= bad
                _freeze(bad, j)

        det_u = deterministic_map(u, space, cfg)
        det_v = deterministic_map(v, space, cfg)
        if carrier_is_target:
            m1 = det_v[:, :nst]
            m2 = np.where(frozen[:, None], m1, det_u[:, :nst])
        else:
            m1 = det_u[:, :nst]
            m2 = det_v[:, :nst]
        d = (m2 - m1) / (b_low * dt)
        if frozen.any():
            d[frozen] = 0.0
        d_sq = (d.real**2 + d.imag**2).sum(axis=-1) * dt
        over = (~frozen) & (de + d_sq > budgets)
        if over.any():
            _freeze(over, j)
            d[over] = 0.0
            d_sq[over] = 0.0

        dbeta = inc[:, j, :nst]
        dbeta1 = dbeta + d * dt if carrier_is_target else dbeta
        logw += 2.0 * (d.real * dbeta1.real + d.imag * dbeta1.imag).sum(axis=-1) - d_sq
        de += d_sq

        wd += l_last * sobolev_norm_sq(u - v, space, 1.0) * dt
        over_wd = (~frozen) & (wd > wd_budgets)
        if over_wd.any():
            _freeze(over_wd, j)

        dwb = spec.b * inc[:, j]
        u = det_u + dwb
        v = det_v + dwb
        if carrier_is_target and frozen.any():
            u[frozen, :nst] = m1[frozen] + b_low * dbeta[frozen]
        v[:, :nst] = u[:, :nst]

    elapsed = (K - last_mon) * dt
    acc4_1 += h4_1 * elapsed
    acc4_2 += h4_2 * elapsed
    return _KernelResult(
        u_final=u, v_final=v, logw=logw, drift_energy=de, tau=tau,
        env_tripped=env_tripped, frozen_state=frozen_state, wd_integral=wd,
        acc_h4_1=acc4_1, acc_h4_2=acc4_2,
    )


def _reintegrate_plain(state0, inc_tail, space, cfg, spec):
    c = state0.copy()
    for j in range(inc_tail.shape[0]):
        c = step_coeffs(c, space, cfg, dwb=spec.b * inc_tail[j])
    return c


def _plain_pair_steps(c1, c2, inc, space, cfg, spec, shared, inc2=None):
    """Trivial coupling: plain evolution with shared noise by default."""
    n = c1.shape[0]
    both = np.concatenate([c1, c2], axis=0)
    for j in range(inc.shape[1]):
        dwb1 = spec.b * inc[:, j]
        dwb2 = dwb1 if shared else spec.b * inc2[:, j]
        both = step_coeffs(both, space, cfg, dwb=np.concatenate([dwb1, dwb2]))
    return both[:n], both[n:]


def _steps_of(T: float, dt: float) -> int:
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"window {T} is not an integer multiple of dt={dt}")
    return K


def _draw_inc(streams, K, M, dt):
    return np.stack([s.draw_increments(K, M, dt) for s in streams])


def _accept_reject(kern, run_resid, reconstruct_accept, accept_streams, params):
    """Accept/reject plus capped residual resampling for one sub-batch.

    Returns (u2_final, met, rounds, exhausted).
    """
    C = kern.logw.shape[0]
    log_u = np.log(np.stack([s.uniform() for s in accept_streams]))
    met = log_u <= np.minimum(0.0, kern.logw)
    u2 = np.zeros_like(kern.u_final)
    if met.any():
        u2[met] = reconstruct_accept(np.flatnonzero(met))

    unresolved = np.flatnonzero(~met)
    rounds = np.zeros(C, int)
    exhausted = np.zeros(C, bool)
    rnd = 0
    while unresolved.size and rnd < params.retry_cap:
        res, rec = run_resid(unresolved, rnd)
        # residual acceptance probability (1 - 1/w)^+ evaluated in log space
        p_res = -np.expm1(np.minimum(-res.logw, 0.0))
        log_v = np.log(np.stack([accept_streams[i].uniform() for i in unresolved]))
        take = (p_res > 0.0) & (log_v <= np.log(np.maximum(p_res, 1e-300)))
        if take.any():
            idx = unresolved[take]
            u2[idx] = rec(res, np.flatnonzero(take))
            rounds[idx] = rnd + 1
        unresolved = unresolved[~take]
        rnd += 1
    if unresolved.size:
        # retry cap hit: one unconditioned draw from the target law
        # (statistics-visible approximation, flagged in the epoch log)
        res, rec = run_resid(unresolved, params.retry_cap)
        u2[unresolved] = rec(res, np.arange(unresolved.size))
        exhausted[unresolved] = True
        rounds[unresolved] = params.retry_cap
    return u2, met, rounds, exhausted


def _case_a_batch(c1, c2, params, cfg, space, spec, consts, seed, keys, epoch_k):
    """One case-a epoch for a sub-batch: drift to the small ball, then the
    bridged Girsanov coupling over the last T1 window."""
    C, M = c1.shape
    dt = cfg.dt
    K = _steps_of(params.T, dt)
    K1 = _steps_of(params.T1, dt)
    nst = params.n_star

    theta_steps = K - K1
    if theta_steps > 0:
        s0 = [NoiseStream(seed, *keys[i], epoch_k, 0) for i in range(C)]
        inc0 = _draw_inc(s0, theta_steps, M, dt)
        if params.shared_step1:
            c1, c2 = _plain_pair_steps(c1, c2, inc0, space, cfg, spec, True)
        else:
            s0b = [NoiseStream(seed, *keys[i], epoch_k, 5) for i in range(C)]
            inc0b = _draw_inc(s0b, theta_steps, M, dt)
            c1, c2 = _plain_pair_steps(c1, c2, inc0, space, cfg, spec, False, inc0b)
    h1_t = hamiltonian_batch(c1, space, consts.c0)
    h2_t = hamiltonian_batch(c2, space, consts.c0)
    small_ball = (h1_t + h2_t) <= params.R1

    zeta = c2[:, :nst] - c1[:, :nst]
    ramp = (1.0 - np.arange(K1 + 1) / K1)[None, :, None]
    bridge = ramp * zeta[:, None, :]  # (C, K1+1, nst), vanishes at T1

    streams = [NoiseStream(seed, *keys[i], epoch_k, 1) for i in range(C)]
    inc = _draw_inc(streams, K1, M, dt)
    kern = _case_a_kernel(
        c1, c2.copy(), inc, bridge, space, cfg, spec, consts, params,
        carrier_is_target=False,
    )

    accept_streams = [NoiseStream(seed, *keys[i], epoch_k, 2) for i in range(C)]

    def run_resid(idx, rnd):
        streams_r = [NoiseStream(seed, *keys[i], epoch_k, 3, rnd) for i in idx]
        inc_r = _draw_inc(streams_r, K1, M, dt)
        res = _case_a_kernel(
            c2[idx], c1[idx], inc_r, bridge[idx], space, cfg, spec, consts,
            params, carrier_is_target=True,
        )
        return res, lambda r, loc: r.u_final[loc]

    u2_fin, met, rounds, exhausted = _accept_reject(
        kern, run_resid, lambda idx: kern.v_final[idx], accept_streams, params
    )
    u1_fin = kern.u_final
    if met.any():
        # the bridge vanishes at T1: accepted runs share low modes exactly
        u2_fin[np.ix_(met, np.arange(nst))] = u1_fin[np.ix_(met, np.arange(nst))]

    h1 = hamiltonian_batch(u1_fin, space, consts.c0)
    h2 = hamiltonian_batch(u2_fin, space, consts.c0)
    outs = []
    for i in range(C):
        trunc = bool(kern.env_tripped[i])
        coupled = bool(met[i]) and not trunc and bool(h1[i] + h2[i] <= params.d0)
        outs.append(
            EpochOutcome(
                k=epoch_k, branch="a", met=bool(met[i]), coupled=coupled,
                h1=float(h1[i]), h2=float(h2[i]),
                log_weight=float(kern.logw[i]),
                drift_energy=float(kern.drift_energy[i]),
                truncated=trunc,
                tau_step=int(kern.tau[i]) if trunc else None,
                env_ok=not trunc,
                resid_rounds=int(rounds[i]),
                resid_exhausted=bool(exhausted[i]),
                small_ball=bool(small_ball[i]),
            )
        )
    return u1_fin, u2_fin, outs


def _case_b_batch(
    c1, c2, gaps, acc0_1, acc0_2, params, cfg, space, spec, consts, seed, keys, epoch_k
):
    """One case-b epoch for a sub-batch with per-run streak gaps (k - l)."""
    C, M = c1.shape
    dt = cfg.dt
    K = _steps_of(params.T, dt)
    nst = params.n_star
    if not np.array_equal(c1[:, :nst], c2[:, :nst]):
        raise ValueError("case b requires identical low modes at epoch start")
    alpha = cfg.alpha
    gaps = np.asarray(gaps, float)
    budgets = np.array(
        [params.drift_budget(g, alpha, spec.sigma_0) for g in gaps]
    )
    wd_budgets = np.array([params.wd_budget(g, alpha) for g in gaps])
    offsets = gaps * params.T

    streams = [NoiseStream(seed, *keys[i], epoch_k, 1) for i in range(C)]
    inc = _draw_inc(streams, K, M, dt)
    kern = _case_b_kernel(
        c1, c2, inc, acc0_1, acc0_2, offsets, budgets, wd_budgets,
        space, cfg, spec, consts, params,
    )

    accept_streams = [NoiseStream(seed, *keys[i], epoch_k, 2) for i in range(C)]

    def run_resid(idx, rnd):
        streams_r = [NoiseStream(seed, *keys[i], epoch_k, 3, rnd) for i in idx]
        inc_r = _draw_inc(streams_r, K, M, dt)
        res = _case_b_kernel(
            c2[idx], c1[idx], inc_r, acc0_1[idx], acc0_2[idx], offsets[idx],
            budgets[idx], wd_budgets[idx], space, cfg, spec, consts, params,
            carrier_is_target=True,
        )

        def rec(r, loc):
            out = r.u_final[loc].copy()
            for row, li in enumerate(loc):
                if r.tau[li] < K:
                    out[row] = _reintegrate_plain(
                        r.frozen_state[li], inc_r[li, r.tau[li]:], space, cfg, spec
                    )
            return out

        return res, rec

    def reconstruct_accept(idx):
        out = kern.v_final[idx].copy()
        for row, i in enumerate(idx):
            if kern.tau[i] < K:
                out[row] = _reintegrate_plain(
                    kern.frozen_state[i], inc[i, kern.tau[i]:], space, cfg, spec
                )
        return out

    u2_fin, met, rounds, exhausted = _accept_reject(
        kern, run_resid, reconstruct_accept, accept_streams, params
    )
    # identity over the whole epoch additionally requires no truncation
    met &= kern.tau == K
    u1_fin = kern.u_final

    if np.any(kern.drift_energy > budgets * (1 + 1e-9) + 1e-12):
        raise RuntimeError(
            "internal inconsistency: case-b drift energy exceeded its budget"
        )

    h1 = hamiltonian_batch(u1_fin, space, consts.c0)
    h2 = hamiltonian_batch(u2_fin, space, consts.c0)
    outs = []
    for i in range(C):
        trunc = bool(kern.tau[i] < K)
        outs.append(
            EpochOutcome(
                k=epoch_k, branch="b", met=bool(met[i]),
                coupled=bool(met[i]) and not trunc,
                h1=float(h1[i]), h2=float(h2[i]),
                log_weight=float(kern.logw[i]),
                drift_energy=float(kern.drift_energy[i]),
                budget=float(budgets[i]),
                truncated=trunc,
                tau_step=int(kern.tau[i]) if trunc else None,
                env_ok=not bool(kern.env_tripped[i]),
                wd_integral=float(kern.wd_integral[i]),
                resid_rounds=int(rounds[i]),
                resid_exhausted=bool(exhausted[i]),
                acc_h4=(float(kern.acc_h4_1[i]), float(kern.acc_h4_2[i])),
            )
        )
    return u1_fin, u2_fin, outs


def _trivial_batch(c1, c2, params, cfg, space, spec, consts, seed, keys, epoch_k):
    C, M = c1.shape
    K = _steps_of(params.T, cfg.dt)
    streams = [NoiseStream(seed, *keys[i], epoch_k, 0) for i in range(C)]
    inc = _draw_inc(streams, K, M, cfg.dt)
    u1, u2 = _plain_pair_steps(c1, c2, inc, space, cfg, spec, True)
    h1 = hamiltonian_batch(u1, space, consts.c0)
    h2 = hamiltonian_batch(u2, space, consts.c0)
    outs = [
        EpochOutcome(
            k=epoch_k, branch="trivial", met=False, coupled=False,
            h1=float(h1[i]), h2=float(h2[i]),
        )
        for i in range(C)
    ]
    return u1, u2, outs


# --- public single-pair operations -------------------------------------------


def couple_case_a(
    u1: SpectralField,
    u2: SpectralField,
    params: CouplingParams,
    cfg: SolverConfig,
    spec: NoiseSpec,
    consts: FunctionalConstants,
    seed: int,
    key: tuple = (),
):
    """One case-a epoch from a pair inside the R0 ball.

    Returns (outcome, u1_final, u2_final); the marginal law of each final
    state is the plain solution law.
    """
    space = u1.space
    h = hamiltonian_batch(np.stack([u1.coeffs, u2.coeffs]), space, consts.c0)
    if float(h.sum()) > params.R0 * (1 + 1e-9):
        raise ValueError(f"case a requires H(u1)+H(u2) <= R0, got {float(h.sum()):.4g}")
    f1, f2, outs = _case_a_batch(
        u1.coeffs[None].copy(), u2.coeffs[None].copy(), params, cfg, space,
        spec, consts, seed, [tuple(key) + (0,)], 0,
    )
    return outs[0], SpectralField(f1[0], space), SpectralField(f2[0], space)


def couple_case_b(
    u1: SpectralField,
    u2: SpectralField,
    params: CouplingParams,
    cfg: SolverConfig,
    spec: NoiseSpec,
    consts: FunctionalConstants,
    seed: int,
    key: tuple = (),
    gap: int = 0,
    acc_h4: tuple = (0.0, 0.0),
):
    """One case-b epoch; the pair must share its low modes exactly."""
    space = u1.space
    if not np.array_equal(u1.coeffs[: params.n_star], u2.coeffs[: params.n_star]):
        raise ValueError("case b requires P_{N*} u1 = P_{N*} u2")
    f1, f2, outs = _case_b_batch(
        u1.coeffs[None].copy(), u2.coeffs[None].copy(), np.array([gap], float),
        np.array([acc_h4[0]]), np.array([acc_h4[1]]),
        params, cfg, space, spec, consts, seed, [tuple(key) + (0,)], 0,
    )
    return outs[0], SpectralField(f1[0], space), SpectralField(f2[0], space)


# --- the full coupled process ------------------------------------------------


@dataclass
class CoupledRun:
    u1: SpectralField
    u2: SpectralField
    l0: L0Record
    outcomes: list
    u1_snaps: np.ndarray  # (n_epochs+1, n_modes)
    u2_snaps: np.ndarray
    times: np.ndarray

    @property
    def epoch_log(self) -> list[dict]:
        rows = []
        for o in self.outcomes:
            row = o.log_row()
            row["l0"] = None if self.l0.values[o.k + 1] == INF else self.l0.values[o.k + 1]
            rows.append(row)
        return rows

    @property
    def distances(self) -> np.ndarray:
        """H1 distance ||u1 - u2|| at epoch boundaries."""
        return np.sqrt(
            sobolev_norm_sq(self.u1_snaps - self.u2_snaps, self.u1.space, 1.0)
        )


@dataclass
class CoupledEnsemble:
    u1_snaps: np.ndarray  # (n_runs, n_epochs+1, n_modes)
    u2_snaps: np.ndarray
    times: np.ndarray
    records: list
    outcomes: list  # per run, list over epochs
    space: SpectralSpace

    @property
    def n_runs(self) -> int:
        return self.u1_snaps.shape[0]

    def run(self, i: int) -> CoupledRun:
        return CoupledRun(
            u1=SpectralField(self.u1_snaps[i, -1], self.space),
            u2=SpectralField(self.u2_snaps[i, -1], self.space),
            l0=self.records[i],
            outcomes=self.outcomes[i],
            u1_snaps=self.u1_snaps[i],
            u2_snaps=self.u2_snaps[i],
            times=self.times,
        )

    def coupling_epochs(self) -> np.ndarray:
        return np.array([r.coupled_at for r in self.records])


def run_coupled_ensemble(
    u0_1: SpectralField,
    u0_2: SpectralField,
    n_runs: int,
    n_epochs: int,
    params: CouplingParams,
    cfg: SolverConfig,
    spec: NoiseSpec,
    consts: FunctionalConstants,
    seed: int,
    base_key: tuple = (),
    chunk: int = 64,
) -> CoupledEnsemble:
    """Run independent coupled pairs, vectorized across runs.

    All randomness is keyed per (seed, base_key, run, epoch, channel), so
    the result is independent of chunking and worker count.
    """
    space = u0_1.space
    if u0_2.space != space:
        raise ValueError("initial fields live in different spaces")
    if spec.n_star != params.n_star:
        raise ValueError("params.n_star must match the noise spec")
    M = space.n_modes
    nst = params.n_star

    u1_snaps = np.zeros((n_runs, n_epochs + 1, M), complex)
    u2_snaps = np.zeros((n_runs, n_epochs + 1, M), complex)
    records: list = [None] * n_runs
    outcomes: list = [[] for _ in range(n_runs)]
    h0 = hamiltonian_batch(np.stack([u0_1.coeffs, u0_2.coeffs]), space, consts.c0)

    for start in range(0, n_runs, chunk):
        idx = np.arange(start, min(start + chunk, n_runs))
        C = idx.size
        c1 = np.broadcast_to(u0_1.coeffs, (C, M)).copy()
        c2 = np.broadcast_to(u0_2.coeffs, (C, M)).copy()
        recs = [
            init_l0(u0_1.coeffs, u0_2.coeffs, float(h0[0]), float(h0[1]), nst, params.d0)
            for _ in range(C)
        ]
        u1_snaps[idx, 0] = c1
        u2_snaps[idx, 0] = c2
        keys = [tuple(base_key) + (int(r),) for r in idx]

        for k in range(n_epochs):
            h1 = hamiltonian_batch(c1, space, consts.c0)
            h2 = hamiltonian_batch(c2, space, consts.c0)
            cur_l = np.array([r.current for r in recs])
            is_b = cur_l <= k
            is_a = (~is_b) & ((h1 + h2) <= params.R0)
            is_t = ~(is_a | is_b)

            new_outs: list = [None] * C
            for mask, branch in ((is_b, "b"), (is_a, "a"), (is_t, "t")):
                sub = np.flatnonzero(mask)
                if sub.size == 0:
                    continue
                sub_keys = [keys[i] for i in sub]
                if branch == "b":
                    gaps = np.array([k - recs[i].current for i in sub], float)
                    a1 = np.array([recs[i].acc_h4[0] for i in sub])
                    a2 = np.array([recs[i].acc_h4[1] for i in sub])
                    f1, f2, outs = _case_b_batch(
                        c1[sub], c2[sub], gaps, a1, a2, params, cfg, space,
                        spec, consts, seed, sub_keys, k,
                    )
                elif branch == "a":
                    f1, f2, outs = _case_a_batch(
                        c1[sub], c2[sub], params, cfg, space, spec, consts,
                        seed, sub_keys, k,
                    )
                else:
                    f1, f2, outs = _trivial_batch(
                        c1[sub], c2[sub], params, cfg, space, spec, consts,
                        seed, sub_keys, k,
                    )
                c1[sub] = f1
                c2[sub] = f2
                for j, i in enumerate(sub):
                    new_outs[i] = outs[j]

            for i in range(C):
                out = new_outs[i]
                recs[i] = advance_l0(recs[i], out, (out.h1, out.h2), params.d0)
                outcomes[idx[i]].append(out)
            u1_snaps[idx, k + 1] = c1
            u2_snaps[idx, k + 1] = c2

        for j, i in enumerate(idx):
            records[i] = recs[j]

    return CoupledEnsemble(
        u1_snaps=u1_snaps,
        u2_snaps=u2_snaps,
        times=np.arange(n_epochs + 1) * params.T,
        records=records,
        outcomes=outcomes,
        space=space,
    )


def run_coupled(
    u0_1: SpectralField,
    u0_2: SpectralField,
    n_epochs: int,
    params: CouplingParams,
    cfg: SolverConfig,
    spec: NoiseSpec,
    consts: FunctionalConstants,
    seed: int,
    base_key: tuple = (),
) -> CoupledRun:
    """One coupled run: iterate epochs with the three-way dispatch."""
    ens = run_coupled_ensemble(
        u0_1, u0_2, 1, n_epochs, params, cfg, spec, consts, seed, base_key
    )
    return ens.run(0)
