"""Ensemble simulation of the resonant-averaged stochastic mode dynamics.

The field a_s(tau) lives on a LatticeSpec and obeys

    da_s + gamma_s a_s dtau = i eps Y_s(a) dtau + b(s) dbeta_s,   a_s(0) = 0,

where Y is the cubic resonant sum over the ResonanceTable and beta_s are
independent standard complex Wiener processes (E|dbeta|^2 = 2 dtau).
The integrator is exponential Euler with a distribution-exact
Ornstein-Uhlenbeck noise update, so the eps = 0 spectrum is unbiased at
any step size.

Noise normalization, pinned once for the whole package: the per-step
draw zeta is a standard complex Gaussian with E|zeta|^2 = 1 and
E zeta^2 = 0, scaled by b(s) sqrt((1 - exp(-2 gamma h)) / gamma).  The
resulting one- and two-time covariances of the linear dynamics are
(b^2/gamma)(exp(-gamma|t1-t2|) - exp(-gamma(t1+t2))), which the tests
verify against closed form.

Sample streams: the trajectory of sample ``i`` in an ensemble with
master seed ``seed`` is driven by
``numpy.random.default_rng(SeedSequence(seed, spawn_key=(stage, i)))``.
Results are independent of batch layout; floating-point reduction order
is fixed by sample order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, ResonanceTable, build_resonance_table
from .phi import phi1

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


class IntegrationBlowupError(RuntimeError):
    def __init__(self, time: float, mode_index: int):
        self.time = float(time)
        self.mode_index = int(mode_index)
        super().__init__(f"non-finite field value at tau={time} in mode #{mode_index}")


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class DampingProfile:
    """gamma_s = (1 + |s|^2)^r_star, or a user monotone gamma0(|s|^2)."""

    r_star: float = 2.5
    gamma0: object = None  # optional callable y -> gamma

    def evaluate(self, spec: LatticeSpec) -> np.ndarray:
        y = spec.norms2 / spec.L ** 2
        if self.gamma0 is not None:
            g = np.asarray(self.gamma0(y), dtype=float)
        else:
            g = (1.0 + y) ** self.r_star
        if np.any(g < 1.0 - 1e-12):
            raise ValueError("damping must satisfy gamma >= 1")
        order = np.argsort(y)
        if np.any(np.diff(g[order]) < -1e-12):
            raise ValueError("damping must be non-decreasing in |s|")
        return g


@dataclass(frozen=True)
class ForcingProfile:
    """b(s) = amplitude * exp(-|s|^2 / scale^2), positive and Schwartz."""

    scale: float = 1.0
    amplitude: float = 1.0

    def evaluate(self, spec: LatticeSpec) -> np.ndarray:
        y = spec.norms2 / spec.L ** 2
        b = self.amplitude * np.exp(-y / self.scale ** 2)
        if np.any(b <= 0):
            raise ValueError("forcing must be strictly positive")
        return b

    def evaluate_radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.amplitude * np.exp(-(r / self.scale) ** 2)


@dataclass(frozen=True)
class ScalingSpec:
    """Coupling strength and the cubic-sum prefactor.

    Two modes: subcritical (``alpha`` given, eps = L^(-alpha) with the
    dimension-dependent admissible range) or fixed coupling (``eps_fixed``
    given directly, the regime in which the quasisolution theory treats
    eps as an independent small parameter).
    """

    d: int
    L: int
    alpha: float | None = None
    eps_fixed: float | None = None
    d2_log_correction: bool = True

    def __post_init__(self):
        if (self.alpha is None) == (self.eps_fixed is None):
            raise ValueError("give exactly one of alpha or eps_fixed")
        if self.alpha is not None:
            hi = 0.5 if self.d >= 3 else 1.0 / 6.0
            if not (0.0 < self.alpha <= hi + 1e-12):
                raise ValueError(
                    f"alpha={self.alpha} outside (0, {hi}] for d={self.d}")
        else:
            if not (0.0 <= self.eps_fixed < 1.0):
                raise ValueError(f"eps={self.eps_fixed} outside [0, 1)")
        if self.d == 2 and self.d2_log_correction and self.L < 2:
            raise ValueError("d=2 log correction needs L >= 2")

    @property
    def eps(self) -> float:
        if self.eps_fixed is not None:
            return float(self.eps_fixed)
        return float(self.L) ** (-self.alpha)

    @property
    def prefactor(self) -> float:
        pref = float(self.L) ** (-(self.d - 1))
        if self.d == 2 and self.d2_log_correction:
            pref /= math.sqrt(math.log(self.L))
        return pref

    @classmethod
    def for_spec(cls, spec: LatticeSpec, alpha: float | None = None,
                 eps: float | None = None,
                 d2_log_correction: bool | None = None) -> "ScalingSpec":
        if d2_log_correction is None:
            d2_log_correction = spec.d == 2
        return cls(spec.d, spec.L, alpha=alpha, eps_fixed=eps,
                   d2_log_correction=d2_log_correction)


@dataclass
class FieldTrajectory:
    times: np.ndarray           # (nt,)
    values: np.ndarray          # (nt, n) complex
    seed: object = None
    sample_id: int = 0

    def check(self, zero_start: bool = True) -> None:
        dt = np.diff(self.times)
        if len(dt) and not np.allclose(dt, dt[0], rtol=1e-12, atol=1e-14):
            raise ValueError("time grid is not uniform")
        if not np.all(np.isfinite(self.values.view(float))):
            raise ValueError("non-finite values in trajectory")
        if zero_start and np.any(self.values[0] != 0):
            raise ValueError("trajectory does not start from rest")


@dataclass
class SpectrumEstimate:
    times: np.ndarray           # (nt,)
    mean: np.ndarray            # (nt, n)
    stderr: np.ndarray          # (nt, n)
    n_samples: int

    def check(self) -> None:
        if np.any(self.mean < 0):
            raise ValueError("negative spectrum mean")
        if np.any(self.stderr < 0):
            raise ValueError("negative standard error")


@dataclass
class NoisePath:
    """Pre-drawn standard complex increments, one row per step."""

    h: float
    zeta: np.ndarray            # (n_steps, n) complex, E|zeta|^2 = 1
    seed: object = None


def rng_for_sample(seed, sample_id: int, stage: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(stage, sample_id)))


def draw_zeta(rng: np.random.Generator, n: int) -> np.ndarray:
    raw = rng.standard_normal(2 * n)
    return (raw[:n] + 1j * raw[n:]) / np.sqrt(2.0)


def draw_noise_path(spec: LatticeSpec, h: float, n_steps: int,
                    rng: np.random.Generator, seed=None) -> NoisePath:
    zeta = np.empty((n_steps, spec.n_modes), dtype=np.complex128)
    for k in range(n_steps):
        zeta[k] = draw_zeta(rng, spec.n_modes)
    return NoisePath(h=float(h), zeta=zeta, seed=seed)


def ou_exact_step(state: np.ndarray, h: float, gamma: np.ndarray,
                  b: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """One distribution-exact step of the linear (eps = 0) dynamics."""
    if h < 0:
        raise ValueError("negative step")
    decay = np.exp(-gamma * h)
    sigma = b * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    return state * decay + sigma * zeta


# ----------------------------------------------------------------------
# cubic resonant sum on batches

if numba is not None:
    @numba.njit(cache=True)
    def _y_batch_jit(v1, v2, v3, to, p1o, p2o, p3o, wo, td, p1d, p2d, p3d, wd, out):
        nb = v1.shape[0]
        for b in range(nb):
            a1, a2, a3, ob = v1[b], v2[b], v3[b], out[b]
            for e in range(len(wo)):
                prod = (a1[p1o[e]] * a2[p2o[e]] + a1[p2o[e]] * a2[p1o[e]]) \
                    * np.conj(a3[p3o[e]])
                ob[to[e]] += wo[e] * prod
            for e in range(len(wd)):
                prod = a1[p1d[e]] * a2[p2d[e]] * np.conj(a3[p3d[e]])
                ob[td[e]] += wd[e] * prod


def _y_batch_numpy(v1, v2, v3, comp, out):
    (to, p1o, p2o, p3o, wo), (td, p1d, p2d, p3d, wd) = comp
    n = out.shape[1]
    for b in range(v1.shape[0]):
        c = wo * ((v1[b, p1o] * v2[b, p2o] + v1[b, p2o] * v2[b, p1o])
                  * np.conj(v3[b, p3o]))
        out[b] += np.bincount(to, weights=c.real, minlength=n) \
            + 1j * np.bincount(to, weights=c.imag, minlength=n)
        cd = wd * (v1[b, p1d] * v2[b, p2d] * np.conj(v3[b, p3d]))
        out[b] += np.bincount(td, weights=cd.real, minlength=n) \
            + 1j * np.bincount(td, weights=cd.imag, minlength=n)


def y_accumulate(v1, v2, v3, table: ResonanceTable, out=None,
                 backend: str = "auto"):
    """Raw resonant sum (no prefactor): out[b, s] = sum(sign * v1 v2 conj(v3)).

    Exactly symmetric in (v1, v2): the two orderings of every
    off-diagonal pair are added as one symmetrized product.
    """
    squeeze = v1.ndim == 1
    v1 = np.atleast_2d(np.ascontiguousarray(v1))
    v2 = np.atleast_2d(np.ascontiguousarray(v2))
    v3 = np.atleast_2d(np.ascontiguousarray(v3))
    n = table.spec.n_modes
    if out is None:
        out = np.zeros((v1.shape[0], n), dtype=np.complex128)
    comp = table.compressed()
    if backend == "auto":
        backend = "numba" if numba is not None else "numpy"
    if backend == "numba":
        (to, p1o, p2o, p3o, wo), (td, p1d, p2d, p3d, wd) = comp
        _y_batch_jit(v1, v2, v3, to, p1o, p2o, p3o, wo, td, p1d, p2d, p3d, wd, out)
    elif backend == "numpy":
        _y_batch_numpy(v1, v2, v3, comp, out)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return out[0] if squeeze else out


def nonlinearity_Y(v1, v2, v3, table: ResonanceTable, scaling: ScalingSpec,
                   backend: str = "auto"):
    """Y_s(v1, v2, v3) with the L-dependent prefactor applied."""
    return scaling.prefactor * y_accumulate(v1, v2, v3, table, backend=backend)


# ----------------------------------------------------------------------
# integrators


def _check_stiffness(h: float, gamma: np.ndarray, guard: float | None):
    if guard is None:
        return
    limit = guard / float(np.max(gamma)) if np.max(gamma) > 0 else np.inf
    if h > limit * (1 + 1e-12):
        raise ValueError(
            f"step h={h} exceeds stiffness guard {limit:.3e} "
            f"(= {guard}/max gamma); pass stiffness_guard=None to override")


def integrate_effective(spec: LatticeSpec, damping: DampingProfile,
                        forcing: ForcingProfile, scaling: ScalingSpec,
                        h: float, T: float, rng=None, noise: NoisePath = None,
                        table: ResonanceTable = None, initial=None,
                        gamma=None, bvec=None, stiffness_guard: float | None = 0.1,
                        sample_id: int = 0, seed=None) -> FieldTrajectory:
    """Exponential-Euler path of the effective dynamics on one noise draw."""
    n = spec.n_modes
    gamma = damping.evaluate(spec) if gamma is None else np.asarray(gamma, float)
    bvec = forcing.evaluate(spec) if bvec is None else np.asarray(bvec, float)
    _check_stiffness(h, gamma, stiffness_guard)
    n_steps = int(round(T / h))
    if not math.isclose(n_steps * h, T, rel_tol=1e-9):
        raise ValueError(f"T={T} is not a multiple of h={h}")
    eps = scaling.eps
    if eps != 0.0 and table is None:
        table = build_resonance_table(spec)
    if noise is not None and noise.zeta.shape != (n_steps, n):
        raise ValueError("noise path does not match grid")

    state = np.zeros(n, dtype=np.complex128) if initial is None \
        else np.array(initial, dtype=np.complex128)
    decay = np.exp(-gamma * h)
    sigma = bvec * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    drift_w = 1j * eps * scaling.prefactor * h * phi1(gamma * h)

    times = np.arange(n_steps + 1) * h
    values = np.empty((n_steps + 1, n), dtype=np.complex128)
    values[0] = state
    for k in range(n_steps):
        if eps != 0.0:
            y = y_accumulate(state, state, state, table)
            new = decay * state + drift_w * y
        else:
            new = decay * state
        zeta = noise.zeta[k] if noise is not None else draw_zeta(rng, n)
        new = new + sigma * zeta
        if not np.all(np.isfinite(new.view(np.float64))):
            bad = int(np.flatnonzero(~np.isfinite(new.view(np.float64)))[0] // 2)
            raise IntegrationBlowupError((k + 1) * h, bad)
        state = new
        values[k + 1] = state
    return FieldTrajectory(times=times, values=values, seed=seed, sample_id=sample_id)


def default_batch_size(n_modes: int) -> int:
    return max(1, 2_000_000 // max(n_modes, 1))


def simulate_spectrum_ensemble(spec: LatticeSpec, damping: DampingProfile,
                               forcing: ForcingProfile, scaling: ScalingSpec,
                               h: float, T: float, n_samples: int, seed,
                               record_times, table: ResonanceTable = None,
                               batch_size: int = None,
                               stiffness_guard: float | None = 0.1,
                               stage: int = 0) -> SpectrumEstimate:
    """Monte-Carlo estimate of n_s(tau) = E|a_s(tau)|^2 over fresh samples.

    Streaming reduction: only per-mode sums of |a|^2 and |a|^4 are kept,
    so the ensemble never materializes.
    """
    if n_samples < 2:
        raise EnsembleError("need at least 2 samples")
    n = spec.n_modes
    gamma = damping.evaluate(spec)
    bvec = forcing.evaluate(spec)
    _check_stiffness(h, gamma, stiffness_guard)
    n_steps = int(round(T / h))
    if not math.isclose(n_steps * h, T, rel_tol=1e-9):
        raise ValueError(f"T={T} is not a multiple of h={h}")
    record_times = np.asarray(record_times, dtype=float)
    rec_idx = np.round(record_times / h).astype(int)
    if not np.allclose(rec_idx * h, record_times, rtol=1e-9, atol=1e-12):
        raise ValueError("record times must lie on the step grid")
    rec_of_step = {int(k): i for i, k in enumerate(rec_idx)}
    eps = scaling.eps
    if eps != 0.0 and table is None:
        table = build_resonance_table(spec)

    decay = np.exp(-gamma * h)
    sigma = bvec * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    drift_w = 1j * eps * scaling.prefactor * h * phi1(gamma * h)
    if batch_size is None:
        batch_size = default_batch_size(n)

    nt = len(record_times)
    s1 = np.zeros((nt, n))
    s2 = np.zeros((nt, n))
    done = 0
    while done < n_samples:
        nb = min(batch_size, n_samples - done)
        gens = [rng_for_sample(seed, done + i, stage) for i in range(nb)]
        state = np.zeros((nb, n), dtype=np.complex128)
        if 0 in rec_of_step:
            pass  # |a(0)|^2 = 0 contributes nothing to the sums
        zeta = np.empty((nb, n), dtype=np.complex128)
        for k in range(n_steps):
            if eps != 0.0:
                y = y_accumulate(state, state, state, table)
                state = decay * state + drift_w * y
            else:
                state = decay * state
            for i, g in enumerate(gens):
                zeta[i] = draw_zeta(g, n)
            state += sigma * zeta
            if not np.all(np.isfinite(state.view(np.float64))):
                flat = np.flatnonzero(~np.isfinite(state.view(np.float64)))[0]
                raise IntegrationBlowupError((k + 1) * h, int(flat // 2) % n)
            r = rec_of_step.get(k + 1)
            if r is not None:
                p = np.abs(state) ** 2
                s1[r] += p.sum(axis=0)
                s2[r] += (p * p).sum(axis=0)
        done += nb

    mean = s1 / n_samples
    var = np.maximum(s2 / n_samples - mean ** 2, 0.0) * n_samples / (n_samples - 1)
    stderr = np.sqrt(var / n_samples)
    return SpectrumEstimate(times=record_times, mean=mean, stderr=stderr,
                            n_samples=n_samples)


def estimate_spectrum(trajectories, times) -> SpectrumEstimate:
    """Unbiased per-mode mean and standard error of |a_s|^2 at the
    requested times, from a list of trajectories on a common grid."""
    trajs = list(trajectories)
    if len(trajs) < 2:
        raise EnsembleError("need at least 2 samples")
    times = np.asarray(times, dtype=float)
    t0 = trajs[0].times
    idx = np.searchsorted(t0, times)
    idx = np.clip(idx, 0, len(t0) - 1)
    if not np.allclose(t0[idx], times, rtol=1e-9, atol=1e-12):
        raise ValueError("requested times are not on the trajectory grid")
    power = np.stack([np.abs(tr.values[idx]) ** 2 for tr in trajs])
    mean = power.mean(axis=0)
    stderr = power.std(axis=0, ddof=1) / np.sqrt(len(trajs))
    return SpectrumEstimate(times=times, mean=mean, stderr=stderr,
                            n_samples=len(trajs))


def ou_covariance(tau1: float, tau2: float, gamma, b):
    """Closed-form E a(tau1) conj(a(tau2)) of the linear dynamics."""
    gamma = np.asarray(gamma, dtype=float)
    b = np.asarray(b, dtype=float)
    return b * b / gamma * (np.exp(-gamma * abs(tau1 - tau2))
                            - np.exp(-gamma * (tau1 + tau2)))
