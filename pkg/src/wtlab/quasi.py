"""Quasisolution expansion, remainder, linearized operator, error-field solvers.

The expansion fields a^(0), a^(1), ... are built on one noise path by the
recursion  a^(m) = i * sum over ordered triples (m1, m2, m3) with
m1 + m2 + m3 = m - 1  of the damped Duhamel integral of the cubic sum,
with a^(0) the exact Ornstein-Uhlenbeck path.  They do not depend on the
coupling eps; the order-M combination is A = sum eps^m a^(m).

All Duhamel integrals share one exponentially weighted trapezoid rule, so
the discrete fields satisfy the combination identity

    A(k+1) = decay A(k) + noise + i eps [trapezoid of Y(A)]
             - i eps^(M+1) [trapezoid of R],

exactly (to roundoff), which the tests exploit.

Powers of the linearized operator are applied by repeated application;
kernels are never materialized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, ResonanceTable
from .phi import exp_trapezoid_weights, phi1
from .sde import (DampingProfile, ForcingProfile, NoisePath, ScalingSpec,
                  draw_zeta, rng_for_sample, y_accumulate)


class NonContractionError(RuntimeError):
    def __init__(self, growth_factor: float, iterations: int):
        self.growth_factor = float(growth_factor)
        self.iterations = int(iterations)
        super().__init__(
            f"fixed-point iteration diverges (growth {growth_factor:.3g} "
            f"per sweep after {iterations} sweeps)")


def tree_count(m: int) -> int:
    """Number of ternary trees with m internal nodes:
    c_0 = 1, c_m = sum over i + j + k = m - 1 of c_i c_j c_k."""
    if m < 0:
        raise ValueError("m must be non-negative")
    c = [1]
    for n in range(1, m + 1):
        total = 0
        for i in range(n):
            for j in range(n - i):
                total += c[i] * c[j] * c[n - 1 - i - j]
        c.append(total)
    return c[m]


def ordered_compositions(m: int):
    """Ordered triples (m1, m2, m3) >= 0 with m1 + m2 + m3 = m - 1."""
    return [(i, j, m - 1 - i - j) for i in range(m) for j in range(m - i)]


def _grouped_compositions(m: int):
    """Compositions grouped by the (1, 2)-slot symmetry of Y:
    list of ((m1, m2, m3), weight) with m1 <= m2."""
    groups = {}
    for (i, j, k) in ordered_compositions(m):
        key = (min(i, j), max(i, j), k)
        groups[key] = groups.get(key, 0) + 1
    return [((a, b, c), w) for (a, b, c), w in sorted(groups.items())]


def xr_norm(values: np.ndarray, spec: LatticeSpec, r: float) -> float:
    """Weighted trajectory norm L^-d sum <s>^r sup_tau |v_s|."""
    sup = np.max(np.abs(values), axis=0)
    w = np.maximum(1.0, spec.physical_norms()) ** r
    return float(spec.L ** (-spec.d) * np.sum(w * sup))


@dataclass
class XrNorm:
    r: float
    value: float

    @classmethod
    def of(cls, values, spec, r) -> "XrNorm":
        return cls(r=r, value=xr_norm(values, spec, r))


@dataclass
class QuasisolutionSet:
    """Expansion fields a^(0..M) on a common grid and one noise path."""

    spec: LatticeSpec
    table: ResonanceTable
    gamma: np.ndarray
    prefactor: float
    h: float
    times: np.ndarray
    orders: list                      # a^(m), each (nt, n) complex
    noise: NoisePath | None = None
    bvec: np.ndarray | None = None
    sample_id: int = 0

    @property
    def M(self) -> int:
        return len(self.orders) - 1

    def combination(self, eps: float, upto: int | None = None) -> np.ndarray:
        upto = self.M if upto is None else upto
        A = np.zeros_like(self.orders[0])
        for m in range(upto + 1):
            A += eps ** m * self.orders[m]
        return A

    def check(self) -> None:
        for m, a in enumerate(self.orders):
            if np.any(a[0] != 0):
                raise ValueError(f"a^({m}) does not start from rest")


def duhamel_cY(v1: np.ndarray, v2: np.ndarray, v3: np.ndarray,
               gamma: np.ndarray, h: float, table: ResonanceTable,
               prefactor: float) -> np.ndarray:
    """Damped Duhamel integral of the cubic sum of three trajectories.

    Incremental recursion with the exponentially weighted trapezoid;
    second-order in h, exact for integrands constant in time.
    """
    if not (v1.shape == v2.shape == v3.shape):
        raise ValueError("trajectories must share one grid")
    nt = v1.shape[0]
    decay = np.exp(-gamma * h)
    w0, w1 = exp_trapezoid_weights(gamma * h)
    out = np.zeros_like(v1)
    y_old = prefactor * y_accumulate(v1[0], v2[0], v3[0], table)
    for k in range(1, nt):
        y_new = prefactor * y_accumulate(v1[k], v2[k], v3[k], table)
        out[k] = decay * out[k - 1] + h * (w0 * y_old + w1 * y_new)
        y_old = y_new
    return out


def build_quasisolutions(spec: LatticeSpec, table: ResonanceTable,
                         damping: DampingProfile, forcing: ForcingProfile,
                         M: int, noise: NoisePath, prefactor: float,
                         gamma=None, bvec=None, sample_id: int = 0) -> QuasisolutionSet:
    """Expansion fields of orders 0..M on the given noise path."""
    if M < 0:
        raise ValueError("M must be >= 0")
    n = spec.n_modes
    gamma = damping.evaluate(spec) if gamma is None else np.asarray(gamma, float)
    bvec = forcing.evaluate(spec) if bvec is None else np.asarray(bvec, float)
    h = noise.h
    n_steps = noise.zeta.shape[0]
    times = np.arange(n_steps + 1) * h

    decay = np.exp(-gamma * h)
    sigma = bvec * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    a0 = np.zeros((n_steps + 1, n), dtype=np.complex128)
    for k in range(n_steps):
        a0[k + 1] = decay * a0[k] + sigma * noise.zeta[k]

    orders = [a0]
    for m in range(1, M + 1):
        total = np.zeros_like(a0)
        for (m1, m2, m3), w in _grouped_compositions(m):
            total += w * duhamel_cY(orders[m1], orders[m2], orders[m3],
                                    gamma, h, table, prefactor)
        orders.append(1j * total)
    return QuasisolutionSet(spec=spec, table=table, gamma=gamma,
                            prefactor=prefactor, h=h, times=times,
                            orders=orders, noise=noise, bvec=bvec,
                            sample_id=sample_id)


def _admissible_triples(M: int):
    """Ordered triples with all m_i <= M and m1 + m2 + m3 >= M, grouped
    by the (1, 2)-slot symmetry: ((m1, m2, m3), weight) with m1 <= m2."""
    groups = {}
    for i in range(M + 1):
        for j in range(M + 1):
            for k in range(M + 1):
                if i + j + k >= M:
                    key = (min(i, j), max(i, j), k)
                    groups[key] = groups.get(key, 0) + 1
    # weight counts ordered occurrences: 2 for i < j, 1 for i == j
    out = []
    for (a, b, c), cnt in sorted(groups.items()):
        w = 2 if a != b else 1
        assert cnt == w
        out.append(((a, b, c), w))
    return out


def remainder_RM(qset: QuasisolutionSet, eps: float):
    """Remainder R and its Duhamel integral cR on the grid.

    R(t) = sum over ordered triples with every m_i <= M and
    m1 + m2 + m3 >= M of eps^(m1+m2+m3-M) Y(a^(m1), a^(m2), a^(m3)).
    """
    M = qset.M
    nt = len(qset.times)
    R = np.zeros_like(qset.orders[0])
    for (m1, m2, m3), w in _admissible_triples(M):
        coeff = w * eps ** (m1 + m2 + m3 - M)
        for k in range(nt):
            R[k] += coeff * qset.prefactor * y_accumulate(
                qset.orders[m1][k], qset.orders[m2][k], qset.orders[m3][k],
                qset.table)
    cR = _duhamel_of_series(R, qset.gamma, qset.h)
    return R, cR


def _duhamel_of_series(series: np.ndarray, gamma: np.ndarray, h: float) -> np.ndarray:
    decay = np.exp(-gamma * h)
    w0, w1 = exp_trapezoid_weights(gamma * h)
    out = np.zeros_like(series)
    for k in range(1, series.shape[0]):
        out[k] = decay * out[k - 1] + h * (w0 * series[k - 1] + w1 * series[k])
    return out


def _y_sym_nodes(y_traj: np.ndarray, A: np.ndarray, qset: QuasisolutionSet) -> np.ndarray:
    """Y^sym(y, A, A) = 2 Y(y, A, A) + Y(A, A, y), per grid node."""
    nt = y_traj.shape[0]
    out = np.empty_like(y_traj)
    for k in range(nt):
        out[k] = qset.prefactor * (
            2.0 * y_accumulate(y_traj[k], A[k], A[k], qset.table)
            + y_accumulate(A[k], A[k], y_traj[k], qset.table))
    return out


def apply_linearized(y_traj: np.ndarray, qset: QuasisolutionSet, eps: float) -> np.ndarray:
    """One application of the linearized operator: i * cY^sym(y, A, A)."""
    if y_traj.shape != qset.orders[0].shape:
        raise ValueError("trajectory does not match the set's grid")
    A = qset.combination(eps)
    nodes = _y_sym_nodes(y_traj, A, qset)
    return 1j * _duhamel_of_series(nodes, qset.gamma, qset.h)


def _w_rhs_nodes(w: np.ndarray, A: np.ndarray, R: np.ndarray,
                 qset: QuasisolutionSet, eps: float) -> np.ndarray:
    """Y^sym(w,A,A) + Y^sym(w,w,A) + Y(w) + eps^M R, per node (no i*eps)."""
    M = qset.M
    nt = w.shape[0]
    out = np.empty_like(w)
    pref = qset.prefactor
    for k in range(nt):
        wk, Ak = w[k], A[k]
        ysym_wAA = 2.0 * y_accumulate(wk, Ak, Ak, qset.table) \
            + y_accumulate(Ak, Ak, wk, qset.table)
        ysym_wwA = y_accumulate(wk, wk, Ak, qset.table) \
            + 2.0 * y_accumulate(wk, Ak, wk, qset.table)
        y_www = y_accumulate(wk, wk, wk, qset.table)
        out[k] = pref * (ysym_wAA + ysym_wwA + y_www)
    return out + eps ** M * R


def solve_w_forward(qset: QuasisolutionSet, eps: float,
                    R: np.ndarray | None = None) -> np.ndarray:
    """Error field by exponential-Euler integration of its evolution
    equation, w(0) = 0."""
    if R is None:
        R, _ = remainder_RM(qset, eps)
    A = qset.combination(eps)
    gamma, h = qset.gamma, qset.h
    decay = np.exp(-gamma * h)
    drift_w = h * phi1(gamma * h)
    nt = len(qset.times)
    w = np.zeros_like(qset.orders[0])
    pref = qset.prefactor
    M = qset.M
    for k in range(nt - 1):
        wk, Ak = w[k], A[k]
        ysym_wAA = 2.0 * y_accumulate(wk, Ak, Ak, qset.table) \
            + y_accumulate(Ak, Ak, wk, qset.table)
        ysym_wwA = y_accumulate(wk, wk, Ak, qset.table) \
            + 2.0 * y_accumulate(wk, Ak, wk, qset.table)
        y_www = y_accumulate(wk, wk, wk, qset.table)
        rhs = 1j * eps * (pref * (ysym_wAA + ysym_wwA + y_www) + eps ** M * R[k])
        new = decay * wk + drift_w * rhs
        if not np.all(np.isfinite(new.view(np.float64))):
            raise FloatingPointError(f"w blow-up at step {k + 1}")
        w[k + 1] = new
    return w


def _neumann_inverse(g: np.ndarray, qset: QuasisolutionSet, eps: float,
                     N_neumann: int, inner_tol: float, inner_max_iter: int,
                     r_norm: float) -> np.ndarray:
    """(Id - eps L)^{-1} g via the truncated Neumann sum composed with an
    inner fixed point for (Id - (eps L)^N)^{-1}."""
    def apply_L_pow(x, n):
        for _ in range(n):
            x = eps * apply_linearized(x, qset, eps)
        return x

    # inner fixed point: y = g + (eps L)^N y
    y = g.copy()
    last = xr_norm(y, qset.spec, r_norm) or 1.0
    growth_strikes = 0
    for it in range(inner_max_iter):
        y_next = g + apply_L_pow(y, N_neumann)
        diff = xr_norm(y_next - y, qset.spec, r_norm)
        y = y_next
        if diff < inner_tol:
            break
        cur = xr_norm(y, qset.spec, r_norm)
        if cur > 1.5 * last and cur > 10 * (xr_norm(g, qset.spec, r_norm) + 1e-300):
            growth_strikes += 1
            if growth_strikes >= 3:
                raise NonContractionError(cur / last, it + 1)
        last = max(cur, 1e-300)
    # Neumann polynomial: sum_{k < N} (eps L)^k y
    total = y.copy()
    term = y
    for _ in range(1, N_neumann):
        term = eps * apply_linearized(term, qset, eps)
        total += term
    return total


def solve_w_fixed_point(qset: QuasisolutionSet, eps: float, N_neumann: int = 2,
                        max_iter: int = 60, tol: float = 1e-10,
                        r_norm: float = 0.0, inner_max_iter: int = 200,
                        R: np.ndarray | None = None):
    """Error field as the fixed point of the contraction built on the
    resolvent identity; returns (w, diagnostics)."""
    if N_neumann < 1:
        raise ValueError("N_neumann must be >= 1")
    if R is None:
        R, cR = remainder_RM(qset, eps)
    else:
        cR = _duhamel_of_series(R, qset.gamma, qset.h)
    A = qset.combination(eps)
    M = qset.M
    pref = qset.prefactor

    def G(w):
        nt = w.shape[0]
        nodes = np.empty_like(w)
        for k in range(nt):
            wk, Ak = w[k], A[k]
            ysym_wwA = y_accumulate(wk, wk, Ak, qset.table) \
                + 2.0 * y_accumulate(wk, Ak, wk, qset.table)
            y_www = y_accumulate(wk, wk, wk, qset.table)
            nodes[k] = pref * (ysym_wwA + y_www)
        cy = _duhamel_of_series(nodes, qset.gamma, qset.h)
        return 1j * eps * (cy + eps ** M * cR)

    w = np.zeros_like(qset.orders[0])
    history = []
    prev_diff = None
    for it in range(max_iter):
        w_next = _neumann_inverse(G(w), qset, eps, N_neumann,
                                  inner_tol=0.1 * tol,
                                  inner_max_iter=inner_max_iter,
                                  r_norm=r_norm)
        diff = xr_norm(w_next - w, qset.spec, r_norm)
        history.append(diff)
        w = w_next
        if diff < tol:
            return w, {"iterations": it + 1, "diffs": history}
        if prev_diff is not None and diff > 1.5 * prev_diff and it >= 3:
            raise NonContractionError(diff / prev_diff, it + 1)
        prev_diff = diff
    raise NonContractionError(
        history[-1] / history[-2] if len(history) > 1 else math.inf, max_iter)


def discrete_disparity_residual(qset: QuasisolutionSet, eps: float,
                                R: np.ndarray | None = None) -> float:
    """Max-norm residual of the one-step combination identity; zero to
    roundoff by construction of the expansion fields."""
    if qset.noise is None:
        raise ValueError("set was built without a noise path")
    if R is None:
        R, _ = remainder_RM(qset, eps)
    A = qset.combination(eps)
    gamma, h = qset.gamma, qset.h
    decay = np.exp(-gamma * h)
    w0, w1 = exp_trapezoid_weights(gamma * h)
    sigma = qset.bvec * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    worst = 0.0
    for k in range(len(qset.times) - 1):
        yA_old = qset.prefactor * y_accumulate(A[k], A[k], A[k], qset.table)
        yA_new = qset.prefactor * y_accumulate(A[k + 1], A[k + 1], A[k + 1],
                                               qset.table)
        pred = decay * A[k] + sigma * qset.noise.zeta[k] \
            + 1j * eps * h * (w0 * yA_old + w1 * yA_new) \
            - 1j * eps ** (qset.M + 1) * h * (w0 * R[k] + w1 * R[k + 1])
        worst = max(worst, float(np.max(np.abs(A[k + 1] - pred))))
    return worst


def disparity_size(qset: QuasisolutionSet, eps: float,
                   R: np.ndarray | None = None) -> float:
    """Sup norm over the grid of the disparity term eps^(M+1) R."""
    if R is None:
        R, _ = remainder_RM(qset, eps)
    return eps ** (qset.M + 1) * float(np.max(np.abs(R)))


# ----------------------------------------------------------------------
# order-resolved ensembles for the statistics modules


@dataclass
class QuasiEnsemble:
    """Per-sample snapshots of a^(0..M) at chosen modes and times.

    values[i, j, m, t] = a^(m) of sample i at recorded mode j and
    recorded time t.  When ``top_order_restricted`` is set, the order-M
    field was only evolved at the recorded target modes (its dynamics
    depends on lower orders everywhere, which were evolved in full).
    """

    spec: LatticeSpec
    M: int
    record_times: np.ndarray
    mode_indices: np.ndarray
    values: np.ndarray            # (N, n_rec, M+1, nt) complex
    seed: object
    stage: int
    top_order_restricted: bool

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def column(self, order: int, z, time: float, conjugate: bool) -> np.ndarray:
        j = int(np.flatnonzero(self.mode_indices == self.spec.index_of(z))[0])
        t = int(np.flatnonzero(np.isclose(self.record_times, time))[0])
        col = self.values[:, j, order, t]
        return np.conj(col) if conjugate else col


def sample_quasi_ensemble(spec: LatticeSpec, table: ResonanceTable,
                          damping: DampingProfile, forcing: ForcingProfile,
                          M: int, h: float, record_times, record_modes,
                          n_samples: int, seed, prefactor: float,
                          stage: int = 1, restrict_top_order: bool = True,
                          batch_size: int | None = None) -> QuasiEnsemble:
    """Monte-Carlo ensemble of expansion-field snapshots.

    The marching recursion carries all orders on the full lattice except,
    optionally, the top order, which is evolved only at the recorded
    modes (a pure observable: nothing feeds back from order M).
    """
    n = spec.n_modes
    gamma = damping.evaluate(spec)
    bvec = forcing.evaluate(spec)
    record_times = np.asarray(record_times, dtype=float)
    rec_steps = np.round(record_times / h).astype(int)
    if not np.allclose(rec_steps * h, record_times, rtol=1e-9, atol=1e-12):
        raise ValueError("record times must lie on the step grid")
    n_steps = int(rec_steps.max())
    rec_of_step = {int(k): i for i, k in enumerate(rec_steps)}
    mode_indices = np.array([spec.index_of(z) for z in record_modes])

    tables = [table] * (M + 1)
    if restrict_top_order and M >= 1:
        tables[M] = table.restricted_to(mode_indices)

    decay = np.exp(-gamma * h)
    sigma = bvec * np.sqrt(2.0 * h * phi1(2.0 * gamma * h))
    w0, w1 = exp_trapezoid_weights(gamma * h)
    comps = {m: _grouped_compositions(m) for m in range(1, M + 1)}

    if batch_size is None:
        batch_size = max(1, 2_000_000 // (n * (M + 1)))
    nt = len(record_times)
    values = np.empty((n_samples, len(mode_indices), M + 1, nt),
                      dtype=np.complex128)

    done = 0
    while done < n_samples:
        nb = min(batch_size, n_samples - done)
        gens = [rng_for_sample(seed, done + i, stage) for i in range(nb)]
        states = [np.zeros((nb, n), dtype=np.complex128) for _ in range(M + 1)]
        y_old = {}
        for m in range(1, M + 1):
            for (c, w) in comps[m]:
                y_old[(m, c)] = np.zeros((nb, n), dtype=np.complex128)
        zeta = np.empty((nb, n), dtype=np.complex128)
        if 0 in rec_of_step:
            t = rec_of_step[0]
            for m in range(M + 1):
                values[done:done + nb, :, m, t] = 0.0
        for k in range(n_steps):
            for i, g in enumerate(gens):
                zeta[i] = draw_zeta(g, n)
            new0 = decay * states[0] + sigma * zeta
            new_states = [new0]
            for m in range(1, M + 1):
                acc = np.zeros((nb, n), dtype=np.complex128)
                for (c, w) in comps[m]:
                    m1, m2, m3 = c
                    y_new = y_accumulate(new_states[m1], new_states[m2],
                                         new_states[m3], tables[m])
                    acc += w * (w0 * y_old[(m, c)] + w1 * y_new)
                    y_old[(m, c)] = y_new
                new_states.append(decay * states[m] + 1j * prefactor * h * acc)
            states = new_states
            t = rec_of_step.get(k + 1)
            if t is not None:
                for m in range(M + 1):
                    values[done:done + nb, :, m, t] = states[m][:, mode_indices]
        done += nb

    return QuasiEnsemble(spec=spec, M=M, record_times=record_times,
                         mode_indices=mode_indices, values=values, seed=seed,
                         stage=stage,
                         top_order_restricted=bool(restrict_top_order and M >= 1))
