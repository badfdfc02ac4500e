"""Truncated Fourier lattice, exact resonance enumeration, quadric sums.

A mode is stored as its integer vector z in Z^d; the physical wavevector
is s = z / L.  Every resonance decision (s1 + s2 = s3 + s and
|s1|^2 + |s2|^2 = |s3|^2 + |s|^2) is made in integer arithmetic on the
z vectors.  Floating point never decides membership of a quadruple.

The quadric-sum engine at the bottom of the module evaluates truncated
sums of a decaying weight over the integer points of u . v = 0 in
Z^{2d}_L, the only quadratic form the rest of the package needs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

TABLE_CACHE_VERSION = 1


class LatticeError(ValueError):
    pass


class ResonanceMemoryError(MemoryError):
    """Raised when a resonance table would exceed its entry budget."""

    def __init__(self, projected_entries: int, budget: int):
        self.projected_entries = int(projected_entries)
        self.budget = int(budget)
        super().__init__(
            f"projected resonance table has {projected_entries} entries, "
            f"budget is {budget}"
        )


def _pack(z: np.ndarray, half_span: int) -> np.ndarray:
    """Pack integer vectors with coordinates in [-half_span, half_span]
    into scalar int64 keys (row-major)."""
    z = np.asarray(z, dtype=np.int64)
    span = 2 * half_span + 1
    key = z[..., 0] + half_span
    for i in range(1, z.shape[-1]):
        key = key * span + (z[..., i] + half_span)
    return key


def _integer_ball(d: int, radius: float) -> np.ndarray:
    r = int(np.floor(radius + 1e-9))
    axes = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.meshgrid(*([axes] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=1)
    keep = (pts * pts).sum(axis=1) <= radius * radius + 1e-9
    return pts[keep]


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    """The finite mode set approximating Z^d_L with |s| <= K."""

    d: int
    L: int
    K: float
    modes: np.ndarray = field(repr=False)      # (n, d) int64
    norms2: np.ndarray = field(repr=False)     # (n,) int64, |z|^2
    _keys: np.ndarray = field(repr=False)      # packed keys, ascending
    _key_order: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, d: int, L: int, K: float) -> "LatticeSpec":
        if d not in (2, 3):
            raise LatticeError(f"dimension {d} not supported (2 or 3)")
        if not (isinstance(L, (int, np.integer)) and L >= 1):
            raise LatticeError(f"period scale L must be a positive integer, got {L}")
        if not K > 0:
            raise LatticeError(f"truncation radius K must be positive, got {K}")
        radius = K * L
        pts = _integer_ball(d, radius)
        if len(pts) == 0:
            raise LatticeError(f"no modes with |z| <= K*L = {radius}")
        n2 = (pts * pts).sum(axis=1)
        order = np.lexsort(tuple(pts[:, i] for i in reversed(range(d))) + (n2,))
        pts = np.ascontiguousarray(pts[order])
        n2 = n2[order]
        half = int(np.floor(radius + 1e-9))
        keys = _pack(pts, half)
        key_order = np.argsort(keys)
        spec = cls(d=d, L=int(L), K=float(K), modes=pts, norms2=n2,
                   _keys=keys[key_order], _key_order=key_order)
        return spec

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def radius_int(self) -> int:
        return int(np.floor(self.K * self.L + 1e-9))

    def physical(self) -> np.ndarray:
        """Physical wavevectors s = z / L, shape (n, d) float."""
        return self.modes / self.L

    def physical_norms(self) -> np.ndarray:
        return np.sqrt(self.norms2) / self.L

    def index_of(self, z) -> int:
        idx = self.indices_of(np.asarray(z, dtype=np.int64)[None, :])[0]
        if idx < 0:
            raise LatticeError(f"{tuple(np.asarray(z))} is not a mode of this lattice")
        return int(idx)

    def indices_of(self, z: np.ndarray) -> np.ndarray:
        """Vectorized lookup; -1 marks vectors outside the mode set."""
        z = np.asarray(z, dtype=np.int64)
        half = self.radius_int
        out = np.full(z.shape[:-1], -1, dtype=np.int64)
        inside = np.all(np.abs(z) <= half, axis=-1)
        if not inside.any():
            return out
        keys = _pack(z[inside], half)
        pos = np.searchsorted(self._keys, keys)
        pos = np.clip(pos, 0, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        found = np.where(hit, self._key_order[pos], -1)
        out[inside] = found
        return out

    def contains(self, z) -> bool:
        z = np.asarray(z, dtype=np.int64)
        return bool(self.indices_of(z[None, :])[0] >= 0)

    def check_invariants(self) -> None:
        """Symmetric truncation: closure under negation and coordinate
        permutation, radius bound, index bijection."""
        if not np.all(self.norms2 <= (self.K * self.L) ** 2 + 1e-9):
            raise LatticeError("mode outside truncation radius")
        neg = self.indices_of(-self.modes)
        if np.any(neg < 0):
            raise LatticeError("mode set not closed under negation")
        perm = self.indices_of(self.modes[:, ::-1])
        if np.any(perm < 0):
            raise LatticeError("mode set not closed under coordinate permutation")
        rt = self.indices_of(self.modes)
        if not np.array_equal(rt, np.arange(self.n_modes)):
            raise LatticeError("index lookup is not the identity on stored modes")


def omega(spec: LatticeSpec, z1, z2, z3, z4) -> Fraction:
    """|s1|^2 + |s2|^2 - |s3|^2 - |s|^2 as an exact rational (over L^2)."""
    vecs = [np.asarray(z, dtype=np.int64) for z in (z1, z2, z3, z4)]
    for z in vecs:
        if z.shape != (spec.d,):
            raise LatticeError(f"mode {tuple(z)} has wrong dimension for d={spec.d}")
        if not spec.contains(z):
            raise LatticeError(f"{tuple(z)} is not a mode of this lattice")
    num = int((vecs[0] * vecs[0]).sum() + (vecs[1] * vecs[1]).sum()
              - (vecs[2] * vecs[2]).sum() - (vecs[3] * vecs[3]).sum())
    return Fraction(num, spec.L * spec.L)


def delta_prime(spec: LatticeSpec, z1, z2, z3, z4) -> int:
    """+1 for an admissible interaction, -1 on the full diagonal, else 0."""
    vecs = [np.asarray(z, dtype=np.int64) for z in (z1, z2, z3, z4)]
    for z in vecs:
        if not spec.contains(z):
            raise LatticeError(f"{tuple(z)} is not a mode of this lattice")
    a, b, c, s = vecs
    if np.array_equal(a, b) and np.array_equal(b, c) and np.array_equal(c, s):
        return -1
    if np.array_equal(a + b, c + s) and not np.array_equal(a, c) \
            and not np.array_equal(b, c):
        return 1
    return 0


@dataclass(eq=False)
class ResonanceTable:
    """All quadruples (s1, s2, s3, s) with Delta != 0, indexed into the spec.

    Entries are sorted by target and the (i1, i2) ordering is stored in
    full, so the table is symmetric under swapping the first two slots.
    ``compressed()`` returns the slot-symmetric half used by the kernels.
    """

    spec: LatticeSpec
    target: np.ndarray   # (E,) int32
    i1: np.ndarray
    i2: np.ndarray
    i3: np.ndarray
    sign: np.ndarray     # (E,) int8
    _comp: tuple | None = field(default=None, repr=False)

    @property
    def n_entries(self) -> int:
        return len(self.target)

    def entries_for(self, target_index: int):
        m = self.target == target_index
        return self.i1[m], self.i2[m], self.i3[m], self.sign[m]

    def compressed(self):
        """(off-diagonal p1 < p2, diagonal p1 == p2) halves of the table.

        Returns two tuples (target, p1, p2, p3, w); the off-diagonal
        product must be symmetrized (v[p1]v[p2] + v[p2]v[p1]) by the
        caller, which keeps Y exactly symmetric in its first two slots.
        """
        if self._comp is None:
            off = self.i1 < self.i2
            diag = self.i1 == self.i2
            w_off = self.sign[off].astype(np.float64)
            w_diag = self.sign[diag].astype(np.float64)
            self._comp = (
                (self.target[off], self.i1[off], self.i2[off], self.i3[off], w_off),
                (self.target[diag], self.i1[diag], self.i2[diag], self.i3[diag], w_diag),
            )
        return self._comp

    def restricted_to(self, target_indices) -> "ResonanceTable":
        """Sub-table containing only entries whose target is in the set."""
        mask = np.isin(self.target, np.asarray(target_indices, dtype=self.target.dtype))
        return ResonanceTable(self.spec, self.target[mask], self.i1[mask],
                              self.i2[mask], self.i3[mask], self.sign[mask])

    def check_invariants(self) -> None:
        spec, z, e = self.spec, self.spec.modes, self.spec.norms2
        s_sum = z[self.i1] + z[self.i2] - z[self.i3] - z[self.target]
        if np.any(s_sum != 0):
            raise LatticeError("momentum violation in table")
        om = e[self.i1] + e[self.i2] - e[self.i3] - e[self.target]
        if np.any(om != 0):
            raise LatticeError("non-resonant entry in table")
        neg = self.sign < 0
        if not (np.all(self.i1[neg] == self.target[neg])
                and np.all(self.i2[neg] == self.target[neg])
                and np.all(self.i3[neg] == self.target[neg])):
            raise LatticeError("a sign = -1 entry is off the diagonal")
        counts = np.bincount(self.target[neg], minlength=spec.n_modes)
        if not np.all(counts == 1):
            raise LatticeError("each target must carry exactly one -1 entry")


def _sorted_table(spec, target, i1, i2, i3, sign) -> ResonanceTable:
    order = np.lexsort((i3, i2, i1, target))
    return ResonanceTable(
        spec,
        np.ascontiguousarray(target[order], dtype=np.int32),
        np.ascontiguousarray(i1[order], dtype=np.int32),
        np.ascontiguousarray(i2[order], dtype=np.int32),
        np.ascontiguousarray(i3[order], dtype=np.int32),
        np.ascontiguousarray(sign[order], dtype=np.int8),
    )


def projected_entry_count(spec: LatticeSpec) -> int:
    """Exact entry count of the resonance table, without building it."""
    keys = _pair_keys(spec)
    keys.sort()
    _, counts = np.unique(keys, return_counts=True)
    c = counts.astype(np.int64)
    # group products minus the dropped delta'-exclusions, plus diagonals
    total = int((c * c).sum())
    excl = _exclusion_count(spec)
    return total - excl + spec.n_modes


def _pair_keys(spec: LatticeSpec) -> np.ndarray:
    z, e = spec.modes, spec.norms2
    n = spec.n_modes
    half = 2 * spec.radius_int
    estride = 2 * spec.radius_int ** 2 + 1
    sums = z[:, None, :] + z[None, :, :]
    keys = _pack(sums.reshape(n * n, spec.d), half) * estride \
        + (e[:, None] + e[None, :]).ravel()
    return keys

def _exclusion_count(spec: LatticeSpec) -> int:
    # ordered resonant quadruples with s1 == s3 or s2 == s3:
    # s1 == s3 forces s2 == s (and symmetrically), so these are the
    # pairs (a, b) counted once per ordering, minus the double-counted
    # fully diagonal quadruple (a == b).
    n = spec.n_modes
    return 2 * n * n - n


def build_resonance_table(spec: LatticeSpec, strategy: str = "auto",
                          entry_budget: int = 100_000_000) -> ResonanceTable:
    """Enumerate all quadruples with Delta != 0 among the stored modes.

    The production path groups ordered pairs by their conserved
    (momentum, energy) key; two pairs in one group form a resonant
    quadruple, which realizes the u . v = 0 structure without a cubic
    scan.  Below 200 modes the brute-force triple scan is used, and it
    doubles as the oracle in the tests.
    """
    if strategy == "auto":
        strategy = "brute" if spec.n_modes < 200 else "grouped"
    if strategy == "brute":
        return _build_brute(spec)
    if strategy != "grouped":
        raise ValueError(f"unknown strategy {strategy!r}")
    return _build_grouped(spec, entry_budget)


def _build_grouped(spec: LatticeSpec, entry_budget: int) -> ResonanceTable:
    n = spec.n_modes
    keys = _pair_keys(spec)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    keys_sorted = keys[order]
    pair_i = (order // n).astype(np.int32)
    pair_j = (order % n).astype(np.int32)
    starts = np.flatnonzero(np.concatenate(([True], keys_sorted[1:] != keys_sorted[:-1])))
    counts = np.diff(np.concatenate((starts, [len(keys_sorted)])))

    projected = int((counts.astype(np.int64) ** 2).sum()) - _exclusion_count(spec) + n
    if projected > entry_budget:
        raise ResonanceMemoryError(projected, entry_budget)

    out_t, out_1, out_2, out_3 = [], [], [], []
    chunk_cap = 4_000_000
    g_start = 0
    sq = counts.astype(np.int64) ** 2
    while g_start < len(counts):
        g_end = g_start
        acc = 0
        while g_end < len(counts) and (acc + sq[g_end] <= chunk_cap or g_end == g_start):
            acc += sq[g_end]
            g_end += 1
        sel = slice(g_start, g_end)
        c = counts[sel].astype(np.int64)
        st = starts[sel].astype(np.int64)
        total = int((c * c).sum())
        if total:
            gid = np.repeat(np.arange(len(c)), c * c)
            base = np.concatenate(([0], np.cumsum(c * c)))[:-1]
            within = np.arange(total, dtype=np.int64) - base[gid]
            g_of = c[gid]
            a = within // g_of
            b = within % g_of
            pos_a = st[gid] + a
            pos_b = st[gid] + b
            t1, t2 = pair_i[pos_a], pair_j[pos_a]
            t3, t4 = pair_i[pos_b], pair_j[pos_b]
            keep = (t1 != t3) & (t2 != t3)
            out_1.append(t1[keep]); out_2.append(t2[keep])
            out_3.append(t3[keep]); out_t.append(t4[keep])
        g_start = g_end

    diag = np.arange(n, dtype=np.int32)
    i1 = np.concatenate(out_1 + [diag])
    i2 = np.concatenate(out_2 + [diag])
    i3 = np.concatenate(out_3 + [diag])
    tg = np.concatenate(out_t + [diag])
    sg = np.concatenate([np.ones(len(i1) - n, np.int8), -np.ones(n, np.int8)])
    return _sorted_table(spec, tg, i1, i2, i3, sg)


def _build_brute(spec: LatticeSpec) -> ResonanceTable:
    z, e, n = spec.modes, spec.norms2, spec.n_modes
    out_t, out_1, out_2, out_3 = [], [], [], []
    jj = np.arange(n, dtype=np.int64)
    for t in range(n):
        for i in range(n):
            z3 = z[i] + z - z[t]
            idx3 = spec.indices_of(z3)
            ok = idx3 >= 0
            if not ok.any():
                continue
            j = jj[ok]
            i3 = idx3[ok]
            res = (e[i] + e[j] - e[i3] - e[t]) == 0
            j, i3 = j[res], i3[res]
            keep = (i3 != i) & (i3 != j)
            j, i3 = j[keep], i3[keep]
            if len(j):
                out_1.append(np.full(len(j), i, np.int32))
                out_2.append(j.astype(np.int32))
                out_3.append(i3.astype(np.int32))
                out_t.append(np.full(len(j), t, np.int32))
    diag = np.arange(n, dtype=np.int32)
    i1 = np.concatenate(out_1 + [diag])
    i2 = np.concatenate(out_2 + [diag])
    i3 = np.concatenate(out_3 + [diag])
    tg = np.concatenate(out_t + [diag])
    sg = np.concatenate([np.ones(len(i1) - n, np.int8), -np.ones(n, np.int8)])
    return _sorted_table(spec, tg, i1, i2, i3, sg)


def save_table(table: ResonanceTable, path) -> None:
    meta = dict(version=TABLE_CACHE_VERSION, d=table.spec.d, L=table.spec.L,
                K=table.spec.K, n_modes=table.spec.n_modes,
                n_entries=table.n_entries)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             target=table.target, i1=table.i1, i2=table.i2, i3=table.i3,
             sign=table.sign)


def load_table(path, spec: LatticeSpec) -> ResonanceTable:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"].tobytes()).decode())
        if meta["version"] != TABLE_CACHE_VERSION:
            raise LatticeError(f"cache version {meta['version']} unsupported")
        key = (meta["d"], meta["L"], meta["K"], meta["n_modes"])
        if key != (spec.d, spec.L, spec.K, spec.n_modes):
            raise LatticeError(f"cache key {key} does not match lattice")
        return ResonanceTable(spec, blob["target"], blob["i1"], blob["i2"],
                              blob["i3"], blob["sign"])


# ----------------------------------------------------------------------
# quadric sums over u . v = 0 in Z^{2d}_L


@dataclass(frozen=True)
class SchwartzWeight:
    """Radial decaying weight on R^k: gaussian exp(-r^2/sigma^2) or
    polynomial max(1, r)^(-mu)."""

    family: str
    k: int
    sigma: float = 1.0
    mu: float = 16.0

    @classmethod
    def gaussian(cls, k: int, sigma: float = 1.0) -> "SchwartzWeight":
        return cls("gaussian", k, sigma=sigma)

    @classmethod
    def polynomial(cls, k: int, mu: float = 16.0) -> "SchwartzWeight":
        return cls("polynomial", k, mu=mu)

    @classmethod
    def parse(cls, text: str, k: int) -> "SchwartzWeight":
        name, _, arg = text.partition(":")
        if name == "gaussian":
            return cls.gaussian(k, float(arg) if arg else 1.0)
        if name in ("poly", "polynomial"):
            return cls.polynomial(k, float(arg) if arg else 16.0)
        raise ValueError(f"unknown weight family {name!r}")

    @property
    def separable(self) -> bool:
        return self.family == "gaussian"

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        if self.family == "gaussian":
            return np.exp(-(r / self.sigma) ** 2)
        return np.maximum(1.0, r) ** (-self.mu)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return self.radial(np.sqrt((z * z).sum(axis=-1)))

    def factor(self, t):
        """One-dimensional factor (separable families only)."""
        if not self.separable:
            raise ValueError(f"{self.family} weight is not separable")
        t = np.asarray(t, dtype=float)
        return np.exp(-(t / self.sigma) ** 2)

    def decay_norm(self, n2: int, radius: float) -> float:
        """sup f(z) <z>^n2 over |z| <= radius, on a dense radial sample."""
        r = np.linspace(0.0, radius, 4097)
        return float(np.max(self.radial(r) * np.maximum(1.0, r) ** n2))

    def far_field_ok(self, radius: float, rel: float = 1e-12) -> bool:
        peak = float(self.radial(np.array(0.0)))
        return float(self.radial(np.array(2.0 * radius))) <= rel * peak


@dataclass(frozen=True)
class QuadricSumResult:
    value: float
    tail_bound: float
    tail_warning: bool
    method: str
    L: int
    z0_norm: float


def _coordinate_ranges(L: int, center: np.ndarray, R: float):
    lo = np.ceil(L * (center - R) - 1e-9).astype(np.int64)
    hi = np.floor(L * (center + R) + 1e-9).astype(np.int64)
    return lo, hi


def quadric_sum(f: SchwartzWeight, d: int, L: int, z0=None, R: float = 6.0,
                method: str = "auto"):
    """Truncated sum of f(z - z0) over z in Z^{2d}_L with u . v = 0.

    The enumeration window is the box |z - z0|_inf <= R; the reported
    tail bound estimates the neglected mass outside it.  Gaussian
    weights use an exact per-coordinate product-value convolution; the
    general path enumerates v on the integer hyperplane u . v = 0 one
    pivot slab at a time.
    """
    k = 2 * d
    if f.k != k:
        raise ValueError(f"weight lives on R^{f.k}, need R^{k}")
    if z0 is None:
        z0 = np.zeros(k)
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (k,):
        raise ValueError(f"shift must have length {k}")
    if method == "auto":
        method = "separable" if f.separable else "slab"
    if method == "separable":
        value = _quadric_separable(f, d, L, z0, R)
    elif method == "slab":
        value = _quadric_slab(f, d, L, z0, R)
    else:
        raise ValueError(f"unknown method {method!r}")
    tail = _tail_envelope(f, d, L, R)
    warn = bool(tail > 1e-9 * max(abs(value), 1e-300))
    return QuadricSumResult(value=float(value), tail_bound=float(tail),
                            tail_warning=warn, method=method, L=int(L),
                            z0_norm=float(np.sqrt((z0 * z0).sum())))


def _tail_envelope(f: SchwartzWeight, d: int, L: int, R: float) -> float:
    # Envelope of the quadric point count in dyadic shells, c * (2 B)^(k-2)
    # with a documented heuristic constant; metadata only, never asserted.
    k = 2 * d
    total = 0.0
    for j in range(1, 40):
        r_in = R * 2 ** (j - 1)
        shell = 32.0 * (2.0 * L * R * 2 ** j) ** (k - 2)
        total += shell * float(f.radial(np.array(r_in)))
        if shell * float(f.radial(np.array(r_in))) < 1e-300:
            break
    return total


def _quadric_separable(f, d, L, z0, R):
    factors = []
    for c in range(d):
        a_lo, a_hi = _coordinate_ranges(L, z0[c:c + 1], R)
        b_lo, b_hi = _coordinate_ranges(L, z0[d + c:d + c + 1], R)
        a = np.arange(a_lo[0], a_hi[0] + 1)
        b = np.arange(b_lo[0], b_hi[0] + 1)
        if len(a) == 0 or len(b) == 0:
            return 0.0
        g = f.factor(a / L - z0[c])
        h = f.factor(b / L - z0[d + c])
        ends_a = np.array([a[0], a[-1]])
        ends_b = np.array([b[0], b[-1]])
        prods = np.multiply.outer(ends_a, ends_b)
        t_min, t_max = int(prods.min()), int(prods.max())
        if a[0] <= 0 <= a[-1] or b[0] <= 0 <= b[-1]:
            t_min, t_max = min(t_min, 0), max(t_max, 0)
        W = np.zeros(t_max - t_min + 1)
        for ai, gi in zip(a, g):
            np.add.at(W, ai * b - t_min, gi * h)
        factors.append((W, t_min))

    W_run, off_run = factors[0]
    for W_c, off_c in factors[1:-1]:
        W_run = np.convolve(W_run, W_c)
        off_run += off_c
    W_last, off_last = factors[-1]
    # sum over t_run + t_last = 0
    total = 0.0
    i_lo = max(0, -off_last - (off_run + len(W_run) - 1))
    i_hi = min(len(W_last) - 1, -off_last - off_run)
    if i_lo <= i_hi:
        idx_last = np.arange(i_lo, i_hi + 1)
        idx_run = (-(idx_last + off_last)) - off_run
        total = float(np.dot(W_last[idx_last], W_run[idx_run]))
    return total


def _quadric_slab(f, d, L, z0, R):
    u0, v0 = z0[:d], z0[d:]
    p_lo, p_hi = _coordinate_ranges(L, u0, R)
    q_lo, q_hi = _coordinate_ranges(L, v0, R)
    if np.any(p_lo > p_hi) or np.any(q_lo > q_hi):
        return 0.0
    q_axes = [np.arange(q_lo[i], q_hi[i] + 1) for i in range(d)]
    # full v-box displacement tables for the p = 0 plane
    total = 0.0
    if np.all(p_lo <= 0) and np.all(p_hi >= 0):
        mesh = np.meshgrid(*q_axes, indexing="ij")
        q = np.stack([m.ravel() for m in mesh], axis=1)
        r2 = ((q / L - v0) ** 2).sum(axis=1) + float((u0 * u0).sum())
        total += float(f.radial(np.sqrt(r2)).sum())

    p_mesh = np.meshgrid(*[np.arange(p_lo[i], p_hi[i] + 1) for i in range(d)],
                         indexing="ij")
    p_all = np.stack([m.ravel() for m in p_mesh], axis=1)
    p_all = p_all[np.any(p_all != 0, axis=1)]

    # free-coordinate meshes per pivot, built once
    free_cache = {}
    for j in range(d):
        axes = [q_axes[i] for i in range(d) if i != j]
        mesh = np.meshgrid(*axes, indexing="ij") if axes else []
        free_cache[j] = np.stack([m.ravel() for m in mesh], axis=1) if axes \
            else np.zeros((1, 0), dtype=np.int64)

    for p in p_all:
        j = int(np.argmax(np.abs(p)))
        free = free_cache[j]
        others = [i for i in range(d) if i != j]
        t = free @ p[others] if others else np.zeros(1, dtype=np.int64)
        ok = t % p[j] == 0
        if not ok.any():
            continue
        qj = -(t[ok] // p[j])
        in_range = (qj >= q_lo[j]) & (qj <= q_hi[j])
        if not in_range.any():
            continue
        qj = qj[in_range]
        fr = free[ok][in_range]
        r2 = float(((p / L - u0) ** 2).sum())
        r2 = r2 + (qj / L - v0[j]) ** 2
        for col, i in enumerate(others):
            r2 = r2 + (fr[:, col] / L - v0[i]) ** 2
        total += float(f.radial(np.sqrt(r2)).sum())
    return total


@dataclass
class QuadricReport:
    rows: list            # dicts: L, z0_norm, sum, ratio, tail_bound
    L_exponent: float
    L_exponent_target: float
    shift_exponent: float | None

    def as_csv_rows(self):
        header = ["L", "z0_norm", "sum", "ratio", "tail_bound"]
        body = [[r["L"], r["z0_norm"], r["sum"], r["ratio"], r["tail_bound"]]
                for r in self.rows]
        return header, body


def quadric_asymptotic_report(f: SchwartzWeight, d: int, L_list, z0_list=None,
                              R: float = 6.0) -> QuadricReport:
    """Ratios S_L^{z0} / L^(2(d-1)) and fitted growth exponents.

    The shift-growth exponent probes whether shifted sums stay bounded
    uniformly in z0 (reported, never asserted: the uniform bound is an
    open conjecture).
    """
    if len(L_list) < 2:
        raise ValueError("need at least two values of L")
    k = 2 * d
    if z0_list is None:
        z0_list = [np.zeros(k)]
    z0_list = [np.asarray(z, dtype=float) for z in z0_list]
    if not any(np.all(z == 0) for z in z0_list):
        z0_list = [np.zeros(k)] + z0_list

    rows = []
    by_L0 = {}
    for L in L_list:
        for z0 in z0_list:
            res = quadric_sum(f, d, L, z0=z0, R=R)
            ratio = res.value / L ** (2 * (d - 1))
            rows.append(dict(L=L, z0_norm=res.z0_norm, sum=res.value,
                             ratio=ratio, tail_bound=res.tail_bound))
            if res.z0_norm == 0.0:
                by_L0[L] = res.value

    Ls = np.array(sorted(by_L0))
    vals = np.array([by_L0[L] for L in Ls])
    L_exp = float(np.polyfit(np.log(Ls), np.log(np.maximum(vals, 1e-300)), 1)[0])

    shift_exp = None
    norms = sorted({r["z0_norm"] for r in rows if r["z0_norm"] > 0})
    if norms:
        L_big = max(L_list)
        base = by_L0[L_big]
        xs, ys = [], []
        for r in rows:
            if r["L"] == L_big and r["z0_norm"] > 0 and r["sum"] > 0:
                xs.append(np.log(max(1.0, r["z0_norm"])))
                ys.append(np.log(r["sum"] / base))
        if len(xs) >= 2 and np.ptp(xs) > 0:
            shift_exp = float(np.polyfit(xs, ys, 1)[0])
        elif len(xs) == 1 and xs[0] > 0:
            shift_exp = float(ys[0] / xs[0])

    return QuadricReport(rows=rows, L_exponent=L_exp,
                         L_exponent_target=float(2 * (d - 1)),
                         shift_exponent=shift_exp)
