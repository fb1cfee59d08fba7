"""Exact chaos algebra for kernels that are constant on time cuboids.

A kernel set stores, for each level ``n``, canonical cells: sorted tuples of
``(alpha, mark)`` pairs where ``alpha`` in ``1..m`` indexes the coarse
interval ``]r_{alpha-1}, r_alpha]`` and ``mark`` indexes an atom of ``mu``.
The stored coefficient is the value of the symmetric kernel on every cell of
the orbit of the canonical one.  All L2 integrals reduce to finite sums.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
from scipy import integrate

from .levy import DrivingPaths, MarkMeasure

Cell = tuple[tuple[int, int], ...]


class NotInD12Error(ValueError):
    """Raised when a truncated expansion carries derivative mass above the truncation level."""


class NonCanonicalError(ValueError):
    """Raised when a serialized entry is not in canonical sorted form."""


def orbit_size(cell: Cell) -> int:
    """Number of distinct orderings of ``cell``."""
    out = math.factorial(len(cell))
    for c in Counter(cell).values():
        out //= math.factorial(c)
    return out


def multiplicity(alphas: Iterable[int], m: int) -> np.ndarray:
    """``gamma_l(alpha)`` for ``l = 1..m``."""
    g = np.zeros(m, dtype=int)
    for a in alphas:
        g[a - 1] += 1
    return g


@dataclass(frozen=True)
class _LevelArrays:
    alpha: np.ndarray  # (E, n), 1-based
    weight: np.ndarray  # (E,) coef^2 * orbit * prod mass


@dataclass(frozen=True)
class ChaosKernelSet:
    """Symmetric kernels on ``[0,T] x R`` constant on cuboids times atoms.

    Attributes:
        partition: Coarse partition ``0 = r_0 < ... < r_m = T``.
        marks: Mark measure whose atoms index the second entry of each pair.
        levels: ``{n: {cell: coef}}`` with canonical cells; level 0 uses ``()``.
    """

    partition: tuple[float, ...]
    marks: MarkMeasure
    levels: dict[int, dict[Cell, float]] = field(default_factory=dict)

    def __post_init__(self):
        part = tuple(float(p) for p in self.partition)
        object.__setattr__(self, "partition", part)
        if part[0] != 0.0 or np.any(np.diff(part) <= 0):
            raise ValueError("partition must start at 0 and increase strictly")
        clean: dict[int, dict[Cell, float]] = {}
        for n, entries in self.levels.items():
            lvl = {}
            for cell, c in entries.items():
                cell = tuple((int(a), int(j)) for a, j in cell)
                if len(cell) != n:
                    raise ValueError(f"cell {cell} does not have length {n}")
                if list(cell) != sorted(cell):
                    raise NonCanonicalError(f"cell {cell} is not sorted")
                for a, j in cell:
                    if not 1 <= a <= self.m or not 0 <= j < len(self.marks):
                        raise ValueError(f"cell {cell} out of range")
                if c != 0.0:
                    lvl[cell] = float(c)
            if lvl:
                clean[int(n)] = lvl
        object.__setattr__(self, "levels", clean)

    # -- basic geometry -------------------------------------------------
    @property
    def m(self) -> int:
        return len(self.partition) - 1

    @property
    def horizon(self) -> float:
        return self.partition[-1]

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.diff(np.asarray(self.partition))

    @property
    def max_level(self) -> int:
        return max(self.levels, default=0)

    def mean(self) -> float:
        return self.levels.get(0, {}).get((), 0.0)

    def _mass(self, cell: Cell) -> float:
        return math.prod(self.marks.masses[j] for _, j in cell)

    @cached_property
    def _arrays(self) -> dict[int, _LevelArrays]:
        out = {}
        for n, entries in self.levels.items():
            cells = list(entries)
            alpha = np.array([[a for a, _ in c] for c in cells], dtype=int).reshape(len(cells), n)
            w = np.array([entries[c] ** 2 * orbit_size(c) * self._mass(c) for c in cells])
            out[n] = _LevelArrays(alpha, w)
        return out

    def _len_upto(self, t) -> np.ndarray:
        """``(m, G)`` lengths ``|Lambda_k cap ]0,t]|`` for an array of times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        left = np.asarray(self.partition[:-1])[:, None]
        return np.clip(t[None, :] - left, 0.0, self.lengths[:, None])

    # -- norms ------------------------------------------------------------
    def level_norm_sq(self, n: int) -> float:
        """``||f_n||^2`` over ``([0,T] x R)^n``."""
        arr = self._arrays.get(n)
        if arr is None:
            return 0.0
        vol = np.prod(self.lengths[arr.alpha - 1], axis=1) if n else np.ones(len(arr.weight))
        return float(np.sum(arr.weight * vol))

    def level_contributions(self) -> dict[int, float]:
        return {n: math.factorial(n) * self.level_norm_sq(n) for n in sorted(self.levels)}

    def projection_norm_sq(self, t):
        """``T_xi(t) = ||E_t xi||^2``; accepts a scalar or an array of times."""
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(tt < 0) or np.any(tt > self.horizon * (1 + 1e-15)):
            raise ValueError("t outside [0, T]")
        lens = self._len_upto(tt)
        out = np.zeros(tt.shape)
        for n, arr in self._arrays.items():
            if n == 0:
                out += arr.weight.sum()
                continue
            vol = np.prod(lens[arr.alpha - 1], axis=1)  # (E, G)
            out += math.factorial(n) * (arr.weight @ vol)
        return float(out[0]) if scalar else out

    # -- structural operations ------------------------------------------
    def refine(self, points: Iterable[float]) -> "ChaosKernelSet":
        """Same random variable on a partition refined by ``points``."""
        new_part = sorted(set(self.partition) | {float(p) for p in points if 0 < p < self.horizon})
        pieces: dict[int, list[int]] = {}
        for k in range(1, self.m + 1):
            lo, hi = self.partition[k - 1], self.partition[k]
            pieces[k] = [i for i in range(1, len(new_part)) if lo <= new_part[i - 1] and new_part[i] <= hi]
        levels: dict[int, dict[Cell, float]] = {}
        for n, entries in self.levels.items():
            lvl = levels.setdefault(n, {})
            for cell, c in entries.items():
                for choice in itertools.product(*[pieces[a] for a, _ in cell]):
                    key = tuple(sorted(zip(choice, (j for _, j in cell))))
                    lvl[key] = c
        return ChaosKernelSet(tuple(new_part), self.marks, levels)

    def project(self, t: float) -> "ChaosKernelSet":
        """Kernel set of ``E_t xi`` (on the partition refined at ``t``)."""
        ref = self.refine([t])
        k_t = int(np.searchsorted(np.asarray(ref.partition), t - 1e-15 * max(1.0, self.horizon)))
        levels = {n: {c: v for c, v in e.items() if all(a <= k_t for a, _ in c)} for n, e in ref.levels.items()}
        return ChaosKernelSet(ref.partition, self.marks, levels)

    def malliavin_kernel(self, k: int, mark: int) -> "ChaosKernelSet":
        """Kernel set of ``D_{t,x} xi`` for ``t`` in ``Lambda_k`` and ``x`` the atom ``mark``."""
        if not 1 <= k <= self.m or not 0 <= mark < len(self.marks):
            raise ValueError("interval or mark index out of range")
        levels: dict[int, dict[Cell, float]] = defaultdict(dict)
        for n, entries in self.levels.items():
            for cell, c in entries.items():
                if (k, mark) in cell:
                    rest = list(cell)
                    rest.remove((k, mark))
                    levels[n - 1][tuple(rest)] = n * c
        return ChaosKernelSet(self.partition, self.marks, dict(levels))

    def check_d12(self, n_max: int = 6, rel_tol: float = 1e-12) -> dict[int, float]:
        """Per-level derivative-norm contributions ``n n! ||f_n||^2``.

        Raises:
            NotInD12Error: if levels above ``n_max`` carry more than ``rel_tol``
                of the total, i.e. the truncation is not trustworthy.
        """
        contrib = {n: n * v for n, v in self.level_contributions().items()}
        total = sum(contrib.values())
        tail = sum(v for n, v in contrib.items() if n > n_max)
        if total > 0 and tail > rel_tol * total:
            raise NotInD12Error(
                f"derivative mass above level {n_max} is {tail:.3e} of {total:.3e}; per level: {contrib}"
            )
        return contrib

    def __add__(self, other: "ChaosKernelSet") -> "ChaosKernelSet":
        if self.partition != other.partition or self.marks != other.marks:
            raise ValueError("kernel sets live on different partitions or mark measures")
        levels: dict[int, dict[Cell, float]] = {n: dict(e) for n, e in self.levels.items()}
        for n, e in other.levels.items():
            lvl = levels.setdefault(n, {})
            for c, v in e.items():
                lvl[c] = lvl.get(c, 0.0) + v
        return ChaosKernelSet(self.partition, self.marks, levels)

    def scaled(self, a: float) -> "ChaosKernelSet":
        return ChaosKernelSet(self.partition, self.marks, {n: {c: a * v for c, v in e.items()} for n, e in self.levels.items()})

    # -- pathwise evaluation -----------------------------------------------
    def evaluate_paths(self, driving: DrivingPaths, upto: int | None = None) -> np.ndarray:
        """Evaluate ``sum I_n(f_n)`` on paths from ``M`` increments.

        Repeated cells are expanded over the net intervals inside the coarse
        interval and diagonal terms dropped, which carries a bias of the order
        of the net mesh.  ``upto`` restricts all increments to net intervals
        before index ``upto`` (this gives ``E_{t_upto}`` of each product of
        distinct cells).
        """
        if driving.marks != self.marks:
            raise ValueError("mark measure mismatch")
        net = driving.net
        n_int = net.n_intervals if upto is None else upto
        idx = [net.index(r) for r in self.partition]
        out = np.full(driving.n_paths, self.mean())
        # power sums p_q of the net increments inside each (alpha, mark)
        power: dict[tuple[int, int, int], np.ndarray] = {}

        def psum(a: int, j: int, q: int) -> np.ndarray:
            key = (a, j, q)
            if key not in power:
                lo, hi = idx[a - 1], min(idx[a], n_int)
                seg = driving.dm[:, lo:max(lo, hi), j]
                power[key] = np.sum(seg**q, axis=1)
            return power[key]

        def esym(a: int, j: int, q: int) -> np.ndarray:
            # Newton's identities: q e_q = sum_{i=1}^q (-1)^{i-1} e_{q-i} p_i
            e = [np.ones(driving.n_paths)]
            for r in range(1, q + 1):
                acc = np.zeros(driving.n_paths)
                for i in range(1, r + 1):
                    acc += (-1) ** (i - 1) * e[r - i] * psum(a, j, i)
                e.append(acc / r)
            return e[q]

        for n, entries in self.levels.items():
            if n == 0:
                continue
            for cell, c in entries.items():
                term = np.full(driving.n_paths, c * math.factorial(n))
                for (a, j), q in Counter(cell).items():
                    term = term * esym(a, j, q)
                out += term
        return out

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        levels = []
        for n in sorted(self.levels):
            entries = [
                {"alpha": [a for a, _ in c], "marks": [j for _, j in c], "coef": v}
                for c, v in sorted(self.levels[n].items())
            ]
            levels.append({"n": n, "entries": entries})
        return {"partition": list(self.partition), "atoms": [list(a) for a in self.marks.atoms()], "levels": levels}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ChaosKernelSet":
        marks = MarkMeasure(tuple(float(a[0]) for a in d["atoms"]), tuple(float(a[1]) for a in d["atoms"]))
        levels: dict[int, dict[Cell, float]] = {}
        for lvl in d.get("levels", []):
            n = int(lvl["n"])
            entries = levels.setdefault(n, {})
            for e in lvl["entries"]:
                if len(e["alpha"]) != n or len(e["marks"]) != n:
                    raise ValueError(f"entry {e} has wrong length for level {n}")
                cell = tuple(zip((int(a) for a in e["alpha"]), (int(j) for j in e["marks"])))
                if list(cell) != sorted(cell):
                    raise NonCanonicalError(f"entry {e} is not canonical (pairs must be sorted)")
                if cell in entries:
                    raise NonCanonicalError(f"duplicate entry {e}")
                entries[cell] = float(e["coef"])
        return cls(tuple(d["partition"]), marks, levels)

    @classmethod
    def from_json(cls, text: str) -> "ChaosKernelSet":
        return cls.from_dict(json.loads(text))


# -- constructors -------------------------------------------------------------

def constant(partition, marks: MarkMeasure, c: float) -> ChaosKernelSet:
    return ChaosKernelSet(tuple(partition), marks, {0: {(): c}})


def x_at(partition, marks: MarkMeasure, k: int, gamma: float = 0.0) -> ChaosKernelSet:
    """Kernel set of ``X_{r_k}``: ``gamma r_k + I_1(1_{]0,r_k] x R})``."""
    lvl1 = {((a, j),): 1.0 for a in range(1, k + 1) for j in range(len(marks))}
    return ChaosKernelSet(tuple(partition), marks, {0: {(): gamma * partition[k]}, 1: lvl1})


def symmetrize(partition, marks: MarkMeasure, n: int, raw: dict[Cell, float]) -> ChaosKernelSet:
    """Canonical kernel set of a possibly asymmetric kernel given on ordered cells."""
    sums: dict[Cell, float] = defaultdict(float)
    for cell, v in raw.items():
        sums[tuple(sorted(cell))] += v
    return ChaosKernelSet(tuple(partition), marks, {n: {c: s / orbit_size(c) for c, s in sums.items()}})


def random_kernel_set(
    rng: np.random.Generator,
    partition,
    marks: MarkMeasure,
    max_level: int = 4,
    density: float = 0.6,
) -> ChaosKernelSet:
    """Random kernel set; each canonical cell is populated with probability ``density``."""
    m = len(partition) - 1
    pairs = [(a, j) for a in range(1, m + 1) for j in range(len(marks))]
    levels: dict[int, dict[Cell, float]] = {0: {(): float(rng.normal())}}
    for n in range(1, max_level + 1):
        lvl = {}
        for cell in itertools.combinations_with_replacement(pairs, n):
            if rng.random() < density:
                lvl[cell] = float(rng.normal()) / math.factorial(n)
        levels[n] = lvl
    return ChaosKernelSet(tuple(partition), marks, levels)


# -- exact functionals ---------------------------------------------------------

def chaos_norm_sq(xi: ChaosKernelSet) -> float:
    """``||xi||^2 = sum_n n! ||f_n||^2``."""
    return float(sum(xi.level_contributions().values()))


def conditional_projection_norm_sq(xi: ChaosKernelSet, t: float) -> float:
    """``T_xi(t) = ||E_t xi||^2``."""
    return xi.projection_norm_sq(float(t))


def projection_distance_sq(xi: ChaosKernelSet, s: float, t: float) -> float:
    """``||E_t xi - E_s xi||^2`` from the refined kernel of ``E_t xi - E_s xi``."""
    if s > t:
        raise ValueError("need s <= t")
    if not 0 <= s and t <= xi.horizon:
        raise ValueError("times outside [0, T]")
    ref = xi.refine([s, t])
    part = np.asarray(ref.partition)
    k_s = int(np.searchsorted(part, s - 1e-15))
    k_t = int(np.searchsorted(part, t - 1e-15))
    levels = {}
    for n, entries in ref.levels.items():
        levels[n] = {
            c: v for c, v in entries.items()
            if all(a <= k_t for a, _ in c) and not all(a <= k_s for a, _ in c)
        }
    return chaos_norm_sq(ChaosKernelSet(ref.partition, ref.marks, levels))


def dsmooth_norm_sq(xi: ChaosKernelSet, n_max: int = 6) -> float:
    """``||D xi||^2`` via multiplicities: ``sum_k sum_n n! sum_[alpha] C(n,gamma) ||g^alpha||^2 lambda(Lambda_alpha) gamma_k``."""
    xi.check_d12(n_max)
    total = 0.0
    for n, entries in xi.levels.items():
        if n == 0:
            continue
        classes: dict[tuple[int, ...], float] = defaultdict(float)
        for cell, c in entries.items():
            classes[tuple(sorted(a for a, _ in cell))] += c * c * orbit_size(cell) * xi._mass(cell)
        for alphas, mass_sum in classes.items():
            gam = multiplicity(alphas, xi.m)
            multinom = math.factorial(n) // math.prod(math.factorial(g) for g in gam)
            g_norm = mass_sum / multinom  # ||g^alpha||^2 for one ordering of alpha
            vol = math.prod(xi.lengths[a - 1] for a in alphas)
            for k in range(xi.m):
                total += math.factorial(n) * multinom * g_norm * vol * gam[k]
    return total


def dsmooth_norm_sq_by_kernels(xi: ChaosKernelSet) -> float:
    """``||D xi||^2`` by integrating ``||D_{t,x} xi||^2`` over ``t`` and atoms."""
    total = 0.0
    for k in range(1, xi.m + 1):
        for j, mass in enumerate(xi.marks.masses):
            total += xi.lengths[k - 1] * mass * chaos_norm_sq(xi.malliavin_kernel(k, j))
    return total


def _resampling_vec(xi: ChaosKernelSet, ts: np.ndarray, r: float) -> np.ndarray:
    left = np.asarray(xi.partition[:-1])[:, None]
    right = np.asarray(xi.partition[1:])[:, None]
    inwin = np.clip(np.minimum(right, r) - np.maximum(left, ts[None, :]), 0.0, None)
    off = xi.lengths[:, None] - inwin  # (m, G)
    total = np.zeros(ts.shape)
    for n, arr in xi._arrays.items():
        if n == 0:
            continue
        full = np.prod(xi.lengths[arr.alpha - 1], axis=1)
        outside = np.prod(off[arr.alpha - 1], axis=1)  # (E, G)
        total += 2 * math.factorial(n) * (arr.weight @ (full[:, None] - outside))
    return total


def resampling_distance_sq(xi: ChaosKernelSet, t: float, r: float) -> float:
    """``||xi - xi^{t,r}||^2 = sum_n 2 n! ||f_n (1 - 1_{off-window}^n)||^2``."""
    if not 0 <= t < r <= xi.horizon:
        raise ValueError("need 0 <= t < r <= T")
    return float(_resampling_vec(xi, np.array([float(t)]), float(r))[0])


def _first_coordinate_sum(xi: ChaosKernelSet, k: int, volume) -> float:
    """``sum_n n n! sum_{alpha_1 = k} ||g^alpha||^2 volume(rest)``."""
    total = 0.0
    for n, entries in xi.levels.items():
        if n == 0:
            continue
        acc = 0.0
        for cell, c in entries.items():
            w = c * c * xi._mass(cell)
            for pair in set(cell):
                if pair[0] != k:
                    continue
                rest = list(cell)
                rest.remove(pair)
                acc += w * orbit_size(tuple(rest)) * volume(rest)
        total += n * math.factorial(n) * acc
    return total


def _check_inside(xi: ChaosKernelSet, k: int, *times: float):
    if not 1 <= k <= xi.m:
        raise ValueError(f"interval index {k} outside 1..{xi.m}")
    lo, hi = xi.partition[k - 1], xi.partition[k]
    for t in times:
        if not lo < t < hi:
            raise ValueError(f"{t} not inside ]{lo}, {hi}[")


def hsmooth_bound_check(eta: ChaosKernelSet, k: int, s: float, t: float, n_max: int = 6) -> tuple[float, float]:
    """Return ``(||E_t D_t eta - E_s D_s eta||^2, 4 int_s^t (T(r_k)-T(r))/(r_k-r)^2 dr)``."""
    _check_inside(eta, k, s, t)
    if s > t:
        raise ValueError("need s <= t")
    eta.check_d12(n_max)
    if s == t:
        return 0.0, 0.0

    def vol(rest):
        lt = eta._len_upto(t)[:, 0]
        ls = eta._len_upto(s)[:, 0]
        return math.prod(lt[a - 1] for a, _ in rest) - math.prod(ls[a - 1] for a, _ in rest)

    lhs = _first_coordinate_sum(eta, k, vol)
    r_k = eta.partition[k]
    t_rk = eta.projection_norm_sq(r_k)
    rhs, _ = integrate.quad(lambda r: (t_rk - eta.projection_norm_sq(r)) / (r_k - r) ** 2, s, t, epsabs=0.0, epsrel=1e-8, limit=200)
    return lhs, 4.0 * rhs


def hsmooth_pointwise_check(eta: ChaosKernelSet, k: int, t: float, n_max: int = 6) -> tuple[float, float]:
    """Return ``(||E_t D_t eta||^2, (T(r_k) - T(t))/(r_k - t))``."""
    _check_inside(eta, k, t)
    eta.check_d12(n_max)
    lt = eta._len_upto(t)[:, 0]
    lhs = _first_coordinate_sum(eta, k, lambda rest: math.prod(lt[a - 1] for a, _ in rest))
    r_k = eta.partition[k]
    rhs = (eta.projection_norm_sq(r_k) - eta.projection_norm_sq(t)) / (r_k - t)
    return lhs, rhs


def derivative_norm_bounds(xi: ChaosKernelSet, grid: int = 1000, rel_tol: float = 1e-6, max_rounds: int = 20) -> dict:
    """Two-sided bounds relating ``||D xi||^2`` to ``sup ||xi - xi^{t,r_k}||^2/(r_k - t)``.

    The sup over ``t`` is taken on a ``grid``-point grid per interval.  The
    grid is then repeatedly re-laid on ``[t*, r_k[`` around the current
    maximiser ``t*`` (the quotient grows towards ``r_k``) until the sup
    changes by less than ``rel_tol`` relative.
    """
    d_norm = dsmooth_norm_sq(xi)
    sups = []
    rounds = []
    for k in range(1, xi.m + 1):
        lo, hi = xi.partition[k - 1], xi.partition[k]
        a, best, n_round = lo, -np.inf, 0
        while True:
            ts = a + (hi - a) * np.arange(grid) / grid
            vals = _resampling_vec(xi, ts, hi) / (hi - ts)
            i = int(np.argmax(vals))
            new = float(vals[i])
            n_round += 1
            done = np.isfinite(best) and abs(new - best) <= rel_tol * max(abs(new), 1e-300)
            best = max(best, new)
            if done or n_round >= max_rounds:
                break
            a = float(ts[i])
        sups.append(best)
        rounds.append(n_round)
    sup = max(sups)
    big_r = float(np.max(1.0 / xi.lengths))
    return {
        "d_norm_sq": d_norm,
        "grid_sup": sup,
        "per_interval_sup": sups,
        "refinement_rounds": rounds,
        "upper": 2 * big_r * d_norm,
        "lower_scaled": xi.horizon / 2 * sup,
        "upper_holds": sup <= 2 * big_r * d_norm * (1 + 1e-12),
        "lower_holds": d_norm <= xi.horizon / 2 * sup,
    }
