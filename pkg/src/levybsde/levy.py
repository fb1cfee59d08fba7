"""Lévy model, mark measure, time nets and simulated path bundles.

The process is ``X_t = gamma*t + sigma*W_t + sum_j x_j (N_j(t) - lambda_j t)``
with finitely many jump atoms.  The random measure ``M`` charges the mark 0
with ``sigma dW`` and the mark ``x_j`` with ``x_j dÑ_j``.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .rng import BLOCK, SCHEME, blocks, keyed_generator


class InvalidMarkError(KeyError):
    """Raised when a mark is not an atom of the mark measure."""


@dataclass(frozen=True)
class LevyModel:
    """Square-integrable Lévy process with an atomic jump measure.

    Attributes:
        gamma: Drift.
        sigma: Brownian volatility (>= 0).
        jump_atoms: Tuple of ``(x_j, lambda_j)`` pairs.
        horizon: Terminal time ``T``.
    """

    gamma: float = 0.0
    sigma: float = 1.0
    jump_atoms: tuple[tuple[float, float], ...] = ()
    horizon: float = 1.0

    def __post_init__(self):
        atoms = tuple((float(x), float(lam)) for x, lam in self.jump_atoms)
        object.__setattr__(self, "jump_atoms", atoms)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "horizon", float(self.horizon))
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if not (self.sigma >= 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and >= 0")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")
        sizes = [x for x, _ in atoms]
        if any(x == 0 or not np.isfinite(x) for x in sizes):
            raise ValueError("jump sizes must be finite and nonzero")
        if len(set(sizes)) != len(sizes):
            raise ValueError("jump sizes must be distinct")
        if any(not (lam > 0 and np.isfinite(lam)) for _, lam in atoms):
            raise ValueError("jump intensities must be positive")
        if self.sigma == 0 and not atoms:
            raise ValueError("degenerate model: sigma = 0 and no jumps")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([x for x, _ in self.jump_atoms], dtype=float)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([lam for _, lam in self.jump_atoms], dtype=float)

    def mark_measure(self) -> "MarkMeasure":
        return derive_mark_measure(self)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "sigma": self.sigma,
            "jump_atoms": [[x, lam] for x, lam in self.jump_atoms],
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LevyModel":
        return cls(
            gamma=d.get("gamma", 0.0),
            sigma=d.get("sigma", 1.0),
            jump_atoms=tuple(tuple(a) for a in d.get("jump_atoms", [])),
            horizon=d.get("horizon", 1.0),
        )


@dataclass(frozen=True)
class MarkMeasure:
    """Atomic measure ``mu = sigma^2 delta_0 + sum x_j^2 lambda_j delta_{x_j}``.

    The Brownian mark 0 (if present) comes first, followed by the jump atoms
    in model order.
    """

    marks: tuple[float, ...]
    masses: tuple[float, ...]

    def __post_init__(self):
        if len(self.marks) != len(self.masses):
            raise ValueError("marks and masses differ in length")
        if any(w <= 0 for w in self.masses):
            raise ValueError("atom masses must be positive")

    def __len__(self) -> int:
        return len(self.marks)

    @property
    def total(self) -> float:
        return float(sum(self.masses))

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=float)

    def index(self, mark: float) -> int:
        for i, m in enumerate(self.marks):
            if m == mark:
                return i
        raise InvalidMarkError(f"mark {mark!r} is not an atom of mu (atoms: {list(self.marks)})")

    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.marks, self.masses))

    def l2_norm_sq(self, weights: dict[float, float] | Sequence[float]) -> float:
        """``sum h(atom)^2 mass(atom)`` for a weight map or vector."""
        w = self.weight_vector(weights)
        return float(np.sum(w * w * self.mass_array))

    def weight_vector(self, weights: dict[float, float] | Sequence[float] | None, default: float = 0.0) -> np.ndarray:
        if weights is None:
            return np.full(len(self), default)
        if isinstance(weights, dict):
            for m in weights:
                self.index(float(m))
            return np.array([float(weights.get(m, default)) for m in self.marks])
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(self),):
            raise ValueError("weight vector has wrong length")
        return w


def derive_mark_measure(model: LevyModel) -> MarkMeasure:
    """Atoms of ``mu``; ``.total`` gives ``mu(R)``."""
    marks, masses = [], []
    if model.sigma > 0:
        marks.append(0.0)
        masses.append(model.sigma**2)
    for x, lam in model.jump_atoms:
        marks.append(x)
        masses.append(x * x * lam)
    return MarkMeasure(tuple(marks), tuple(masses))


@dataclass(frozen=True)
class TimeNet:
    """Time grid ``0 = t_0 < ... < t_n = T`` with a coarse partition inside it."""

    points: tuple[float, ...]
    coarse_partition: tuple[float, ...] = ()

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        coarse = tuple(float(p) for p in self.coarse_partition) or (pts[0], pts[-1])
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "coarse_partition", coarse)
        if len(pts) < 2 or pts[0] != 0.0:
            raise ValueError("net must start at 0 and have at least two points")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("net points must be strictly increasing")
        if coarse[0] != 0.0 or coarse[-1] != pts[-1] or np.any(np.diff(coarse) <= 0):
            raise ValueError("coarse partition must run from 0 to T, strictly increasing")
        missing = [r for r in coarse if r not in set(pts)]
        if missing:
            raise ValueError(f"coarse partition points {missing} are not net points")

    @classmethod
    def equidistant(cls, n: int, horizon: float = 1.0, coarse: Sequence[float] | int | None = None) -> "TimeNet":
        """Equidistant net with ``n`` steps; ``coarse`` may be an int ``m`` dividing ``n``."""
        pts = [horizon * i / n for i in range(n + 1)]
        pts[-1] = float(horizon)
        if isinstance(coarse, int):
            if n % coarse:
                raise ValueError("coarse interval count must divide n")
            coarse = [pts[i * (n // coarse)] for i in range(coarse + 1)]
        return cls(tuple(pts), tuple(coarse or ()))

    @property
    def horizon(self) -> float:
        return self.points[-1]

    @property
    def n_intervals(self) -> int:
        return len(self.points) - 1

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.points)

    @cached_property
    def dt(self) -> np.ndarray:
        return np.diff(self.array)

    @property
    def m(self) -> int:
        return len(self.coarse_partition) - 1

    @property
    def mesh(self) -> float:
        return float(self.dt.max())

    def index(self, t: float) -> int:
        """Index of the net point equal to ``t`` (within 1e-12)."""
        i = int(np.argmin(np.abs(self.array - t)))
        if abs(self.array[i] - t) > 1e-12 * max(1.0, self.horizon):
            raise ValueError(f"{t} is not a net point")
        return i

    def coarse_index(self, k: int) -> int:
        """Net index of ``r_k`` (``k`` in 0..m)."""
        return self.index(self.coarse_partition[k])

    def coarse_interval(self, k: int) -> tuple[float, float]:
        """``Lambda_k = ]r_{k-1}, r_k]`` for ``k`` in 1..m."""
        if not 1 <= k <= self.m:
            raise ValueError(f"interval index {k} outside 1..{self.m}")
        return self.coarse_partition[k - 1], self.coarse_partition[k]

    def refines(self, other: "TimeNet") -> bool:
        mine = set(self.points)
        return all(p in mine for p in other.points)

    def to_dict(self) -> dict:
        return {"points": list(self.points), "coarse_partition": list(self.coarse_partition)}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeNet":
        return cls(tuple(d["points"]), tuple(d.get("coarse_partition", ())))


def model_net_to_json(model: LevyModel, net: TimeNet) -> str:
    return json.dumps({**model.to_dict(), **net.to_dict()}, indent=2)


def model_net_from_json(text: str) -> tuple[LevyModel, TimeNet]:
    d = json.loads(text)
    return LevyModel.from_dict(d), TimeNet.from_dict(d)


@dataclass(frozen=True)
class DrivingPaths:
    """Path data a backward solver consumes.

    Attributes:
        net: Time net.
        marks: Mark measure; column ``k`` of ``dm`` belongs to ``marks.marks[k]``.
        x: ``(n_paths, n_points)`` values of ``X`` on the net.
        dm: ``(n_paths, n_intervals, n_marks)`` increments ``M(]t_i,t_{i+1}] x {mark})``.
        gamma: Drift of ``X``.
    """

    net: TimeNet
    marks: MarkMeasure
    x: np.ndarray
    dm: np.ndarray
    gamma: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def head(self, n: int) -> "DrivingPaths":
        if n > self.n_paths:
            raise ValueError("not enough paths")
        return DrivingPaths(self.net, self.marks, self.x[:n], self.dm[:n], self.gamma)

    def take(self, start: int, stop: int) -> "DrivingPaths":
        """Paths ``start..stop-1``."""
        if not 0 <= start < stop <= self.n_paths:
            raise ValueError("path range out of bounds")
        return DrivingPaths(self.net, self.marks, self.x[start:stop], self.dm[start:stop], self.gamma)

    def coarsen(self, coarse: TimeNet) -> "DrivingPaths":
        """Restrict to a sub-net, summing ``dm`` over the fine intervals."""
        if not self.net.refines(coarse):
            raise ValueError("target net is not nested in the source net")
        idx = np.array([self.net.index(t) for t in coarse.points])
        csum = np.concatenate([np.zeros_like(self.dm[:, :1]), np.cumsum(self.dm, axis=1)], axis=1)
        dm = csum[:, idx[1:]] - csum[:, idx[:-1]]
        return DrivingPaths(coarse, self.marks, self.x[:, idx], dm, self.gamma)

    def shifted(self, r: float, v: float) -> np.ndarray:
        """Net values of ``X + v 1_{[r,T]}``."""
        return self.x + v * (self.net.array >= r)[None, :]


@dataclass(frozen=True)
class PathBundle:
    """Simulated Brownian increments and exact jump events on a net.

    ``dW`` holds standard Brownian increments per interval.  Jump events are
    stored as flat arrays sorted by ``(path, time)``; ``ev_interval`` is the
    net interval ``]t_i, t_{i+1}]`` containing each event.
    """

    model: LevyModel
    net: TimeNet
    n_paths: int
    dW: np.ndarray
    ev_path: np.ndarray
    ev_time: np.ndarray
    ev_atom: np.ndarray
    ev_interval: np.ndarray
    rng_lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("dW", "ev_path", "ev_time", "ev_atom", "ev_interval"):
            getattr(self, name).setflags(write=False)

    @cached_property
    def marks(self) -> MarkMeasure:
        return derive_mark_measure(self.model)

    @cached_property
    def jump_counts(self) -> np.ndarray:
        """``(n_paths, n_intervals, n_jump_atoms)`` event counts."""
        n_int, n_j = self.net.n_intervals, len(self.model.jump_atoms)
        flat = (self.ev_path * n_int + self.ev_interval) * n_j + self.ev_atom
        counts = np.bincount(flat, minlength=self.n_paths * n_int * n_j)
        return counts.reshape(self.n_paths, n_int, n_j).astype(np.int32)

    def m_increments(self) -> np.ndarray:
        """``(n_paths, n_intervals, n_marks)`` array of ``M`` increments per net interval."""
        cols = []
        if self.model.sigma > 0:
            cols.append(self.model.sigma * self.dW)
        dt = self.net.dt
        for j, (x, lam) in enumerate(self.model.jump_atoms):
            cols.append(x * (self.jump_counts[:, :, j] - lam * dt[None, :]))
        return np.stack(cols, axis=2)

    def x_on_net(self) -> np.ndarray:
        """``(n_paths, n_points)`` values of ``X`` at the net points."""
        dm = self.m_increments()
        x = np.zeros((self.n_paths, self.net.n_intervals + 1))
        x[:, 1:] = np.cumsum(dm.sum(axis=2), axis=1)
        return x + self.model.gamma * self.net.array[None, :]

    def driving(self) -> DrivingPaths:
        return DrivingPaths(self.net, self.marks, self.x_on_net(), self.m_increments(), self.model.gamma)

    def m_increment(self, path: int, interval: tuple[float, float], atom: float) -> float:
        """``M(]s,t] x {atom})`` for one path.

        Jump marks are exact for any ``s <= t``; the Brownian mark needs net
        points since the Brownian path is only stored on the net.
        """
        s, t = map(float, interval)
        if not 0 <= s <= t <= self.net.horizon:
            raise ValueError("interval must lie in [0, T] with s <= t")
        k = self.marks.index(float(atom))
        if s == t:
            return 0.0
        if self.model.sigma > 0 and k == 0:
            i, j = self.net.index(s), self.net.index(t)
            return float(self.model.sigma * self.dW[path, i:j].sum())
        jdx = k - (1 if self.model.sigma > 0 else 0)
        x, lam = self.model.jump_atoms[jdx]
        lo, hi = np.searchsorted(self.ev_path, [path, path + 1])
        times = self.ev_time[lo:hi][self.ev_atom[lo:hi] == jdx]
        n = int(np.count_nonzero((times > s) & (times <= t)))
        return float(x * (n - lam * (t - s)))

    def to_csv(self) -> str:
        """Columnar audit export: ``path,interval_index,dW,jump_list``."""
        buf = io.StringIO()
        buf.write("path,interval_index,dW,jump_list\n")
        starts = np.searchsorted(self.ev_path, np.arange(self.n_paths + 1))
        for p in range(self.n_paths):
            lo, hi = starts[p], starts[p + 1]
            per_int: dict[int, list[str]] = {}
            for tm, a, i in zip(self.ev_time[lo:hi], self.ev_atom[lo:hi], self.ev_interval[lo:hi]):
                per_int.setdefault(int(i), []).append(f"{tm:.17g}:{int(a)}")
            for i in range(self.net.n_intervals):
                buf.write(f"{p},{i},{self.dW[p, i]:.17g},{';'.join(per_int.get(i, []))}\n")
        return buf.getvalue()

    @staticmethod
    def replay(model: LevyModel, net: TimeNet, n_paths: int, lineage: dict) -> "PathBundle":
        """Rebuild a bundle bit-exactly from its lineage."""
        if lineage.get("scheme") != SCHEME or lineage.get("block") != BLOCK:
            raise ValueError("unsupported rng lineage")
        bundle = simulate(model, net, n_paths, lineage["seed"])
        for t, r, seed2 in lineage.get("windows", []):
            bundle = resample_window(bundle, t, r, seed2)
        return bundle


def _simulate_block(model: LevyModel, net: TimeNet, seed: int, b: int, start: int, stop: int):
    nb = stop - start
    pts, dt = net.array, net.dt
    dW = np.empty((nb, net.n_intervals))
    paths, times, atoms, ints = [], [], [], []
    for i in range(net.n_intervals):
        dW[:, i] = keyed_generator(seed, "dW", i, b).standard_normal(nb) * np.sqrt(dt[i])
        for j, (_, lam) in enumerate(model.jump_atoms):
            p, tm = _poisson_events(keyed_generator(seed, "jump", i, j, b), lam, pts[i], pts[i + 1], nb)
            paths.append(p + start)
            times.append(tm)
            atoms.append(np.full(p.size, j, dtype=np.int32))
            ints.append(np.full(p.size, i, dtype=np.int32))
    return dW, paths, times, atoms, ints


def _poisson_events(rng: np.random.Generator, lam: float, a: float, b: float, nb: int):
    """Homogeneous Poisson events on ``]a, b]`` for ``nb`` paths."""
    counts = rng.poisson(lam * (b - a), nb)
    p = np.repeat(np.arange(nb, dtype=np.int64), counts)
    tm = a + (b - a) * (1.0 - rng.random(p.size))
    tm = np.clip(tm, np.nextafter(a, b), b)
    return p, tm


def _assemble(model, net, n_paths, dW, paths, times, atoms, ints, lineage) -> PathBundle:
    ev_path = np.concatenate(paths) if paths else np.zeros(0, dtype=np.int64)
    ev_time = np.concatenate(times) if times else np.zeros(0)
    ev_atom = np.concatenate(atoms) if atoms else np.zeros(0, dtype=np.int32)
    ev_int = np.concatenate(ints) if ints else np.zeros(0, dtype=np.int32)
    order = np.lexsort((ev_atom, ev_time, ev_path))
    return PathBundle(
        model, net, n_paths, dW,
        ev_path[order].astype(np.int64), ev_time[order], ev_atom[order].astype(np.int32),
        ev_int[order].astype(np.int32), lineage,
    )


def simulate(model: LevyModel, net: TimeNet, n_paths: int, seed: int, threads: int = 1) -> PathBundle:
    """Simulate ``n_paths`` paths on ``net``.

    Output is independent of ``threads``: each block of paths reads its own
    keyed streams and blocks are assembled in order.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if abs(net.horizon - model.horizon) > 1e-12:
        raise ValueError("net horizon differs from model horizon")
    jobs = list(blocks(n_paths))
    run = lambda job: _simulate_block(model, net, seed, *job)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    dW = np.concatenate([r[0] for r in results], axis=0)
    parts = [sum((r[k] for r in results), []) for k in range(1, 5)]
    lineage = {"scheme": SCHEME, "block": BLOCK, "seed": int(seed), "windows": []}
    return _assemble(model, net, n_paths, dW, *parts, lineage)


def resample_window(bundle: PathBundle, t: float, r: float, seed2: int) -> PathBundle:
    """Replace the noise on ``]t, r]`` by an independent copy keyed by ``seed2``.

    Net intervals that straddle ``t`` or ``r`` are split with a Brownian
    bridge draw so only the part inside the window is refreshed.
    """
    if not 0 <= t < r <= bundle.net.horizon:
        raise ValueError("need 0 <= t < r <= T")
    net, model = bundle.net, bundle.model
    pts = net.array
    lineage = dict(bundle.rng_lineage)
    n_prev = len(lineage.get("windows", []))
    dW = np.array(bundle.dW)
    inside = (bundle.ev_time > t) & (bundle.ev_time <= r)
    paths = [bundle.ev_path[~inside]]
    times = [bundle.ev_time[~inside]]
    atoms = [bundle.ev_atom[~inside]]
    ints = [bundle.ev_interval[~inside]]
    affected = [i for i in range(net.n_intervals) if pts[i + 1] > t and pts[i] < r]
    for b, start, stop in blocks(bundle.n_paths):
        nb = stop - start
        for i in affected:
            a, e = pts[i], pts[i + 1]
            u, v = max(a, t), min(e, r)
            fresh = keyed_generator(seed2, "resample-dW", i, b).standard_normal(nb) * np.sqrt(v - u)
            if u == a and v == e:
                dW[start:stop, i] = fresh
            else:
                lens = np.array([u - a, v - u, e - v])
                g = keyed_generator(lineage["seed"], "bridge", i, b, u, v, n_prev).standard_normal((nb, 3))
                g *= np.sqrt(lens)[None, :]
                total = dW[start:stop, i]
                mid = g[:, 1] + (lens[1] / (e - a)) * (total - g.sum(axis=1))
                dW[start:stop, i] = total - mid + fresh
            for j, (_, lam) in enumerate(model.jump_atoms):
                p, tm = _poisson_events(keyed_generator(seed2, "resample-jump", i, j, b), lam, u, v, nb)
                paths.append(p + start)
                times.append(tm)
                atoms.append(np.full(p.size, j, dtype=np.int32))
                ints.append(np.full(p.size, i, dtype=np.int32))
    lineage["windows"] = list(lineage.get("windows", [])) + [[float(t), float(r), int(seed2)]]
    return _assemble(model, net, bundle.n_paths, dW, paths, times, atoms, ints, lineage)
