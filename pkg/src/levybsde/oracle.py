"""Exact finite-tree skeleton of the Lévy model.

Each step has ``1 + K`` outcomes, where ``K`` is the number of atoms of
``mu``.  The centered per-step mark increments are an orthonormal basis of
the centered functions of one step (scaled by ``sqrt(mass * dt)``), so
products over distinct steps form a complete discrete chaos and every
projection on the tree is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bsde import Generator, StepTooLargeError, TerminalCondition
from .chaos import ChaosKernelSet, chaos_norm_sq
from .levy import DrivingPaths, LevyModel, MarkMeasure, TimeNet, derive_mark_measure
from .rng import blocks, keyed_generator

MAX_STEPS = 8
MAX_ALPHABET = 4


@dataclass(frozen=True)
class TreeModel:
    """Per-step outcome law and increments.

    Attributes:
        outcomes: Outcome labels (``up``/``down`` for the Brownian part,
            ``jump_j`` per jump atom, ``none`` if ``sigma = 0``).
        probs: ``(A,)`` outcome probabilities.
        basis: ``(A, A)``; row 0 is the constant 1, row ``k+1`` the
            orthonormal function of mark ``k``.
        dm: ``(A, K)`` mark increments per outcome.
        dx: ``(A,)`` increments of ``X``.
    """

    model: LevyModel
    net: TimeNet
    marks: MarkMeasure
    outcomes: tuple[str, ...]
    probs: np.ndarray
    basis: np.ndarray
    dm: np.ndarray
    dx: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.net.n_intervals

    @property
    def dt(self) -> float:
        return float(self.net.dt[0])

    @property
    def alphabet(self) -> int:
        return len(self.outcomes)

    @property
    def scales(self) -> np.ndarray:
        """Signed ``sqrt(mass * dt)`` per mark: ``dm[:, k] = scales[k] * basis[k + 1]``."""
        signs = [1.0 if m == 0 else math.copysign(1.0, m) for m in self.marks.marks]
        return np.asarray(signs) * np.sqrt(self.marks.mass_array * self.dt)

    @classmethod
    def build(cls, model: LevyModel, n_steps: int, coarse=None) -> "TreeModel":
        if not 1 <= n_steps <= MAX_STEPS:
            raise ValueError(f"n_steps must be in 1..{MAX_STEPS}")
        marks = derive_mark_measure(model)
        if 1 + len(marks) > MAX_ALPHABET:
            raise ValueError(f"at most {MAX_ALPHABET - 1} atoms supported on the tree")
        net = TimeNet.equidistant(n_steps, model.horizon, coarse)
        dt = float(net.dt[0])
        p_jump = [lam * dt / (1 + lam * dt) for _, lam in model.jump_atoms]
        rest = 1.0 - sum(p_jump)
        if rest <= 0:
            raise ValueError("jump probabilities exhaust the step; use more steps")
        labels, probs = [], []
        if model.sigma > 0:
            labels += ["up", "down"]
            probs += [rest / 2, rest / 2]
        else:
            labels.append("none")
            probs.append(rest)
        labels += [f"jump_{j}" for j in range(len(p_jump))]
        probs += p_jump
        q = np.asarray(probs)
        a = len(q)
        inner = lambda u, v: float(np.sum(q * u * v))  # noqa: E731
        rows = [np.ones(a)]
        if model.sigma > 0:
            e = np.zeros(a)
            e[0], e[1] = 1.0, -1.0
            rows.append(e / math.sqrt(inner(e, e)))
        off = 2 if model.sigma > 0 else 1
        for j in range(len(p_jump)):
            v = np.zeros(a)
            v[off + j] = 1.0
            for r in rows:
                v = v - inner(v, r) * r
            rows.append(v / math.sqrt(inner(v, v)))
        basis = np.stack(rows)
        tree = cls(model, net, marks, tuple(labels), q, basis, np.zeros((a, len(marks))), np.zeros(a))
        dm = (tree.scales[:, None] * basis[1:]).T
        dx = model.gamma * dt + dm.sum(axis=1)
        tree = cls(model, net, marks, tuple(labels), q, basis, dm, dx)
        tree.check_moments()
        return tree

    def check_moments(self, tol: float = 1e-12):
        """Per-step mean ``gamma dt`` and variance ``mu(R) dt``."""
        mean = float(self.probs @ self.dx)
        var = float(self.probs @ (self.dx - mean) ** 2)
        if abs(mean - self.model.gamma * self.dt) > tol * (1 + abs(mean)):
            raise AssertionError("tree increments miss the drift")
        if abs(var - self.marks.total * self.dt) > tol * (1 + var):
            raise AssertionError("tree increments miss the variance")
        gram = (self.basis * self.probs) @ self.basis.T
        if not np.allclose(gram, np.eye(self.alphabet), atol=1e-12):
            raise AssertionError("step basis is not orthonormal")

    # -- enumeration -----------------------------------------------------------
    def outcome_matrix(self, steps: int | None = None) -> np.ndarray:
        n = self.n_steps if steps is None else steps
        if n == 0:
            return np.zeros((1, 0), dtype=int)
        return np.indices((self.alphabet,) * n).reshape(n, -1).T

    def leaves(self) -> DrivingPaths:
        """All leaves as driving paths (C-order over outcomes of steps 1..n)."""
        o = self.outcome_matrix()
        dm = self.dm[o]  # (L, n, K)
        x = np.zeros((o.shape[0], self.n_steps + 1))
        x[:, 1:] = np.cumsum(self.dx[o], axis=1)
        return DrivingPaths(self.net, self.marks, x, dm, self.model.gamma)

    def leaf_probs(self) -> np.ndarray:
        return np.prod(self.probs[self.outcome_matrix()], axis=1)

    def x_nodes(self, step: int) -> np.ndarray:
        x = np.zeros(())
        for _ in range(step):
            x = x[..., None] + self.dx
        return x

    def sample(self, n_paths: int, seed: int) -> DrivingPaths:
        """Independent skeleton paths drawn from the tree law."""
        o = np.empty((n_paths, self.n_steps), dtype=int)
        for b, start, stop in blocks(n_paths):
            for i in range(self.n_steps):
                o[start:stop, i] = keyed_generator(seed, "tree", i, b).choice(self.alphabet, size=stop - start, p=self.probs)
        x = np.zeros((n_paths, self.n_steps + 1))
        x[:, 1:] = np.cumsum(self.dx[o], axis=1)
        return DrivingPaths(self.net, self.marks, x, self.dm[o], self.model.gamma)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "net": self.net.to_dict(),
            "outcomes": list(self.outcomes),
            "probs": self.probs.tolist(),
            "dm": self.dm.tolist(),
            "dx": self.dx.tolist(),
        }


# -- exact operations -------------------------------------------------------------

def as_tensor(tree: TreeModel, values) -> np.ndarray:
    """Leaf values (flat, tensor, callable on leaves or terminal condition) as a full tensor."""
    if isinstance(values, TerminalCondition):
        values = values.evaluate(tree.leaves())
    elif callable(values):
        values = values(tree.leaves())
    v = np.asarray(values, dtype=float)
    shape = (tree.alphabet,) * tree.n_steps
    if v.ndim < tree.n_steps and v.shape == shape[: v.ndim]:
        v = np.broadcast_to(v.reshape(v.shape + (1,) * (tree.n_steps - v.ndim)), shape)
    return v.reshape(shape)


def exact_conditional_expectation(tree: TreeModel, values, step: int) -> np.ndarray:
    """``E[values | F_step]`` as a tensor over the first ``step`` outcomes."""
    if not 0 <= step <= tree.n_steps:
        raise ValueError(f"step {step} outside 0..{tree.n_steps}")
    v = as_tensor(tree, values)
    for _ in range(tree.n_steps - step):
        v = v @ tree.probs
    return np.array(v)


@dataclass
class TreeSolution:
    """Per-node ``Y`` (``y[i]`` has shape ``(A,)*i``), ``Zbar`` and per-mark ``Z``."""

    tree: TreeModel
    y: list[np.ndarray]
    z_bar: list[np.ndarray]
    z: list[np.ndarray]

    @property
    def y0(self) -> float:
        return float(self.y[0])

    @property
    def zbar0(self) -> float:
        return float(self.z_bar[0])


def exact_bsde(tree: TreeModel, gen: Generator, xi, tol: float = 1e-14, max_iter: int = 500) -> TreeSolution:
    """Backward induction with the implicit ``Y`` step solved by fixed point."""
    dt = tree.dt
    if dt * gen.lipschitz_L >= 1:
        raise StepTooLargeError(f"dt * L_f = {dt * gen.lipschitz_L:.3g} >= 1")
    n = tree.n_steps
    masses = tree.marks.mass_array
    kappa = gen.kappa_vector(tree.marks)
    ys: list[np.ndarray] = [None] * (n + 1)
    zs: list[np.ndarray] = [None] * n
    zbars: list[np.ndarray] = [None] * n
    ys[n] = as_tensor(tree, xi)
    pts = tree.net.points
    for i in range(n - 1, -1, -1):
        nxt = ys[i + 1]
        ey = nxt @ tree.probs
        z = np.stack([nxt @ (tree.probs * tree.dm[:, k]) / (masses[k] * dt) for k in range(len(masses))], axis=-1)
        zb = z @ (kappa * masses)
        x = tree.x_nodes(i)
        y = np.array(ey, dtype=float)
        for _ in range(max_iter):
            new = ey + dt * gen(pts[i], x, y, zb)
            done = np.max(np.abs(new - y)) <= tol * (1 + np.max(np.abs(new)))
            y = new
            if done:
                break
        ys[i], zs[i], zbars[i] = np.asarray(y), z, np.asarray(zb)
    return TreeSolution(tree, ys, zbars, zs)


def chaos_coefficients(tree: TreeModel, values) -> np.ndarray:
    """Tensor ``C[b_1..b_n] = E[V prod e_{b_l}(o_l)]`` (``b = 0`` is the constant)."""
    c = as_tensor(tree, values)
    w = (tree.basis * tree.probs).T  # (A_outcome, A_basis)
    for ax in range(tree.n_steps):
        c = np.moveaxis(np.tensordot(c, w, axes=([ax], [0])), -1, ax)
    return c


def chaos_project(tree: TreeModel, values, max_level: int | None = None, step: int | None = None,
                  tol: float = 1e-12) -> tuple[ChaosKernelSet, dict]:
    """Discrete chaos of ``values`` as a kernel set on the tree's step partition.

    Returns the kernel set and structure flags relative to the tree net's
    coarse partition: ``vanish`` (no coefficient involves a step at or after
    ``step``) and ``cuboid_constant`` (coefficients agree on all cells of a
    coarse cuboid).  ``step`` defaults to the last step.
    """
    n = tree.n_steps
    max_level = n if max_level is None else max_level
    if not 0 <= max_level <= n:
        raise ValueError(f"level {max_level} beyond n_steps={n}")
    step = n if step is None else step
    c = chaos_coefficients(tree, values)
    scale = tol * (1.0 + math.sqrt(float(np.sum(c * c))))
    scales = tree.scales
    levels: dict[int, dict] = {0: {(): float(c[(0,) * n])}}
    coarse_of = np.searchsorted(np.asarray(tree.net.coarse_partition), tree.net.array[1:] - 1e-12)
    vanish = True
    groups: dict[tuple, list[float]] = {}
    for idx in np.ndindex(*c.shape):
        support = [(l, b) for l, b in enumerate(idx) if b]
        if not support:
            continue
        lvl = len(support)
        a = c[idx] / math.prod(scales[b - 1] for _, b in support)
        if any(l >= step for l, _ in support):
            if abs(c[idx]) > scale:
                vanish = False
            continue
        key = tuple(sorted((int(coarse_of[l]), b) for l, b in support))
        groups.setdefault(key, []).append(a)
        if lvl <= max_level and abs(c[idx]) > scale:
            cell = tuple((l + 1, b - 1) for l, b in support)
            levels.setdefault(lvl, {})[cell] = a / math.factorial(lvl)
    a_max = max((max(abs(x) for x in v) for v in groups.values()), default=0.0)
    const = all(max(v) - min(v) <= 1e-10 * (1.0 + a_max) for v in groups.values())
    kernel = ChaosKernelSet(tree.net.points, tree.marks, levels)
    return kernel, {"vanish": vanish, "cuboid_constant": const}


def derivative(tree: TreeModel, values, step: int, mark: int) -> np.ndarray:
    """Discrete ``D_{t,x}`` for ``t`` in step ``step`` (0-based) by sub-tree reweighting."""
    v = as_tensor(tree, values)
    w = tree.probs * tree.basis[mark + 1] / tree.scales[mark]
    d = np.tensordot(v, w, axes=([step], [0]))
    return np.broadcast_to(np.expand_dims(d, step), v.shape)


def commutation_check(tree: TreeModel, values, tol: float = 1e-12) -> dict:
    """``D_l E_j V = E_j D_l V`` for ``l < j`` and ``D_l E_j V = 0`` for ``l >= j``; returns worst gaps."""
    v = as_tensor(tree, values)
    worst_eq, worst_zero = 0.0, 0.0
    for j in range(tree.n_steps + 1):
        ej = as_tensor(tree, exact_conditional_expectation(tree, v, j))
        for l in range(tree.n_steps):
            for k in range(len(tree.marks)):
                lhs = derivative(tree, ej, l, k)
                if l < j:
                    rhs = as_tensor(tree, exact_conditional_expectation(tree, derivative(tree, v, l, k), j))
                    worst_eq = max(worst_eq, float(np.max(np.abs(lhs - rhs))))
                else:
                    worst_zero = max(worst_zero, float(np.max(np.abs(lhs))))
    scale = tol * (1 + float(np.max(np.abs(v))))
    return {"max_gap": worst_eq, "max_after": worst_zero, "passed": worst_eq <= scale and worst_zero <= scale}


def parseval_gap(tree: TreeModel, values) -> float:
    """``|sum n! ||f_n||^2 - E V^2|`` with all levels kept."""
    v = as_tensor(tree, values)
    kernel, _ = chaos_project(tree, v, tol=0.0)
    second = float(tree.leaf_probs() @ v.reshape(-1) ** 2)
    return abs(chaos_norm_sq(kernel) - second)
