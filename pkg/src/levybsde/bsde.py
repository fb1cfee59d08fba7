"""Backward least-squares Monte Carlo solver for the BSDE

    Y_t = xi + int_t^T f(s, X_s, Y_s, Zbar_s) ds - int_t^T int Z_{s,x} M(ds, dx),
    Zbar_s = int Z_{s,x} kappa'(x) mu(dx).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chaos import ChaosKernelSet
from .levy import DrivingPaths, LevyModel, MarkMeasure, PathBundle, TimeNet
from .regression import RegressionSpec, projector

Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class StepTooLargeError(ValueError):
    """Raised when ``dt * L_f >= 1`` so the implicit step is not a contraction."""


# -- terminal conditions -----------------------------------------------------------

@dataclass(frozen=True)
class TerminalCondition:
    """Terminal value ``xi`` in functional or kernel form.

    Functional form: ``func`` maps the ``(n, len(times))`` array of ``X`` at
    ``times`` to ``(n,)`` values.  Kernel form: ``kernel`` is evaluated from
    the ``M`` increments.
    """

    func: Callable[[np.ndarray], np.ndarray] | None = None
    times: tuple[float, ...] = ()
    kernel: ChaosKernelSet | None = None
    name: str = "custom"

    def __post_init__(self):
        if (self.func is None) == (self.kernel is None):
            raise ValueError("give exactly one of func or kernel")
        if self.func is not None and not self.times:
            raise ValueError("functional form needs the times it depends on")

    @classmethod
    def of_x(cls, g: Callable[[np.ndarray], np.ndarray], times: Sequence[float], name: str = "custom") -> "TerminalCondition":
        return cls(func=g, times=tuple(float(t) for t in times), name=name)

    def evaluate(self, driving: DrivingPaths) -> np.ndarray:
        if self.kernel is not None:
            return self.kernel.evaluate_paths(driving)
        return self.evaluate_x(driving.x, driving.net)

    def evaluate_x(self, x: np.ndarray, net: TimeNet) -> np.ndarray:
        if self.func is None:
            raise ValueError("kernel-form terminal conditions are evaluated from M increments")
        idx = [net.index(t) for t in self.times]
        return np.asarray(self.func(x[:, idx]), dtype=float)

    def state(self, driving: DrivingPaths, i: int) -> np.ndarray:
        """``F_{t_i}``-measurable variables on which ``E_{t_i}`` is regressed."""
        net = driving.net
        t_i = net.points[i]
        cols = []
        if self.kernel is not None:
            idx = [net.index(r) for r in self.kernel.partition]
            for a in range(1, self.kernel.m + 1):
                lo, hi = idx[a - 1], min(idx[a], i)
                if hi > lo:
                    cols.extend(driving.dm[:, lo:hi, j].sum(axis=1) for j in range(len(driving.marks)))
            if not cols:
                cols.append(driving.x[:, i])
            # X_{t_i} is the sum of these columns plus drift, so it is not added
        else:
            cols.extend(driving.x[:, net.index(r)] for r in self.times if r < t_i)
            cols.append(driving.x[:, i])
        return np.stack(cols, axis=1)


# -- generators -------------------------------------------------------------------

@dataclass(frozen=True)
class Generator:
    """Driver ``f(t, x, y, zbar)`` with declared Lipschitz constant.

    Attributes:
        f: Vectorized driver.
        lipschitz_L: Declared ``L_f``.
        kappa_prime: Map mark -> ``kappa'(mark)``; ``None`` means 1 on every atom.
        grad: Optional ``(t, x, y, z) -> (f_x, f_y, f_z)``.
    """

    f: Driver
    lipschitz_L: float
    kappa_prime: dict[float, float] | None = None
    grad: Callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t, x, y, z):
        return np.broadcast_to(np.asarray(self.f(t, x, y, z), dtype=float), np.shape(y))

    def kappa_vector(self, marks: MarkMeasure) -> np.ndarray:
        return marks.weight_vector(self.kappa_prime, default=1.0 if self.kappa_prime is None else 0.0)

    def gradient(self, t, x, y, z, eps: float = 1e-6):
        if self.grad is not None:
            return tuple(np.broadcast_to(np.asarray(g, dtype=float), np.shape(y)) for g in self.grad(t, x, y, z))
        fx = (self(t, x + eps, y, z) - self(t, x - eps, y, z)) / (2 * eps)
        fy = (self(t, x, y + eps, z) - self(t, x, y - eps, z)) / (2 * eps)
        fz = (self(t, x, y, z + eps) - self(t, x, y, z - eps)) / (2 * eps)
        return fx, fy, fz

    def validate(self, rng: np.random.Generator, n_pairs: int = 10_000, scale: float = 10.0) -> float:
        """Spot-check the declared Lipschitz constant in ``(y, z)``; returns the worst ratio."""
        t = rng.random(n_pairs)
        x = rng.normal(0, scale, n_pairs)
        y1, y2, z1, z2 = rng.normal(0, scale, (4, n_pairs))
        num = np.abs(self(t, x, y1, z1) - self(t, x, y2, z2))
        den = np.abs(y1 - y2) + np.abs(z1 - z2)
        ratio = float(np.max(num / den))
        if ratio > self.lipschitz_L * (1 + 1e-9) + 1e-12:
            raise ValueError(f"generator {self.name!r} violates L={self.lipschitz_L}: observed ratio {ratio:.4g}")
        return ratio


def make_generator(name: str, kappa_prime: dict | None = None, **p) -> Generator:
    """Built-in drivers.

    ``zero``; ``constant`` (c); ``linear`` (a*y + b*z + c); ``sine``
    (a*sin(y) + b*sin(z) + c*cos(x)); ``clipped`` (a*clip(x, -K, K) + b*y).
    """
    if name == "zero":
        return Generator(lambda t, x, y, z: 0.0, 0.0, kappa_prime, lambda t, x, y, z: (0.0, 0.0, 0.0), name, p)
    if name == "constant":
        c = float(p.get("c", 1.0))
        return Generator(lambda t, x, y, z: c, 0.0, kappa_prime, lambda t, x, y, z: (0.0, 0.0, 0.0), name, p)
    if name == "linear":
        a, b, c = (float(p.get(k, d)) for k, d in (("a", -1.0), ("b", 0.0), ("c", 0.0)))
        return Generator(
            lambda t, x, y, z: a * y + b * z + c, max(abs(a), abs(b)), kappa_prime,
            lambda t, x, y, z: (0.0, a, b), name, p,
        )
    if name == "sine":
        a, b, c = (float(p.get(k, d)) for k, d in (("a", 0.5), ("b", 0.5), ("c", 0.0)))
        return Generator(
            lambda t, x, y, z: a * np.sin(y) + b * np.sin(z) + c * np.cos(x), max(abs(a), abs(b)), kappa_prime,
            lambda t, x, y, z: (-c * np.sin(x), a * np.cos(y), b * np.cos(z)), name, p,
        )
    if name == "clipped":
        a, b, k = (float(p.get(q, d)) for q, d in (("a", 1.0), ("b", -0.5), ("K", 2.0)))
        return Generator(
            lambda t, x, y, z: a * np.clip(x, -k, k) + b * y, abs(b), kappa_prime,
            lambda t, x, y, z: (a * (np.abs(x) < k), b, 0.0), name, p,
        )
    raise ValueError(f"unknown generator {name!r}")


# -- solutions -----------------------------------------------------------------------

@dataclass
class BsdeSolution:
    """Per-path solution arrays.

    Attributes:
        y: ``(n_paths, n_points)``.
        z_bar: ``(n_paths, n_intervals)``; ``z_bar[:, i]`` belongs to ``]t_i, t_{i+1}]``.
        z: Optional ``(n_paths, n_intervals, n_marks)`` per-atom ``Z``.
        diagnostics: Condition numbers, basis sizes, fixed-point histories, SEs.
    """

    driving: DrivingPaths
    y: np.ndarray
    z_bar: np.ndarray
    z: np.ndarray | None
    terminal: TerminalCondition
    spec: RegressionSpec
    diagnostics: dict = field(default_factory=dict)

    @property
    def net(self) -> TimeNet:
        return self.driving.net

    def state(self, i: int) -> np.ndarray:
        return self.terminal.state(self.driving, i)

    @property
    def y0(self) -> float:
        return float(self.y[0, 0])

    @property
    def zbar0(self) -> float:
        return float(self.z_bar[0, 0])

    def s_norm_sq(self) -> float:
        return float(np.mean(np.max(self.y**2, axis=1)))

    def h_norm_sq(self) -> float:
        dt = self.net.dt
        if self.z is not None:
            per = np.sum(self.z**2 * self.driving.marks.mass_array, axis=2)
        else:
            per = self.z_bar**2
        return float(np.sum(dt * per.mean(axis=0)))

    def to_csv(self, max_paths: int | None = None) -> str:
        """``path,time,Y,Zbar``; Zbar at ``T`` is left empty."""
        buf = io.StringIO()
        buf.write("path,time,Y,Zbar\n")
        n = self.y.shape[0] if max_paths is None else min(max_paths, self.y.shape[0])
        pts = self.net.points
        for p in range(n):
            for i, t in enumerate(pts):
                zb = f"{self.z_bar[p, i]:.17g}" if i < len(pts) - 1 else ""
                buf.write(f"{p},{t:.17g},{self.y[p, i]:.17g},{zb}\n")
        return buf.getvalue()


def as_driving(bundle: PathBundle | DrivingPaths) -> DrivingPaths:
    return bundle if isinstance(bundle, DrivingPaths) else bundle.driving()


def _check_step(dt: np.ndarray, lipschitz: float):
    if len(dt) == 0:
        return
    worst = float(np.max(dt)) * lipschitz
    if worst >= 1:
        raise StepTooLargeError(f"max dt * L_f = {worst:.3g} >= 1; use a finer net")


def backward_scheme(
    driving: DrivingPaths,
    terminal_values: np.ndarray,
    state_fn: Callable[[int], np.ndarray],
    driver: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
    kappa: np.ndarray,
    spec: RegressionSpec,
    lipschitz: float,
    store_z: bool = True,
    i_stop: int = 0,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, dict]:
    """Implicit backward regression scheme shared by all solvers.

    ``driver(i, y, zbar)`` returns ``f`` on step ``i``.  Steps ``i < i_stop``
    are left at zero.
    """
    net = driving.net
    dt = net.dt
    _check_step(dt[i_stop:], lipschitz)
    n, n_int = driving.n_paths, net.n_intervals
    masses = driving.marks.mass_array
    y = np.zeros((n, n_int + 1))
    y[:, -1] = terminal_values
    z_bar = np.zeros((n, n_int))
    z = np.zeros((n, n_int, len(masses))) if store_z else None
    g = np.array(terminal_values, dtype=float)  # xi + sum dt f along the solution
    diag = {"cond": [None] * n_int, "basis_size": [None] * n_int, "fp_iterations": [None] * n_int,
            "fp_residuals": [None] * n_int, "rank_deficient_steps": [],
            "z_noise": np.zeros((n_int, len(masses)))}
    for i in range(n_int - 1, i_stop - 1, -1):
        proj = projector(state_fn(i), spec, where=f"step {i} (t={net.points[i]:.6g})")
        y_next = y[:, i + 1]
        ey = proj(y_next)
        resid = y_next - ey
        target = resid[:, None] * driving.dm[:, i, :] / (masses * dt[i])
        zk = proj(target)
        zb = zk @ (kappa * masses)
        yy = ey.copy()
        hist = []
        for _ in range(max_iter):
            new = ey + dt[i] * driver(i, yy, zb)
            r = float(np.max(np.abs(new - yy)))
            hist.append(r)
            yy = new
            if r <= tol * (1.0 + float(np.max(np.abs(yy)))):
                break
        y[:, i] = yy
        if i == i_stop:
            # SE of the whole path functional: later regression noise propagates into Zbar
            i1 = driving.dm[:, i, :] @ kappa
            diag["zbar_se"] = float(np.std((g - g.mean()) * i1 / dt[i]) / np.sqrt(n))
        g += yy - ey
        z_bar[:, i] = zb
        if z is not None:
            z[:, i, :] = zk
            diag["z_noise"][i] = proj.fitted_variance(target)
        diag["cond"][i] = proj.cond
        diag["basis_size"][i] = proj.size
        diag["fp_iterations"][i] = len(hist)
        diag["fp_residuals"][i] = hist
        if proj.rank_deficient:
            diag["rank_deficient_steps"].append(i)
        if i == i_stop:
            diag["y_se"] = float(np.std(g) / np.sqrt(n))
    return y, z_bar, z, diag


def solve_backward(
    model: LevyModel | None,
    net: TimeNet,
    gen: Generator,
    xi: TerminalCondition,
    bundle: PathBundle | DrivingPaths,
    basis: RegressionSpec = RegressionSpec(),
    store_z: bool = True,
) -> BsdeSolution:
    """Backward dynamic programming with regression conditional expectations.

    Per step: ``E_i Y_{i+1}`` by regression, ``Z_x`` by regressing
    ``(Y_{i+1} - E_i Y_{i+1}) M_x / (mu_x dt)``, ``Zbar = sum kappa' mu_x Z_x``,
    and ``Y_i = E_i Y_{i+1} + dt f(t_i, X_i, Y_i, Zbar_i)`` by fixed point.
    """
    driving = as_driving(bundle)
    if driving.net != net:
        raise ValueError("bundle was not simulated on this net")
    if model is not None and model.mark_measure() != driving.marks:
        raise ValueError("bundle does not match the model")
    kappa = gen.kappa_vector(driving.marks)
    pts = net.points
    x = driving.x

    def driver(i, y, zb):
        return gen(pts[i], x[:, i], y, zb)

    y, z_bar, z, diag = backward_scheme(
        driving, xi.evaluate(driving), lambda i: xi.state(driving, i), driver, kappa, basis,
        gen.lipschitz_L, store_z,
    )
    return BsdeSolution(driving, y, z_bar, z, xi, basis, diag)


def batch_standard_errors(
    model: LevyModel | None,
    net: TimeNet,
    gen: Generator,
    xi: TerminalCondition,
    bundle: PathBundle | DrivingPaths,
    basis: RegressionSpec = RegressionSpec(),
    n_batches: int = 20,
) -> dict:
    """Batch-means SEs of ``Y_0`` and ``Zbar_0``.

    The solver is re-run on ``n_batches`` contiguous disjoint path blocks;
    the SE of the full-sample estimate is ``std(batch estimates)/sqrt(B)``.
    Unlike single-run formulas this includes regression noise carried back
    from later steps.
    """
    driving = as_driving(bundle)
    if n_batches < 2:
        raise ValueError("need at least 2 batches")
    edges = np.linspace(0, driving.n_paths, n_batches + 1).astype(int)
    ys, zs = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sol = solve_backward(model, net, gen, xi, driving.take(int(a), int(b)), basis, store_z=False)
        ys.append(sol.y0)
        zs.append(sol.zbar0)
    root = np.sqrt(n_batches)
    return {"y0_se": float(np.std(ys, ddof=1) / root), "zbar0_se": float(np.std(zs, ddof=1) / root),
            "n_batches": n_batches}


def zbar_estimator(driving: DrivingPaths, eta: np.ndarray, s: float, a: float, kappa: np.ndarray) -> np.ndarray:
    """Per-path ``eta * I_1(1_{]s,a]} kappa') / (a - s)``."""
    if a <= s:
        raise ValueError("need s < a")
    i, j = driving.net.index(s), driving.net.index(a)
    i1 = driving.dm[:, i:j, :].sum(axis=1) @ np.asarray(kappa)
    return eta * i1 / (a - s)


def picard_solve(
    model: LevyModel | None,
    net: TimeNet,
    gen: Generator,
    xi: TerminalCondition,
    bundle: PathBundle | DrivingPaths,
    iterations: int,
    basis: RegressionSpec = RegressionSpec(),
) -> list[BsdeSolution]:
    """Picard iterates started at ``(Y, Zbar) = (0, 0)``.

    ``Y^{k+1}_i`` regresses ``xi + sum_{j>=i} dt_j f(Y^k_j, Zbar^k_j)``;
    ``Zbar^{k+1}_i`` regresses the same functional times ``I_1`` over the step.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    driving = as_driving(bundle)
    if driving.net != net:
        raise ValueError("bundle was not simulated on this net")
    _check_step(net.dt, gen.lipschitz_L)
    kappa = gen.kappa_vector(driving.marks)
    masses = driving.marks.mass_array
    dt, pts = net.dt, net.points
    n, n_int = driving.n_paths, net.n_intervals
    xi_vals = xi.evaluate(driving)
    projs = [projector(xi.state(driving, i), basis, where=f"step {i}") for i in range(n_int)]
    y_k = np.zeros((n, n_int + 1))
    zb_k = np.zeros((n, n_int))
    out = []
    for _ in range(iterations):
        f_vals = np.stack([gen(pts[j], driving.x[:, j], y_k[:, j], zb_k[:, j]) for j in range(n_int)], axis=1)
        y_new = np.zeros_like(y_k)
        zb_new = np.zeros_like(zb_k)
        z_new = np.zeros((n, n_int, len(masses)))
        y_new[:, -1] = xi_vals
        g_next = xi_vals.copy()
        for i in range(n_int - 1, -1, -1):
            eg = projs[i](g_next)
            zk = projs[i]((g_next - eg)[:, None] * driving.dm[:, i, :]) / (masses * dt[i])
            z_new[:, i] = zk
            zb_new[:, i] = zk @ (kappa * masses)
            y_new[:, i] = eg + dt[i] * f_vals[:, i]
            g_next = g_next + dt[i] * f_vals[:, i]
        diag = {"y_se": float(np.std(g_next - dt[0] * f_vals[:, 0]) / np.sqrt(n))}
        out.append(BsdeSolution(driving, y_new, zb_new, z_new, xi, basis, diag))
        y_k, zb_k = y_new, zb_new
    return out


def stability_gap(
    sol: BsdeSolution,
    sol2: BsdeSolution,
    xi_vals: np.ndarray,
    xi2_vals: np.ndarray,
    gen: Generator,
    gen2: Generator,
) -> dict:
    """Empirical sides of the stability estimate; the constant is only reported.

    ``lhs = ||Y - Y'||_S^2 + ||Z - Z'||_H^2``; the right side terms are
    ``||xi - xi'||^2`` and ``int E|f(s, X, Y', Zbar') - f'(s, X, Y', Zbar')|^2 ds``.
    """
    if sol.net != sol2.net or sol.y.shape != sol2.y.shape:
        raise ValueError("solutions live on different nets or bundles")
    dt, pts = sol.net.dt, sol.net.points
    s_term = float(np.mean(np.max((sol.y - sol2.y) ** 2, axis=1)))
    if sol.z is not None and sol2.z is not None:
        per = np.sum((sol.z - sol2.z) ** 2 * sol.driving.marks.mass_array, axis=2)
    else:
        per = (sol.z_bar - sol2.z_bar) ** 2
    h_term = float(np.sum(dt * per.mean(axis=0)))
    xi_term = float(np.mean((xi_vals - xi2_vals) ** 2))
    x = sol2.driving.x
    f_term = 0.0
    for i in range(sol.net.n_intervals):
        d = gen(pts[i], x[:, i], sol2.y[:, i], sol2.z_bar[:, i]) - gen2(pts[i], x[:, i], sol2.y[:, i], sol2.z_bar[:, i])
        f_term += dt[i] * float(np.mean(d**2))
    lhs = s_term + h_term
    rhs = xi_term + f_term
    return {"lhs": lhs, "s_term": s_term, "h_term": h_term, "rhs_terms": (xi_term, f_term),
            "ratio": lhs / rhs if rhs > 0 else float("nan")}
