"""L2-regularity curves, exponent fits, coupled-resampling and rate experiments."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bsde import BsdeSolution, Generator, TerminalCondition, as_driving, solve_backward
from .levy import LevyModel, PathBundle, TimeNet, resample_window, simulate
from .regression import RegressionSpec, projector

CONDITIONS = ("i", "ii", "iii", "iv")


@dataclass
class Curve:
    """Sampled curve of one regularity condition on interval ``k``.

    ``s``/``t`` hold the grid (``t`` equals ``s`` for one-point conditions).
    """

    condition: str
    k: int
    r_k: float
    s: np.ndarray
    t: np.ndarray
    value: np.ndarray
    se: np.ndarray
    excluded: list = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [(self.condition, self.k, float(a), float(b), float(v), float(e))
                for a, b, v, e in zip(self.s, self.t, self.value, self.se)]

    def positive(self) -> "Curve":
        keep = self.value > 0
        return Curve(self.condition, self.k, self.r_k, self.s[keep], self.t[keep], self.value[keep], self.se[keep], self.excluded)


def curves_csv(curves: Sequence[Curve]) -> str:
    buf = io.StringIO()
    buf.write("condition,k,s,t,estimate,SE\n")
    for c in curves:
        for row in c.rows():
            buf.write(f"{row[0]},{row[1]},{row[2]:.17g},{row[3]:.17g},{row[4]:.17g},{row[5]:.17g}\n")
    return buf.getvalue()


def _interval(sol: BsdeSolution, k: int) -> tuple[float, float]:
    return sol.net.coarse_interval(k)


def _check_grid(sol: BsdeSolution, k: int, times, right_open: bool = False):
    lo, hi = _interval(sol, k)
    for s in times:
        if not lo <= s <= hi or (right_open and s >= hi):
            raise ValueError(f"{s} outside the interval [{lo}, {hi}{'[' if right_open else ']'}")


def condition_i(sol: BsdeSolution, k: int, s_grid: Sequence[float]) -> Curve:
    """``E|Y_{r_k} - E_s Y_{r_k}|^2`` with ``E_s`` by regression."""
    _check_grid(sol, k, s_grid)
    net = sol.net
    r_k = _interval(sol, k)[1]
    y_rk = sol.y[:, net.index(r_k)]
    vals, ses = [], []
    n = y_rk.size
    for s in s_grid:
        i = net.index(s)
        if s == r_k:
            vals.append(0.0)
            ses.append(0.0)
            continue
        res2 = (y_rk - projector(sol.state(i), sol.spec)(y_rk)) ** 2
        vals.append(res2.mean())
        ses.append(res2.std() / math.sqrt(n))
    s = np.asarray(s_grid, dtype=float)
    return Curve("i", k, r_k, s, s, np.asarray(vals), np.asarray(ses))


def condition_ii(sol: BsdeSolution, k: int, pairs: Sequence[tuple[float, float]]) -> Curve:
    """``E|Y_t - Y_s|^2`` on pairs ``s <= t``."""
    net = sol.net
    r_k = _interval(sol, k)[1]
    vals, ses = [], []
    for s, t in pairs:
        _check_grid(sol, k, (s, t))
        if s > t:
            raise ValueError("pairs need s <= t")
        d2 = (sol.y[:, net.index(t)] - sol.y[:, net.index(s)]) ** 2
        vals.append(d2.mean())
        ses.append(d2.std() / math.sqrt(d2.size))
    p = np.asarray(pairs, dtype=float).reshape(-1, 2)
    return Curve("ii", k, r_k, p[:, 0], p[:, 1], np.asarray(vals), np.asarray(ses))


def _need_z(sol: BsdeSolution):
    if sol.z is None:
        raise ValueError("per-atom Z estimates are required (solve with store_z=True)")


def condition_iii(sol: BsdeSolution, k: int, s_grid: Sequence[float]) -> Curve:
    """``E int Z_{s,x}^2 mu(dx)`` at net points ``s`` in ``[r_{k-1}, r_k[``."""
    _need_z(sol)
    _check_grid(sol, k, s_grid, right_open=True)
    net = sol.net
    masses = sol.driving.marks.mass_array
    bad = set(sol.diagnostics.get("rank_deficient_steps", []))
    keep, vals, ses, excluded = [], [], [], []
    for s in s_grid:
        i = net.index(s)
        if i in bad:
            excluded.append(float(s))
            continue
        q = np.sum(sol.z[:, i, :] ** 2 * masses, axis=1)
        keep.append(s)
        vals.append(q.mean())
        ses.append(q.std() / math.sqrt(q.size))
    s = np.asarray(keep, dtype=float)
    return Curve("iii", k, _interval(sol, k)[1], s, s, np.asarray(vals), np.asarray(ses), excluded)


def condition_iv(sol: BsdeSolution, k: int, pairs: Sequence[tuple[float, float]], h) -> Curve:
    """``E|int (Z_{t,x} - Z_{s,x}) h(x) mu(dx)|^2`` on pairs in ``[r_{k-1}, r_k[``."""
    _need_z(sol)
    marks = sol.driving.marks
    hv = marks.weight_vector(h)
    if marks.l2_norm_sq(hv) == 0:
        raise ValueError("h has zero L2(mu) norm")
    net = sol.net
    w = hv * marks.mass_array
    bad = set(sol.diagnostics.get("rank_deficient_steps", []))
    ss, ts, vals, ses, excluded = [], [], [], [], []
    for s, t in pairs:
        _check_grid(sol, k, (s, t), right_open=True)
        if s > t:
            raise ValueError("pairs need s <= t")
        i, j = net.index(s), net.index(t)
        if i in bad or j in bad:
            excluded.append((float(s), float(t)))
            continue
        d2 = ((sol.z[:, j, :] - sol.z[:, i, :]) @ w) ** 2
        ss.append(s)
        ts.append(t)
        vals.append(d2.mean())
        ses.append(d2.std() / math.sqrt(d2.size))
    return Curve("iv", k, _interval(sol, k)[1], np.asarray(ss, float), np.asarray(ts, float),
                 np.asarray(vals), np.asarray(ses), excluded)


# -- exponent fits ---------------------------------------------------------------

def rate_shape(condition: str, theta: float, s: np.ndarray, t: np.ndarray, r_k: float) -> np.ndarray:
    """Rate shapes of the four conditions (without constants)."""
    a = r_k - np.asarray(s, dtype=float)
    b = r_k - np.asarray(t, dtype=float)
    if condition == "i":
        return a**theta
    if condition == "ii":
        return (a**theta - b**theta) / theta
    if condition == "iii":
        return a ** (theta - 1.0)
    if condition == "iv":
        if abs(1.0 - theta) < 1e-12:
            return np.log(a / b)
        return (b ** (theta - 1.0) - a ** (theta - 1.0)) / (1.0 - theta)
    raise ValueError(f"unknown condition {condition!r}")


@dataclass(frozen=True)
class FitResult:
    theta: float
    ci: tuple[float, float]
    r2: float
    log_c: float
    sse: float
    n_points: int

    def to_dict(self) -> dict:
        return {"theta": self.theta, "ci": list(self.ci), "r2": self.r2, "log_c": self.log_c,
                "sse": self.sse, "n_points": self.n_points}


def _golden(fun, lo: float, hi: float, tol: float) -> float:
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fun(d)
    return (a + b) / 2


def fit_theta(curve: Curve, condition: str | None = None, lo: float = 0.05, hi: float = 1.0, tol: float = 1e-3) -> FitResult:
    """Least-squares fit of ``log value = log c + log shape(theta)``.

    ``log c`` is profiled out; ``theta`` is found by golden-section search on
    ``[lo, hi]`` (endpoints are compared as well).  The confidence interval is
    the set of ``theta`` whose SSE stays below ``SSE_min (1 + 3.84/(n-2))``.
    """
    cond = condition or curve.condition
    v = np.asarray(curve.value, dtype=float)
    if v.size < 5:
        raise ValueError("need at least 5 curve points")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("curve values must be positive")
    logv = np.log(v)

    def profile(theta: float) -> tuple[float, float]:
        shape = rate_shape(cond, theta, curve.s, curve.t, curve.r_k)
        if np.any(shape <= 0) or not np.all(np.isfinite(shape)):
            return float("inf"), float("nan")
        resid = logv - np.log(shape)
        c = float(resid.mean())
        return float(np.sum((resid - c) ** 2)), c

    theta = _golden(lambda th: profile(th)[0], lo, hi, tol)
    best = min((theta, lo, hi), key=lambda th: profile(th)[0])
    sse, log_c = profile(best)
    n = v.size
    limit = sse * (1 + 3.84 / max(n - 2, 1))
    scan = np.linspace(lo, hi, int(round((hi - lo) / tol)) + 1)
    ok = [th for th in scan if profile(th)[0] <= limit] + [best]
    sst = float(np.sum((logv - logv.mean()) ** 2))
    r2 = 1 - sse / sst if sst > 0 else 1.0
    return FitResult(float(best), (float(min(ok)), float(max(ok))), float(r2), log_c, sse, n)


# -- reports -----------------------------------------------------------------------

def default_grids(net: TimeNet, k: int) -> dict:
    """Net-point grids in interval ``k``: one-point grids and pairs ``(r_{k-1}, t)``."""
    lo, hi = net.coarse_interval(k)
    pts = [p for p in net.points if lo <= p <= hi]
    return {
        "s_i": pts[:-1],
        "s_iii": pts[:-1],
        "pairs_ii": [(lo, t) for t in pts[1:]],
        "pairs_iv": [(lo, t) for t in pts[1:-1]],
    }


@dataclass
class RegularityReport:
    curves: list[Curve]
    fits: dict

    def to_dict(self) -> dict:
        return {"fits": {f"{c}:{k}": r.to_dict() if isinstance(r, FitResult) else r for (c, k), r in self.fits.items()},
                "curves": [{"condition": c.condition, "k": c.k, "excluded": c.excluded, "points": len(c.value)} for c in self.curves]}

    def to_csv(self) -> str:
        return curves_csv(self.curves)


def regularity_report(sol: BsdeSolution, ks: Sequence[int] | None = None, h=None) -> RegularityReport:
    """Curves and fitted exponents of all four conditions on each interval."""
    net = sol.net
    ks = list(ks or range(1, net.m + 1))
    hv = sol.driving.marks.weight_vector(h, default=1.0)
    curves, fits = [], {}
    for k in ks:
        g = default_grids(net, k)
        for c in (condition_i(sol, k, g["s_i"]), condition_ii(sol, k, g["pairs_ii"]),
                  condition_iii(sol, k, g["s_iii"]), condition_iv(sol, k, g["pairs_iv"], hv)):
            curves.append(c)
            try:
                fits[(c.condition, k)] = fit_theta(c.positive())
            except ValueError as exc:
                fits[(c.condition, k)] = {"error": str(exc)}
    return RegularityReport(curves, fits)


# -- sufficient condition experiment ----------------------------------------------

@dataclass
class SuffCondResult:
    theta_xi: FitResult
    theta_y: FitResult
    xi_curve: Curve
    y_curve: Curve
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.theta_y.theta >= self.theta_xi.theta - self.tolerance

    def to_dict(self) -> dict:
        return {"theta_xi": self.theta_xi.to_dict(), "theta_y": self.theta_y.to_dict(),
                "tolerance": self.tolerance, "passed": self.passed}


def resampling_curve(xi: TerminalCondition, bundle: PathBundle, k: int, t_grid: Sequence[float], seed2: int) -> Curve:
    """``E|xi - xi^{t, r_k}|^2`` from coupled paths."""
    net = bundle.net
    r_k = net.coarse_interval(k)[1]
    base = xi.evaluate(bundle.driving())
    vals, ses = [], []
    for t in t_grid:
        other = xi.evaluate(resample_window(bundle, t, r_k, seed2).driving())
        d2 = (base - other) ** 2
        vals.append(d2.mean())
        ses.append(d2.std() / math.sqrt(d2.size))
    tg = np.asarray(t_grid, dtype=float)
    return Curve("i", k, r_k, tg, tg, np.asarray(vals), np.asarray(ses))


def suffcond_experiment(
    model: LevyModel,
    net: TimeNet,
    gen: Generator,
    xi: TerminalCondition,
    bundle: PathBundle,
    k: int,
    t_grid: Sequence[float],
    seed2: int = 1,
    basis: RegressionSpec = RegressionSpec(),
    tolerance: float = 0.15,
    sol: BsdeSolution | None = None,
) -> SuffCondResult:
    """Fit exponents of ``||xi - xi^{t,r_k}||^2`` and ``||Y_{r_k} - E_t Y_{r_k}||^2``."""
    if not isinstance(bundle, PathBundle):
        raise TypeError("window resampling needs a PathBundle")
    sol = sol or solve_backward(model, net, gen, xi, bundle, basis, store_z=False)
    xi_curve = resampling_curve(xi, bundle, k, t_grid, seed2)
    y_curve = condition_i(sol, k, t_grid)
    return SuffCondResult(fit_theta(xi_curve), fit_theta(y_curve), xi_curve, y_curve, tolerance)


def coupling_identity(
    sol: BsdeSolution,
    bundle: PathBundle,
    k: int,
    t_grid: Sequence[float],
    seed2: int,
    gen: Generator,
) -> list[dict]:
    """``2||Y_{r_k} - E_t Y_{r_k}||^2`` against ``||Y_{r_k} - Y^{t,r_k}_{r_k}||^2`` from a coupled re-solve.

    The two agree for ``f = 0`` and ``F_{r_k}``-measurable ``xi``.  Each
    side comes with its own SE; ``gap_in_se`` uses their root sum of squares.
    """
    net = sol.net
    r_k = net.coarse_interval(k)[1]
    j = net.index(r_k)
    y = sol.y[:, j]
    n = y.size
    cond = condition_i(sol, k, t_grid)
    out = []
    for t, v, se in zip(cond.s, cond.value, cond.se):
        other = solve_backward(None, net, gen, sol.terminal, resample_window(bundle, float(t), r_k, seed2), sol.spec, store_z=False)
        d2 = (y - other.y[:, j]) ** 2
        rhs, rhs_se = float(d2.mean()), float(d2.std() / math.sqrt(n))
        err = math.hypot(2 * se, rhs_se)
        out.append({"t": float(t), "r_k": r_k, "twice_residual": 2 * float(v), "twice_residual_se": 2 * float(se),
                    "coupled": rhs, "coupled_se": rhs_se, "gap_in_se": float(abs(2 * v - rhs) / err) if err > 0 else 0.0})
    return out


# -- discretization error ----------------------------------------------------------

@dataclass(frozen=True)
class ErrorFunctionals:
    n: int
    mesh: float
    err_tau: float
    err_y: float
    err_z: float
    var_2: float
    z_floor: float

    def to_dict(self) -> dict:
        return {"n": self.n, "mesh": self.mesh, "err_tau": self.err_tau, "err_y": self.err_y,
                "err_z": self.err_z, "var_2": self.var_2, "z_floor": self.z_floor}


def _coarse_maps(fine: TimeNet, coarse: TimeNet):
    fp, cp = fine.array, coarse.array
    point_map = np.searchsorted(cp, fp, side="right") - 1  # [t_{i-1}, t_i) convention
    point_map[-1] = coarse.n_intervals
    interval_map = np.searchsorted(cp, fp[:-1], side="right") - 1
    return point_map, interval_map


def reference_z_floor(ref: BsdeSolution) -> float:
    """``int E||Zhat_t - Z_t||^2 dt`` of the reference's own regression noise (leverage estimate)."""
    noise = ref.diagnostics.get("z_noise")
    if noise is None:
        return 0.0
    return float(np.sum(ref.net.dt * (np.asarray(noise) @ ref.driving.marks.mass_array)))


def error_against_reference(ref: BsdeSolution, coarse_sol: BsdeSolution, n_paths: int) -> tuple[float, float]:
    """``sup_t E|Y_t - Ybar_t|^2`` and ``int E||Z_t - Zbar_t||^2 dt`` with piecewise-constant coarse values.

    The Z term is returned raw; subtract :func:`reference_z_floor` to remove
    the reference's regression noise.
    """
    fine, coarse = ref.net, coarse_sol.net
    pm, im = _coarse_maps(fine, coarse)
    masses = ref.driving.marks.mass_array
    ey = np.max(np.mean((ref.y[:n_paths, 1:] - coarse_sol.y[:, pm[1:]]) ** 2, axis=0))
    dz = ref.z[:n_paths] - coarse_sol.z[:, im, :]
    ez = float(np.sum(fine.dt * np.mean(np.sum(dz**2 * masses, axis=2), axis=0)))
    return float(ey), ez


def l2_variation(ref: BsdeSolution, coarse: TimeNet) -> float:
    """``var_2`` of the reference solution over ``coarse``.

    ``Zbar`` is the regression of the interval-averaged reference ``Z`` on
    ``F_{t_{i-1}}``; the reference noise floor is removed from the Z term.
    """
    fine = ref.net
    if not fine.refines(coarse):
        raise ValueError("reference net does not refine the coarse net")
    masses = ref.driving.marks.mass_array
    idx = [fine.index(t) for t in coarse.points]
    y_part = 0.0
    z_part = 0.0
    for i in range(coarse.n_intervals):
        a, b = idx[i], idx[i + 1]
        y0 = ref.y[:, a]
        for j in range(a + 1, b + 1):
            y_part = max(y_part, math.sqrt(float(np.mean((ref.y[:, j] - y0) ** 2))))
        avg = np.tensordot(fine.dt[a:b], ref.z[:, a:b, :], axes=([0], [1])) / (coarse.dt[i])
        zbar = projector(ref.state(a), ref.spec)(avg)
        for j in range(a, b):
            z_part += fine.dt[j] * float(np.mean(np.sum((ref.z[:, j, :] - zbar) ** 2 * masses, axis=1)))
    return y_part + math.sqrt(max(z_part - reference_z_floor(ref), 0.0))


def discretization_error(
    model: LevyModel,
    gen: Generator,
    xi: TerminalCondition,
    nets: Sequence[int],
    reference: int,
    n_paths: int,
    seed: int,
    basis: RegressionSpec = RegressionSpec(),
    ref_factor: int = 4,
    threads: int = 1,
) -> dict:
    """``Err_{tau,2}`` and ``var_2`` for equidistant nets against a fine reference.

    The reference uses ``ref_factor * n_paths`` paths; coarse solutions reuse
    the first ``n_paths`` of them with increments summed onto the coarse net.
    The Z error has the reference's regression-noise floor removed (clamped
    at 0); the subtracted floor is reported as ``z_floor``.  A half-resolution reference
    is compared with the full one to report the surrogate's own bias.
    """
    T = model.horizon
    ref_net = TimeNet.equidistant(reference, T)
    for n in nets:
        if reference % n:
            raise ValueError(f"net with {n} steps is not nested in the reference with {reference}")
    bundle = simulate(model, ref_net, ref_factor * n_paths, seed, threads)
    driving = bundle.driving()
    del bundle
    ref = solve_backward(model, ref_net, gen, xi, driving, basis)
    floor = reference_z_floor(ref)
    rows = []
    for n in nets:
        net = TimeNet.equidistant(n, T)
        sol = solve_backward(model, net, gen, xi, driving.head(n_paths).coarsen(net), basis)
        ey, ez = error_against_reference(ref, sol, n_paths)
        ez = max(ez - floor, 0.0)
        rows.append(ErrorFunctionals(n, T / n, math.sqrt(ey + ez), ey, ez, l2_variation(ref, net), floor))
    half_net = TimeNet.equidistant(reference // 2, T)
    half = solve_backward(model, half_net, gen, xi, driving.coarsen(half_net), basis)
    hy, hz = error_against_reference(ref, half, driving.n_paths)
    hz = max(hz - floor, 0.0)
    mesh = np.array([r.mesh for r in rows])
    err = np.array([r.err_tau for r in rows])
    slope = float(np.polyfit(np.log(mesh), np.log(err), 1)[0]) if len(rows) >= 2 else float("nan")
    return {"rows": rows, "slope": slope, "reference_bias": math.sqrt(hy + hz), "reference": reference,
            "n_paths": n_paths, "ref_paths": driving.n_paths}


def error_table_csv(result: dict) -> str:
    buf = io.StringIO()
    buf.write("n,mesh,err_tau,err_y,err_z,var_2,z_floor\n")
    for r in result["rows"]:
        buf.write(f"{r.n},{r.mesh:.17g},{r.err_tau:.17g},{r.err_y:.17g},{r.err_z:.17g},{r.var_2:.17g},{r.z_floor:.17g}\n")
    return buf.getvalue()
