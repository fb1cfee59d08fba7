"""Malliavin derivatives of path functionals and the linearised BSDE.

Jump directions use the difference quotient ``(Phi(X + v 1_{[r,T]}) - Phi(X)) / v``;
the Brownian direction uses a central difference of step ``h``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .bsde import BsdeSolution, Generator, TerminalCondition, as_driving, backward_scheme
from .levy import DrivingPaths, LevyModel, PathBundle, TimeNet
from .regression import projector


@dataclass(frozen=True)
class PerturbationSpec:
    """Perturbation time ``r``, direction ``v`` (0 is Brownian) and FD step ``h``."""

    r: float
    v: float
    h: float = 1e-4

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("r must be >= 0")
        if self.v == 0 and not self.h > 0:
            raise ValueError("h must be positive for the Brownian direction")


def _check_direction(driving: DrivingPaths, spec: PerturbationSpec):
    if not spec.r <= driving.net.horizon:
        raise ValueError("r beyond the horizon")
    driving.marks.index(float(spec.v))


def perturbed(driving: DrivingPaths, r: float, v: float, mark: float) -> DrivingPaths:
    """Paths with a deterministic extra jump of size ``v`` at time ``r`` charged to ``mark``."""
    net = driving.net
    x = driving.shifted(r, v)
    dm = np.array(driving.dm)
    i = int(np.searchsorted(net.array, r, side="left")) - 1
    if i >= 0:
        dm[:, i, driving.marks.index(float(mark))] += v
    return DrivingPaths(net, driving.marks, x, dm, driving.gamma)


def difference_quotient(phi: TerminalCondition, bundle: PathBundle | DrivingPaths, spec: PerturbationSpec) -> np.ndarray:
    """``(Phi(X + v 1_{[r,T]}) - Phi(X)) / v`` per path."""
    if spec.v == 0:
        raise ValueError("v = 0 is the Brownian direction; use brownian_direction_derivative")
    driving = as_driving(bundle)
    _check_direction(driving, spec)
    base = phi.evaluate(driving)
    return (phi.evaluate(perturbed(driving, spec.r, spec.v, spec.v)) - base) / spec.v


def brownian_direction_derivative(phi: TerminalCondition, bundle: PathBundle | DrivingPaths, spec: PerturbationSpec) -> np.ndarray:
    """``(Phi(X + h 1_{[r,T]}) - Phi(X - h 1_{[r,T]})) / (2h)`` per path."""
    driving = as_driving(bundle)
    if 0.0 not in driving.marks.marks:
        raise ValueError("model has no Brownian part (sigma = 0)")
    h = spec.h
    up = phi.evaluate(perturbed(driving, spec.r, h, 0.0))
    down = phi.evaluate(perturbed(driving, spec.r, -h, 0.0))
    return (up - down) / (2 * h)


def malliavin_derivative(phi: TerminalCondition, driving: DrivingPaths, spec: PerturbationSpec) -> np.ndarray:
    if spec.v == 0:
        return brownian_direction_derivative(phi, driving, spec)
    return difference_quotient(phi, driving, spec)


def solve_uv(
    model: LevyModel | None,
    net: TimeNet,
    gen: Generator,
    xi: TerminalCondition,
    bundle: PathBundle | DrivingPaths,
    spec: PerturbationSpec,
    base: BsdeSolution | None,
) -> BsdeSolution:
    """Solve the BSDE for ``(U^{r,v}, Vbar^{r,v})`` on net points ``t >= r``.

    The driver is the difference quotient of ``f`` along the perturbed
    solution for ``v != 0`` and its gradient for ``v = 0``.  ``U = 0`` and
    ``Vbar = 0`` before ``r``.
    """
    if base is None:
        raise ValueError("solve_uv needs the base solution on the same bundle")
    driving = as_driving(bundle)
    if base.driving is not driving and base.driving.x.shape != driving.x.shape:
        raise ValueError("base solution was computed on another bundle")
    _check_direction(driving, spec)
    v = spec.v
    terminal = malliavin_derivative(xi, driving, spec)
    pts = net.points
    x, y, zb = driving.x, base.y, base.z_bar
    i_r = int(np.searchsorted(net.array, spec.r - 1e-12 * net.horizon, side="left"))
    if i_r >= net.n_intervals:
        i_r = net.n_intervals

    if v != 0:
        def driver(i, u, vb):
            f0 = gen(pts[i], x[:, i], y[:, i], zb[:, i])
            return (gen(pts[i], x[:, i] + v, y[:, i] + v * u, zb[:, i] + v * vb) - f0) / v
    else:
        grads = {}

        def driver(i, u, vb):
            if i not in grads:
                grads[i] = gen.gradient(pts[i], x[:, i], y[:, i], zb[:, i])
            fx, fy, fz = grads[i]
            return fx + fy * u + fz * vb

    kappa = gen.kappa_vector(driving.marks)
    u, vbar, vz, diag = backward_scheme(
        driving, terminal, lambda i: xi.state(driving, i), driver, kappa, base.spec,
        gen.lipschitz_L, store_z=True, i_stop=min(i_r, net.n_intervals),
    )
    u[:, :i_r] = 0.0
    diag["r"], diag["v"], diag["first_index"] = spec.r, v, i_r
    return BsdeSolution(driving, u, vbar, vz, xi, base.spec, diag)


def uv_grid(model, net, gen, xi, bundle, base: BsdeSolution, h: float = 1e-4) -> dict[tuple[int, float], BsdeSolution]:
    """``U^{r,v}`` for ``r = t_{i+1}`` (a jump inside ``]t_i, t_{i+1}]``) and every atom ``v``."""
    driving = as_driving(bundle)
    out = {}
    for i in range(net.n_intervals):
        for v in driving.marks.marks:
            out[(i, v)] = solve_uv(model, net, gen, xi, driving, PerturbationSpec(net.points[i + 1], v, h), base)
    return out


def z_from_diagonal(uv: dict[tuple[int, float], BsdeSolution], bundle: PathBundle | DrivingPaths) -> np.ndarray:
    """``(n_paths, n_intervals, n_marks)`` estimate of ``Z`` from ``U^{t_{i+1}, v}_{t_{i+1}}``.

    The value at ``t_{i+1}`` is projected on ``F_{t_i}`` by the base regression basis.
    """
    driving = as_driving(bundle)
    net = driving.net
    marks = driving.marks.marks
    z = np.zeros((driving.n_paths, net.n_intervals, len(marks)))
    for i in range(net.n_intervals):
        proj = None
        for k, v in enumerate(marks):
            if (i, v) not in uv:
                raise KeyError(f"missing grid point (interval {i}, v={v})")
            sol = uv[(i, v)]
            if proj is None:
                proj = projector(sol.state(i), sol.spec, where=f"step {i}")
            z[:, i, k] = proj(sol.y[:, i + 1])
    return z


def clark_ocone_check(phi: TerminalCondition, bundle: PathBundle | DrivingPaths, spec=None, h: float = 1e-4) -> dict:
    """Rebuild ``Phi`` from ``E Phi + sum p(D Phi) M`` and report the residual.

    ``p(D Phi)`` on ``]t_i, t_{i+1}]`` is the regression of the derivative
    (perturbation at ``t_{i+1}``) on the ``F_{t_i}`` state.
    """
    from .regression import RegressionSpec

    spec = spec or RegressionSpec()
    driving = as_driving(bundle)
    net = driving.net
    g = phi.evaluate(driving)
    n = driving.n_paths
    recon = np.full(n, g.mean())
    for i in range(net.n_intervals):
        proj = projector(phi.state(driving, i), spec, where=f"step {i}")
        for k, v in enumerate(driving.marks.marks):
            d = malliavin_derivative(phi, driving, PerturbationSpec(net.points[i + 1], v, h))
            recon += proj(d) * driving.dm[:, i, k]
    res = g - recon
    return {
        "mean": float(res.mean()),
        # mean(res) = -mean(S) for the integral sum S, whose paths are iid
        "se": float((recon - g.mean()).std() / np.sqrt(n)),
        "l2": float(np.sqrt(np.mean(res**2))),
        "n_paths": n,
        "n_intervals": net.n_intervals,
    }


def clark_ocone_refinement(phi: TerminalCondition, bundle: PathBundle | DrivingPaths, steps=(4, 16), spec=None) -> list[dict]:
    """Clark–Ocone residuals on nested equidistant sub-nets of the bundle's net."""
    driving = as_driving(bundle)
    out = []
    for n in steps:
        sub = TimeNet.equidistant(n, driving.net.horizon)
        rep = clark_ocone_check(phi, driving.coarsen(sub), spec)
        out.append(rep)
    return out


def derivative_grid_csv(uv: dict[tuple[int, float], BsdeSolution]) -> str:
    """``r,v,time,mean_U,SE`` rows for every grid point and net time ``>= r``."""
    buf = io.StringIO()
    buf.write("r,v,time,mean_U,SE\n")
    for (i, v), sol in sorted(uv.items()):
        pts = sol.net.points
        r = sol.diagnostics["r"]
        n = sol.y.shape[0]
        for j in range(sol.diagnostics["first_index"], len(pts)):
            col = sol.y[:, j]
            buf.write(f"{r:.17g},{v:.17g},{pts[j]:.17g},{col.mean():.17g},{col.std() / np.sqrt(n):.17g}\n")
    return buf.getvalue()
