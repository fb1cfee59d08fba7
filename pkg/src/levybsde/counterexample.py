"""Series where condition (iv) holds for every exponent while (iii) fails.

With ``xi = sum I_n(beta_n (n!)^{-1/2} p_n^{(x) n})`` on ``T = 1, m = 1`` and
an orthonormal basis ``(p_n)`` of ``L2(mu)``, only the numbers ``beta_n`` and
the time arguments enter, so no basis is materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG2_BOUND = 1.0 / math.log(2.0) ** 2


@dataclass(frozen=True)
class CounterexampleSpec:
    """Coefficients ``beta_1^2 = 1, beta_2^2 = 0, beta_n^2 = 1/(n log^2(n-1))``.

    Attributes:
        truncation: Fixed number of terms, or ``None`` to pick one per ``s``.
        tail_tol: Required bound on the neglected tail.
    """

    truncation: int | None = None
    tail_tol: float = 1e-10

    @staticmethod
    def beta_sq(n: np.ndarray) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        out = np.zeros_like(n)
        out[n == 1] = 1.0
        big = n >= 3
        out[big] = 1.0 / (n[big] * np.log(n[big] - 1) ** 2)
        return out

    def tail_bound(self, s: float, n: int) -> float:
        """Bound on ``sum_{k>n} k beta_k^2 s^{k-1}`` using ``k beta_k^2 <= 1/log^2 n``."""
        if s == 0:
            return 0.0
        return math.exp(n * math.log(s)) / ((1 - s) * math.log(n) ** 2)

    def terms_needed(self, s: float) -> int:
        if self.truncation is not None:
            if self.tail_bound(s, self.truncation) >= self.tail_tol:
                raise ValueError(f"truncation {self.truncation} leaves a tail above {self.tail_tol} at s={s}")
            return self.truncation
        n = 16
        while self.tail_bound(s, n) >= self.tail_tol:
            n *= 2
        lo, hi = n // 2, n
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.tail_bound(s, mid) < self.tail_tol:
                hi = mid
            else:
                lo = mid
        return max(hi, 3)


def asymptotic(s: float) -> float:
    """Comparator ``1/((1-s)(1-log(1-s))^2)``."""
    return 1.0 / ((1 - s) * (1 - math.log1p(-s)) ** 2)


def counterexample_series(spec: CounterexampleSpec, s: float) -> tuple[float, float]:
    """Return ``(sum n beta_n^2 s^{n-1}, asymptotic(s))``."""
    if not 0 <= s < 1:
        raise ValueError("need 0 <= s < 1")
    n_terms = spec.terms_needed(s)
    n = np.arange(1, n_terms + 1, dtype=float)
    w = n * spec.beta_sq(n)
    if s == 0:
        return float(w[0]), asymptotic(s)
    powers = np.exp((n - 1) * math.log(s))
    return float(np.sum(w * powers)), asymptotic(s)


def ratio_table(spec: CounterexampleSpec, s_values=(0.9, 0.99, 0.999, 0.9999)) -> list[dict]:
    rows = []
    for s in s_values:
        z, a = counterexample_series(spec, s)
        rows.append({"s": s, "series": z, "asymptotic": a, "ratio": z / a, "terms": spec.terms_needed(s)})
    return rows


def condition_iv_quantity(alpha: np.ndarray, s: float, t: float) -> float:
    """``sum_{n>=3} alpha_n^2 (t^{n-1} - s^{n-1}) / log^2(n-1)`` for weights ``alpha_1, alpha_2, ...``."""
    if not 0 <= s <= t <= 1:
        raise ValueError("need 0 <= s <= t <= 1")
    a = np.asarray(alpha, dtype=float)
    n = np.arange(1, a.size + 1, dtype=float)
    sel = n >= 3
    n, a = n[sel], a[sel]
    tp = np.power(t, n - 1)
    sp = np.power(s, n - 1)
    return float(np.sum(a * a * (tp - sp) / np.log(n - 1) ** 2))


def iv_bound_trials(rng: np.random.Generator, n_trials: int = 1000, length: int = 200) -> dict:
    """Random unit weight vectors and time pairs; records the largest (iv) value."""
    worst = 0.0
    exceed = 0
    n = np.arange(length)
    for _ in range(n_trials):
        # random decay rate: many trials put most weight on low n, near the bound
        a = rng.standard_normal(length) * np.exp(-rng.uniform(0.0, 3.0) * n)
        a /= np.linalg.norm(a)
        s, t = sorted((rng.random() ** 3, 1.0 - rng.random() ** 3))
        q = condition_iv_quantity(a, s, t)
        worst = max(worst, q)
        exceed += q > LOG2_BOUND
    return {"trials": n_trials, "max_value": worst, "bound": LOG2_BOUND, "exceedances": int(exceed)}


def iii_log_excess(thetas, u_grid) -> dict[float, np.ndarray]:
    """``log(comparator / (1-s)^{theta-1})`` at ``s = 1 - exp(-u)``, evaluated in log space.

    Equals ``theta u - 2 log(1 + u)``, which is unbounded in ``u`` for every
    ``theta > 0``: no constant ``c_3`` bounds the (iii) quantity.
    """
    u = np.asarray(u_grid, dtype=float)
    return {float(th): th * u - 2 * np.log1p(u) for th in thetas}
