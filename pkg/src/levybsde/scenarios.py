"""Built-in experiment scenarios; each acceptance criterion ships as one."""

from __future__ import annotations

import copy
from dataclasses import dataclass

from .config import ExperimentConfig, validate

# three-atom mark measure: Brownian part plus two jump sizes
THREE_ATOMS = {"gamma": 0.1, "sigma": 1.0, "jump_atoms": [[1.0, 1.0], [-0.5, 2.0]], "horizon": 1.0}
ONE_JUMP = {"gamma": 0.1, "sigma": 1.0, "jump_atoms": [[1.0, 1.0]], "horizon": 1.0}


@dataclass(frozen=True)
class Scenario:
    name: str
    criterion: int | None
    description: str
    config: dict

    @property
    def kind(self) -> str:
        return self.config["kind"]

    def build(self) -> ExperimentConfig:
        cfg = copy.deepcopy(self.config)
        cfg.setdefault("name", self.name)
        return validate(cfg)


_SCENARIOS = [
    Scenario("chaos-increment-bounds", 1,
             "Increment and pointwise bounds of the derivative projections on 100 random kernel sets",
             {"kind": "chaos-checks", "seed": 101, "model": THREE_ATOMS, "net": {"n": 2, "coarse": 2},
              "params": {"n_kernels": 100, "max_level": 4, "density": 0.6, "parts": ["increment"]},
              "tolerances": {"quad_rel": 1e-8}}),
    Scenario("chaos-derivative-bounds", 2,
             "Two-sided bounds between the derivative norm and the resampling quotient sup",
             {"kind": "chaos-checks", "seed": 101, "model": THREE_ATOMS, "net": {"n": 2, "coarse": 2},
              "params": {"n_kernels": 100, "max_level": 4, "density": 0.6, "parts": ["bounds"], "grid": 1000, "grid_rel": 1e-6}}),
    Scenario("resampling-identity", 3,
             "Symbolic resampling distance identity and coupled-path estimate for X_T",
             {"kind": "chaos-checks", "seed": 303, "model": THREE_ATOMS, "net": {"n": 8, "coarse": 2}, "n_paths": 100_000,
              "params": {"n_kernels": 100, "parts": ["identity"]},
              "tolerances": {"identity_rel": 1e-12, "se_multiple": 3.0}}),
    Scenario("counterexample", 4,
             "Series against asymptotic ratio and the condition (iv) bound over random unit weights",
             {"kind": "counterexample", "seed": 404, "params": {"s_values": [0.9, 0.99, 0.999, 0.9999], "trials": 1000},
              "tolerances": {"ratio_interval": [1.0, 6.0]}}),
    Scenario("oracle-equivalence", 5,
             "Regression solver against the exact tree for f = 0, f = 1.5 and f = -y",
             {"kind": "oracle-validate", "seed": 505, "model": ONE_JUMP, "n_paths": 100_000,
              "terminal": {"type": "x", "power": 2},
              "params": {"n_steps": 6, "coarse": [0.0, 0.5, 1.0]}, "tolerances": {"se_multiple": 3.0}}),
    Scenario("malliavin-consistency", 6,
             "Diagonal of the derivative BSDE against regression Zbar, difference quotients and Clark-Ocone",
             {"kind": "solve", "seed": 5, "model": {"gamma": 0.0, "sigma": 1.0, "jump_atoms": [[1.0, 2.0]], "horizon": 1.0},
              "net": {"n": 8}, "generator": {"name": "linear", "params": {"a": -1.0}},
              "terminal": {"type": "x", "power": 2}, "n_paths": 100_000,
              "params": {"malliavin": True, "h": 1e-4}, "tolerances": {"se_multiple": 3.0, "dq_abs": 1e-12}}),
    Scenario("rate-lipschitz", 7,
             "Err_{tau,2} for max(X_T, 0) on nets 4..32 against a 256-step reference",
             {"kind": "rates", "seed": 707, "model": THREE_ATOMS, "generator": {"name": "zero"},
              "terminal": {"type": "call", "strike": 0.0}, "n_paths": 20_000,
              "params": {"nets": [4, 8, 16, 32], "reference": 256, "ref_factor": 4},
              "tolerances": {"slope_range": [0.35, 0.65]}}),
    Scenario("regularity-x-terminal", 8,
             "Fitted exponents of the four regularity conditions for xi = X_T",
             {"kind": "regularity", "seed": 808, "model": THREE_ATOMS, "net": {"n": 32, "coarse": 2},
              "generator": {"name": "zero"}, "terminal": {"type": "x"}, "n_paths": 100_000,
              "tolerances": {"theta_range": [0.85, 1.0], "iv_slack": 0.15}}),
    Scenario("suffcond-digital", 9,
             "Resampling exponent of a two-digital terminal condition against the exponent of Y",
             {"kind": "suffcond", "seed": 909, "model": {"gamma": 0.0, "sigma": 1.0, "jump_atoms": [[1.0, 1.0]], "horizon": 1.0},
              "net": {"n": 32, "coarse": 2}, "generator": {"name": "sine", "params": {"a": 0.5, "b": 0.5}},
              "terminal": {"type": "digital", "times": [0.5, 1.0], "threshold": 0.0}, "n_paths": 100_000,
              "basis": {"kind": "spline", "knots": 12}, "params": {"k": 1}, "tolerances": {"theta_slack": 0.15}}),
    Scenario("solve-smoke", 10,
             "Small solve with per-path output, used for determinism across thread counts",
             {"kind": "solve", "seed": 1010, "model": THREE_ATOMS, "net": {"n": 8, "coarse": 2},
              "generator": {"name": "sine"}, "terminal": {"type": "call", "strike": 0.0}, "n_paths": 20_000,
              "params": {"max_paths_csv": 50}}),
    Scenario("suffcond-coupling", None,
             "Resampling coupling identity for an F_{r_1}-measurable call under f = 0",
             {"kind": "suffcond", "seed": 1212, "model": ONE_JUMP, "net": {"n": 16, "coarse": 2},
              "generator": {"name": "zero"}, "terminal": {"type": "call", "time": 0.5, "strike": 0.0}, "n_paths": 50_000,
              "params": {"k": 1}, "tolerances": {"theta_slack": 0.15, "se_multiple": 3.0}}),
    Scenario("regularity-call", None,
             "Regularity curves for a call payoff under a clipped driver",
             {"kind": "regularity", "seed": 1111, "model": THREE_ATOMS, "net": {"n": 16, "coarse": 2},
              "generator": {"name": "clipped"}, "terminal": {"type": "call", "strike": 0.5}, "n_paths": 50_000}),
]

SCENARIOS: dict[str, Scenario] = {s.name: s for s in _SCENARIOS}


def list_scenarios(kind: str | None = None) -> list[Scenario]:
    return [s for s in _SCENARIOS if kind is None or s.kind == kind]


def get(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}") from None
