"""Experiment configuration: parsing, field-level validation and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bsde import Generator, TerminalCondition, make_generator
from .chaos import ChaosKernelSet
from .levy import LevyModel, TimeNet
from .regression import RegressionSpec

KINDS = ("solve", "regularity", "suffcond", "rates", "chaos-checks", "counterexample", "oracle-validate")
GENERATORS = ("zero", "constant", "linear", "sine", "clipped")
TERMINALS = ("x", "call", "digital", "linear", "kernel")

# fields every kind needs besides ``kind`` and ``seed``
REQUIRED = {
    "solve": ("model", "net", "generator", "terminal", "n_paths"),
    "regularity": ("model", "net", "generator", "terminal", "n_paths"),
    "suffcond": ("model", "net", "generator", "terminal", "n_paths"),
    "rates": ("model", "generator", "terminal", "n_paths"),
    "chaos-checks": ("model", "net"),
    "counterexample": (),
    "oracle-validate": ("model",),
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{f}: {m}" for f, m in errors))


class ConfigParseError(ValueError):
    """Malformed JSON with its location."""

    def __init__(self, msg: str, line: int, column: int):
        self.line, self.column = line, column
        super().__init__(f"{msg} at line {line}, column {column}")


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    Attributes:
        kind: One of :data:`KINDS`.
        seed: Root seed for every random draw of the run.
        name: Free label used in the summary.
        model: ``{"gamma", "sigma", "jump_atoms": [[x, lambda], ...], "horizon"}``.
        net: ``{"n", "coarse"}`` (equidistant) or ``{"points", "coarse_partition"}``.
        generator: ``{"name", "params", "kappa_prime": [[mark, value], ...]}``.
        terminal: ``{"type", ...}``; see :func:`build_terminal`.
        n_paths: Monte Carlo sample size.
        basis: :class:`RegressionSpec` fields.
        params: Kind-specific settings.
        tolerances: Acceptance tolerances checked by the run.
        output: ``{"dir": ...}`` default output directory.
    """

    kind: str
    seed: int
    name: str = ""
    model: dict | None = None
    net: dict | None = None
    generator: dict | None = None
    terminal: dict | None = None
    n_paths: int | None = None
    basis: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # -- builders ----------------------------------------------------------------
    def build_model(self) -> LevyModel:
        return build_model(self.model)

    def build_net(self) -> TimeNet:
        return build_net(self.net, self.build_model().horizon)

    def build_generator(self) -> Generator:
        return build_generator(self.generator)

    def build_terminal(self) -> TerminalCondition:
        return build_terminal(self.terminal, self.build_model().horizon)

    def build_basis(self) -> RegressionSpec:
        return RegressionSpec(**self.basis)


def parse_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(exc.msg, exc.lineno, exc.colno) from None


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return validate(parse_json(fh.read()))


def build_model(d: dict) -> LevyModel:
    return LevyModel(
        gamma=float(d.get("gamma", 0.0)),
        sigma=float(d.get("sigma", 1.0)),
        jump_atoms=tuple(tuple(a) for a in d.get("jump_atoms", ())),
        horizon=float(d.get("horizon", 1.0)),
    )


def build_net(d: dict, horizon: float) -> TimeNet:
    if "points" in d:
        net = TimeNet(tuple(d["points"]), tuple(d.get("coarse_partition", ())))
        if net.horizon != horizon:
            raise ValueError(f"net ends at {net.horizon}, model horizon is {horizon}")
        return net
    return TimeNet.equidistant(int(d["n"]), horizon, d.get("coarse", 1))


def build_generator(d: dict) -> Generator:
    kp = d.get("kappa_prime")
    kappa = {float(m): float(v) for m, v in kp} if kp else None
    return make_generator(d["name"], kappa, **d.get("params", {}))


def build_terminal(d: dict, horizon: float) -> TerminalCondition:
    """Terminal condition families.

    ``x``: ``X_time ** power``; ``call``: ``max(X_time - strike, 0)``;
    ``digital``: ``sum_j 1{X_{t_j} > threshold}``; ``linear``:
    ``sum_j w_j X_{t_j}``; ``kernel``: a serialized chaos kernel set.
    """
    kind = d["type"]
    if kind == "kernel":
        return TerminalCondition(kernel=ChaosKernelSet.from_dict(d["kernel"]), name=d.get("name", "kernel"))
    if kind == "x":
        p = float(d.get("power", 1.0))
        return TerminalCondition.of_x(lambda x: x[:, 0] ** p, [d.get("time", horizon)], d.get("name", f"x^{p:g}"))
    if kind == "call":
        k = float(d.get("strike", 0.0))
        return TerminalCondition.of_x(lambda x: np.maximum(x[:, 0] - k, 0.0), [d.get("time", horizon)], d.get("name", "call"))
    if kind == "digital":
        thr = float(d.get("threshold", 0.0))
        return TerminalCondition.of_x(lambda x: np.sum(x > thr, axis=1).astype(float), d.get("times", [horizon]), d.get("name", "digital"))
    if kind == "linear":
        w = np.asarray(d["weights"], dtype=float)
        return TerminalCondition.of_x(lambda x: x @ w, d["times"], d.get("name", "linear"))
    raise ValueError(f"unknown terminal type {kind!r}")


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(raw: Any) -> ExperimentConfig:
    """Check a decoded JSON object and return the config; collects every field error."""
    errs: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "expected a JSON object")])
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in raw:
        if key not in known:
            errs.append((key, "unknown field"))
    kind = raw.get("kind")
    if kind not in KINDS:
        errs.append(("kind", f"must be one of {', '.join(KINDS)}"))
    seed = raw.get("seed")
    if seed is None:
        errs.append(("seed", "is mandatory"))
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errs.append(("seed", "must be a non-negative integer"))
    for key in REQUIRED.get(kind, ()):
        if raw.get(key) is None:
            errs.append((key, f"required for kind {kind!r}"))
    usable = {}
    for key in ("model", "net", "generator", "terminal", "basis", "params", "tolerances", "output"):
        if raw.get(key) is not None and not isinstance(raw[key], dict):
            errs.append((key, "must be an object"))
        elif raw.get(key) is not None:
            usable[key] = copy.deepcopy(raw[key])

    # field checks continue on whatever parts are usable so every error is reported at once
    cfg = ExperimentConfig(kind=kind, seed=seed, name=str(raw.get("name", "")), n_paths=raw.get("n_paths"), **usable)
    model = None
    if cfg.model is not None:
        try:
            model = cfg.build_model()
        except (TypeError, ValueError) as exc:
            errs.append(("model", str(exc)))
    if cfg.net is not None:
        net_d = cfg.net
        if "points" not in net_d and not (isinstance(net_d.get("n"), int) and net_d["n"] > 0):
            errs.append(("net.n", "positive integer required (or give net.points)"))
        elif model is not None:
            try:
                cfg.build_net()
            except (TypeError, ValueError) as exc:
                errs.append(("net", str(exc)))
    if cfg.generator is not None:
        name = cfg.generator.get("name")
        if name not in GENERATORS:
            errs.append(("generator.name", f"must be one of {', '.join(GENERATORS)}"))
        elif not isinstance(cfg.generator.get("params", {}), dict):
            errs.append(("generator.params", "must be an object"))
        else:
            try:
                gen = cfg.build_generator()
                if model is not None:
                    gen.kappa_vector(model.mark_measure())
            except (KeyError, TypeError, ValueError) as exc:
                errs.append(("generator", str(exc)))
    if cfg.terminal is not None:
        t = cfg.terminal.get("type")
        if t not in TERMINALS:
            errs.append(("terminal.type", f"must be one of {', '.join(TERMINALS)}"))
        elif model is not None:
            try:
                xi = cfg.build_terminal()
                if cfg.net is not None and xi.func is not None:
                    net = cfg.build_net()
                    for tt in xi.times:
                        net.index(tt)
                if xi.kernel is not None and xi.kernel.marks != model.mark_measure():
                    errs.append(("terminal.kernel", "mark atoms do not match the model"))
            except (KeyError, TypeError, ValueError) as exc:
                errs.append(("terminal", str(exc)))
    if cfg.n_paths is not None and not (isinstance(cfg.n_paths, int) and not isinstance(cfg.n_paths, bool) and cfg.n_paths >= 2):
        errs.append(("n_paths", "integer >= 2 required"))
    if cfg.basis:
        try:
            cfg.build_basis()
        except (TypeError, ValueError) as exc:
            errs.append(("basis", str(exc)))
    for key, val in cfg.tolerances.items():
        if not (_number(val) or (isinstance(val, list) and all(_number(v) for v in val))):
            errs.append((f"tolerances.{key}", "must be a number or a list of numbers"))
    if errs:
        raise ConfigError(errs)
    return cfg
