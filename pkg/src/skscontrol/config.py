"""Run configuration loaded from a YAML file.

Every section is optional; missing keys take the defaults below.  Validation
builds each module's parameter object and collects the failures, so a bad
file reports every offending field at once.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import yaml

from .carleman import WeightParams
from .errors import ConfigError
from .hum import HUMConfig, PenaltyFn
from .spacedisc import SpaceGrid
from .system import SystemParams
from .timegrid import TimeGrid

DEFAULTS = {
    "system": {"Gamma": 0.3, "gamma": 0.3, "a": 1.0, "c": 1.0, "omega": [0.2, 0.8]},
    "T": 0.5,
    "grid": {"N": 99, "M": 128},
    "carleman": {"m": 1.0, "k": 2.0, "lam": 1.0, "tau": 1.0, "delta": 0.5,
                 "epsilon0": 1e-2, "epsilon1": 1e-2, "tau0": 1.0, "tau1": 1.0, "tau2": 2.0,
                 "delta1": 0.4, "omega0": [0.4, 0.6], "s": 1.0},
    "penalty": {"kind": "exponential", "C1": 5.0, "value": 1e-4},
    "hum": {"cg_tol": 1e-8, "max_iter": 1000, "T0": 0.25},
    # initial data: "default" (smooth profile), "zero", or "random" (seeded)
    "initial": {"kind": "default"},
    # adjoint final data for the adjoint subcommand
    "final": {"kind": "random"},
    "experiment": {
        "calculus_instances": 100, "calculus_M": [4, 16, 64],
        "samples": 16, "C1_obs": 1.0, "T_sweep": [0.25, 0.5, 0.75],
        "sweep": "phi", "phis": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
        "Ms": [32, 64, 128, 256, 512], "cost_check": True,
    },
    "seed": 0,
    "out": "results",
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if key not in base:
            raise ConfigError(f"{path}{key}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key}: expected a mapping")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    # typed views ---------------------------------------------------------------
    @property
    def T(self) -> float:
        return float(self.raw["T"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def system(self) -> SystemParams:
        s = self.raw["system"]
        return SystemParams(float(s["Gamma"]), float(s["gamma"]), float(s["a"]), float(s["c"]),
                            tuple(s["omega"]))

    def sgrid(self) -> SpaceGrid:
        return SpaceGrid(self.raw["grid"]["N"])

    def tgrid(self, M: int | None = None, T: float | None = None) -> TimeGrid:
        return TimeGrid(self.T if T is None else T, self.raw["grid"]["M"] if M is None else M)

    def penalty(self) -> PenaltyFn:
        p = self.raw["penalty"]
        return PenaltyFn(p["kind"], C1=float(p["C1"]), value=float(p["value"]))

    def hum(self) -> HUMConfig:
        h = self.raw["hum"]
        T0 = None if h["T0"] is None else float(h["T0"])
        return HUMConfig(float(h["cg_tol"]), int(h["max_iter"]), T0)

    def weights(self) -> WeightParams:
        c = self.raw["carleman"]
        keys = ("m", "k", "lam", "tau", "epsilon0", "epsilon1", "tau0", "tau1", "tau2", "delta1")
        kw = {k: float(c[k]) for k in keys}
        if c["delta"] == "auto":
            from .carleman import ledger_choices
            tau, _, delta = ledger_choices(WeightParams(T=self.T, **kw), self.tgrid().dt)
            kw["tau"] = tau
            kw["delta"] = min(delta, 0.5)
        else:
            kw["delta"] = float(c["delta"])
        return WeightParams(T=self.T, **kw)

    def rng(self, stream: int = 0) -> np.random.Generator:
        """PCG64 generator seeded with ``(seed, stream)``."""
        return np.random.default_rng([self.seed, stream])

    def initial_data(self):
        sg = self.sgrid()
        kind = self.raw["initial"]["kind"]
        if kind == "zero":
            return np.zeros(sg.N), np.zeros(sg.N)
        if kind == "random":
            from .obs import random_final_data
            return random_final_data(sg, self.rng(1))
        from .obs import default_initial_data
        return default_initial_data(sg)

    def final_data(self):
        from .obs import random_final_data
        sg = self.sgrid()
        if self.raw["final"]["kind"] == "zero":
            return np.zeros(sg.N), np.zeros(sg.N)
        return random_final_data(sg, self.rng(2))

    # validation ----------------------------------------------------------------
    def validate(self):
        errors = []

        def attempt(name, fn):
            try:
                fn()
            except (ConfigError, TypeError, ValueError, KeyError) as exc:
                errors.append(f"{name}: {exc}")

        attempt("system", self.system)
        attempt("grid.N", self.sgrid)
        attempt("grid.M/T", self.tgrid)
        attempt("penalty", self.penalty)
        attempt("hum", self.hum)
        attempt("carleman", self.weights)
        if not isinstance(self.raw["seed"], int) or not 0 <= self.raw["seed"] < 2 ** 64:
            errors.append("seed: must be an integer in [0, 2**64)")
        h = self.raw["hum"]
        if h["T0"] is not None and not errors:
            if not 0 < float(h["T0"]) < self.T:
                errors.append(f"hum.T0: must lie in (0, T={self.T})")
        if self.raw["initial"]["kind"] not in ("default", "zero", "random"):
            errors.append("initial.kind: choose default, zero or random")
        if self.raw["final"]["kind"] not in ("random", "zero"):
            errors.append("final.kind: choose random or zero")
        ex = self.raw["experiment"]
        if ex["sweep"] not in ("phi", "dt"):
            errors.append("experiment.sweep: choose phi or dt")
        if any(not (0 < float(p) < 1) for p in ex["phis"]):
            errors.append("experiment.phis: values must lie in (0, 1)")
        if any(int(M) < 2 for M in ex["Ms"]):
            errors.append("experiment.Ms: need at least 2 steps")
        if int(ex["samples"]) < 1:
            errors.append("experiment.samples: must be positive")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self
