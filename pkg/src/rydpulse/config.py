"""Experiment configuration: defaults, overrides, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .evolution import DELTA_MAX, M_SEGMENTS, OMEGA_MAX
from .geometry import MAX_FULL_SITES
from .grape import OPTIMIZERS, GrapeConfig
from .hamiltonian import DEFAULT_C6
from .statistics import SMAX_CONVENTIONS, find_asymmetric_bipartition

KINDS = (
    "ensemble",
    "haar-baseline",
    "ratio-stats",
    "porter-thomas",
    "blockade",
    "eta-pdf",
    "grape-benchmark",
    "grape-study",
    "bipartition-scan",
)

SEED_ENV = "RYDPULSE_SEED"
STUDIED_BAND = (5.0, 10.0)

# keys that change how a run executes but not what it computes
_UNHASHED = ("workers", "output_dir")

DEFAULTS = {
    "experiment": "ensemble",
    "seed": 0,
    "workers": 1,
    "output_dir": "rydpulse-out",
    "samples": 1000,
    "chunk_size": 200,
    "physics": {"n_atoms": 9, "spacings": [10.0], "c6": DEFAULT_C6},
    "pulses": {"m_segments": M_SEGMENTS, "t_finals": [1.0], "omega_max": OMEGA_MAX, "delta_max": DELTA_MAX},
    "analysis": {
        "entropy_bins": 50,
        "omega_bins": 60,
        "omega_upper": 8.0,
        "ratio_bins": 40,
        "keep_central": 0.75,
        "smax_convention": "floor_half_n",
        "bipartition": None,
        "store_omegas": False,
        "reference_samples": 10000,
        "gamma": 1e-2,
        "delta_s": 0.0309,
        "eta_max": 3.0,
        "eta_points": 601,
    },
    "grape": {
        "t_max": 6.0,
        "m_segments": M_SEGMENTS,
        "a1": 1e-4,
        "a2": 1e-2,
        "a3": 10.0,
        "alpha": 4.0,
        "n_restarts": 16,
        "optimizer": "lbfgs",
        "max_iters": 3000,
        "grad_tol": 1e-10,
        "n_targets": 10,
        "target_spacing": 10.0,
        "target_t_finals": [6.0],
        "pool_size": 200,
        "n_bins": 30,
        "per_bin": 1,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, path: tuple = (), line: int | None = None, source: str | None = None):
        self.path = path
        self.line = line
        self.source = source
        super().__init__(message)

    def __str__(self):
        where = self.source or "<config>"
        if self.line:
            where += f":{self.line}"
        key = ".".join(map(str, self.path))
        return f"{where}: {key + ': ' if key else ''}{self.args[0]}"


def key_line(text: str, path) -> int | None:
    """Line of the innermost key in ``path`` (searching nested objects in order)."""
    pos = 0
    for key in path:
        m = re.search(r'"%s"\s*:' % re.escape(str(key)), text[pos:])
        if m is None:
            return None
        pos += m.start()
    return text.count("\n", 0, pos) + 1


def _merge(base: dict, update: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError("unknown key", path + (key,))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", path + (key,))
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = value
    return out


def parse_override(item: str):
    """``a.b.c=value`` with value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    path = tuple(key.strip().split("."))
    nested = value
    for k in reversed(path):
        nested = {k: nested}
    return path, nested


@dataclass
class ExperimentConfig:
    data: dict
    source: str | None = None
    text: str = ""
    warnings: list = field(default_factory=list)

    # --- construction ------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str | None = None, overrides=(), env=None) -> "ExperimentConfig":
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno, source=source) from None
        if not isinstance(raw, dict):
            raise ConfigError("top level must be an object", line=1, source=source)
        try:
            data = _merge(DEFAULTS, raw)
        except ConfigError as exc:
            raise ConfigError(exc.args[0], exc.path, key_line(text, exc.path), source) from None
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                data["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", source=source) from None
        for item in overrides:
            path, nested = parse_override(item)
            try:
                data = _merge(data, nested)
            except ConfigError as exc:
                raise ConfigError(f"{exc.args[0]} (from override {item!r})", exc.path, source=source) from None
        cfg = cls(data, source, text)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=(), env=None) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path), overrides, env)

    # --- validation --------------------------------------------------------

    def _fail(self, path, message):
        raise ConfigError(message, path, key_line(self.text, path), self.source)

    def _number(self, path, *, lo=None, hi=None, integer=False, lo_open=False):
        value = self._get(path)
        ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
        if isinstance(value, bool) or not ok_type:
            self._fail(path, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
        if lo is not None and (value <= lo if lo_open else value < lo):
            self._fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
        if hi is not None and value > hi:
            self._fail(path, f"must be <= {hi}, got {value}")
        return value

    def _number_list(self, path, *, lo_open_zero=True):
        values = self._get(path)
        if not isinstance(values, list) or not values:
            self._fail(path, "expected a non-empty list of numbers")
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self._fail(path, f"expected numbers, got {v!r}")
            if lo_open_zero and v <= 0:
                self._fail(path, f"values must be > 0, got {v}")
        return values

    def _get(self, path):
        node = self.data
        for key in path:
            node = node[key]
        return node

    def validate(self) -> None:
        d = self.data
        if d["experiment"] not in KINDS:
            self._fail(("experiment",), f"unknown experiment {d['experiment']!r}; expected one of {', '.join(KINDS)}")
        self._number(("seed",), lo=0, integer=True)
        self._number(("workers",), lo=1, integer=True)
        self._number(("samples",), lo=1, integer=True)
        self._number(("chunk_size",), lo=1, integer=True)
        if not isinstance(d["output_dir"], str) or not d["output_dir"]:
            self._fail(("output_dir",), "expected a directory path")

        self._number(("physics", "n_atoms"), lo=3, hi=MAX_FULL_SITES, integer=True)
        self._number(("physics", "c6"), lo=0, lo_open=True)
        for v in self._number_list(("physics", "spacings")):
            if not STUDIED_BAND[0] <= v <= STUDIED_BAND[1]:
                self.warnings.append(f"spacing {v} um lies outside the studied band "
                                     f"[{STUDIED_BAND[0]:g}, {STUDIED_BAND[1]:g}] um")

        self._number(("pulses", "m_segments"), lo=1, integer=True)
        self._number_list(("pulses", "t_finals"))
        self._number(("pulses", "omega_max"), lo=0)
        self._number(("pulses", "delta_max"), lo=0)

        a = ("analysis",)
        for key in ("entropy_bins", "omega_bins", "ratio_bins", "reference_samples", "eta_points"):
            self._number(a + (key,), lo=1, integer=True)
        self._number(a + ("omega_upper",), lo=0, lo_open=True)
        self._number(a + ("eta_max",), lo=0, lo_open=True)
        self._number(a + ("keep_central",), lo=0, hi=1, lo_open=True)
        self._number(a + ("gamma",), lo=0)
        self._number(a + ("delta_s",), lo=0, lo_open=True)
        if d["analysis"]["smax_convention"] not in SMAX_CONVENTIONS:
            self._fail(a + ("smax_convention",), f"expected one of {SMAX_CONVENTIONS}")
        if not isinstance(d["analysis"]["store_omegas"], bool):
            self._fail(a + ("store_omegas",), "expected true or false")
        mask = d["analysis"]["bipartition"]
        if mask is None and self.kind != "eta-pdf":
            try:
                find_asymmetric_bipartition(d["physics"]["n_atoms"])
            except ValueError as exc:
                self._fail(a + ("bipartition",), f"{exc}; give the subsystem sites explicitly")
        if mask is not None:
            n = d["physics"]["n_atoms"]
            if (not isinstance(mask, list) or not mask or len(set(mask)) != len(mask)
                    or any(isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < n for s in mask)
                    or len(mask) >= n):
                self._fail(a + ("bipartition",), f"expected a proper subset of sites 0..{n - 1}")

        g = ("grape",)
        for key in ("n_targets", "pool_size", "n_bins", "per_bin", "max_iters", "n_restarts", "m_segments"):
            self._number(g + (key,), lo=1, integer=True)
        for key in ("t_max", "target_spacing"):
            self._number(g + (key,), lo=0, lo_open=True)
        for key in ("a1", "a2", "a3", "grad_tol"):
            self._number(g + (key,), lo=0)
        self._number(g + ("alpha",), lo=1)
        self._number_list(g + ("target_t_finals",))
        if d["grape"]["optimizer"] not in OPTIMIZERS:
            self._fail(g + ("optimizer",), f"expected one of {OPTIMIZERS}")

    # --- derived views -----------------------------------------------------

    @property
    def kind(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def hash(self) -> str:
        payload = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def grape_config(self) -> GrapeConfig:
        g = self.data["grape"]
        p = self.data["pulses"]
        return GrapeConfig(m_segments=g["m_segments"], t_max=float(g["t_max"]), a1=g["a1"], a2=g["a2"], a3=g["a3"],
                           alpha=g["alpha"], omega_max=float(p["omega_max"]), delta_max=float(p["delta_max"]),
                           n_restarts=g["n_restarts"], optimizer=g["optimizer"], max_iters=g["max_iters"],
                           grad_tol=g["grad_tol"])

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)
