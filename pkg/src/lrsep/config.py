"""Experiment configuration: a flat TOML table plus an optional ``[profile]`` table."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli

from .hydro import PRESETS

EXPERIMENTS = (
    "equilibrium-cf",
    "martingale-check",
    "hydro-limit",
    "nonequilibrium-compare",
    "stationarity",
    "lln-functional",
)


class ConfigError(ValueError):
    """All violations found in a config document."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass
class ExperimentConfig:
    experiment: str
    dim: int = 1
    alpha: float = 1.0
    rho: float = 0.5
    profile: str | None = None
    profile_params: dict = field(default_factory=dict)
    n_ladder: list = field(default_factory=lambda: [16])
    torus_factor: int = 16
    truncation_radius: int | None = None  # default: half the torus side
    horizon: float = 1.0
    times: list | None = None  # observation times, default [horizon]
    betas: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 2.5])
    cutoff: float | None = None  # default: 8 lattice spacings at the largest n
    replicas: int = 1000
    seed: int = 0
    output: str = "runs"
    micro_horizon: float | None = None  # stationarity: microscopic time
    probe_radius: int = 20
    bin_width: float = 0.5
    permutations: int = 999
    threshold: float = 0.05
    snapshot_dt: float = 0.01

    # -- derived quantities ------------------------------------------------
    def side(self, n: int) -> int:
        return int(self.torus_factor * n)

    def radius(self, n: int) -> int:
        return int(self.truncation_radius or self.side(n) // 2)

    def observation_times(self) -> list[float]:
        return sorted(self.times) if self.times else [self.horizon]

    def effective_cutoff(self) -> float:
        return self.cutoff if self.cutoff is not None else 8.0 / max(self.n_ladder)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


_FIELDS = {f.name for f in fields(ExperimentConfig)}


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _validate(doc: dict) -> list[str]:
    errs: list[str] = []
    for key in doc:
        if key not in _FIELDS and key != "profile":
            errs.append(f"{key}: unknown key")
    exp = doc.get("experiment")
    if exp is None:
        errs.append("experiment: missing required field")
    elif exp not in EXPERIMENTS:
        errs.append(f"experiment: {exp!r} is not one of {', '.join(EXPERIMENTS)}")

    def check(key, ok, msg):
        if key in doc and not ok(doc[key]):
            errs.append(f"{key}: {msg}, got {doc[key]!r}")

    check("dim", lambda v: _int(v) and v in (1, 2), "must be 1 or 2")
    check("alpha", lambda v: _num(v) and 0 < v < 2, "must lie in the open interval (0, 2)")
    check("rho", lambda v: _num(v) and 0 <= v <= 1, "must lie in [0, 1]")
    check("torus_factor", lambda v: _int(v) and v >= 1, "must be a positive integer")
    check("truncation_radius", lambda v: _int(v) and v >= 1, "must be a positive integer")
    check("horizon", lambda v: _num(v) and v >= 0 and math.isfinite(v), "must be a finite nonnegative number")
    check("replicas", lambda v: _int(v) and v >= 1, "must be an integer >= 1")
    check("seed", lambda v: _int(v) and v >= 0, "must be a nonnegative integer")
    check("cutoff", lambda v: _num(v) and v > 0, "must be positive")
    check("micro_horizon", lambda v: _num(v) and v >= 0, "must be nonnegative")
    check("probe_radius", lambda v: _int(v) and v >= 1, "must be a positive integer")
    check("bin_width", lambda v: _num(v) and v > 0, "must be positive")
    check("permutations", lambda v: _int(v) and v >= 1, "must be a positive integer")
    check("threshold", lambda v: _num(v) and v > 0, "must be positive")
    check("snapshot_dt", lambda v: _num(v) and v > 0, "must be positive")
    check("output", lambda v: isinstance(v, str) and v, "must be a nonempty string")
    check("betas", lambda v: isinstance(v, list) and v and all(_num(b) or (
        isinstance(b, list) and all(_num(c) for c in b)) for b in v), "must be a nonempty list of numbers or vectors")

    ladder = doc.get("n_ladder")
    if ladder is not None:
        if not (isinstance(ladder, list) and ladder and all(_int(n) and n >= 1 for n in ladder)):
            errs.append(f"n_ladder: must be a nonempty list of positive integers, got {ladder!r}")
        elif any(b <= a for a, b in zip(ladder, ladder[1:])):
            errs.append(f"n_ladder: must be strictly increasing, got {ladder!r}")

    times = doc.get("times")
    if times is not None:
        if not (isinstance(times, list) and times and all(_num(t) and t >= 0 for t in times)):
            errs.append(f"times: must be a nonempty list of nonnegative numbers, got {times!r}")
        elif _num(doc.get("horizon", 1.0)) and max(times) > doc.get("horizon", 1.0):
            errs.append("times: observation times exceed the horizon")

    prof = doc.get("profile")
    if prof is not None:
        if isinstance(prof, str):
            prof = {"preset": prof}
        if not isinstance(prof, dict) or "preset" not in prof:
            errs.append("profile: must be a table with a 'preset' key")
        elif prof["preset"] not in PRESETS:
            errs.append(f"profile.preset: unknown preset {prof['preset']!r}; choose from {sorted(PRESETS)}")
        else:
            defaults = PRESETS[prof["preset"]][1]
            for k, v in prof.items():
                if k == "preset":
                    continue
                if k not in defaults:
                    errs.append(f"profile.{k}: unknown parameter for preset {prof['preset']!r}")
                elif not _num(v):
                    errs.append(f"profile.{k}: must be a number, got {v!r}")
    elif exp in ("hydro-limit", "nonequilibrium-compare"):
        errs.append(f"profile: required for experiment {exp!r}")
    return errs


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML document; raises ``ConfigError`` listing every violation."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    errs = _validate(doc)
    if errs:
        raise ConfigError(errs)
    kwargs = {k: v for k, v in doc.items() if k != "profile"}
    prof = doc.get("profile")
    if prof is not None:
        prof = {"preset": prof} if isinstance(prof, str) else dict(prof)
        kwargs["profile"] = prof.pop("preset")
        kwargs["profile_params"] = {k: float(v) for k, v in prof.items()}
    for key in ("alpha", "rho", "horizon"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def derive_seed(master: int, index: int, stream: int = 0) -> int:
    """64-bit seed for replica ``index`` of ``stream``, from the SeedSequence hash."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(stream), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def replica_rng(master: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, index, stream)))
