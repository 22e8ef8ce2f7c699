"""Run configuration: sectioned ``key = value`` files, presets and overrides.

Schema (every key optional; unknown sections or keys are rejected)::

    [env]          kind (set|bits), preset, seed, reward_exponent, enum_cap,
                   universe_size, target_size, energies (set);
                   n, k, num_modes, mode_file (bits)
    [objective]    kind (db|tb|subtb|fl_db|fl_subtb), subtb_lambda, backward (learned|uniform)
    [exploration]  epsilon, temperature
    [train]        seed, batch_size, budget, lr, log_z_lr, init_log_z, hidden, layers,
                   partial, concurrency (sequential|threads), workers
    [eval]         snapshot_every, top_k, mode_threshold, mode_gap, mode_quantile,
                   mode_radius, exact (auto|on|off), exact_every, test_set, test_set_size
    [sweep]        objectives, seeds

Command-line overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .envs import BitSeqEnv, SetEnv, read_bitstrings
from .objectives import Objective

__all__ = ["ConfigError", "EnvConfig", "EvalConfig", "RunConfig", "PRESETS", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration; messages carry ``file:line`` when known."""


@dataclass
class EnvConfig:
    kind: str = "set"
    preset: str = ""
    seed: int = 0
    reward_exponent: float | None = None
    enum_cap: int = 10**6
    universe_size: int = 30
    target_size: int = 20
    energies: list[float] | None = None
    n: int = 120
    k: int = 4
    num_modes: int = 60
    mode_file: str = ""

    def build(self):
        if self.kind == "set":
            beta = 1.0 if self.reward_exponent is None else self.reward_exponent
            return SetEnv(self.universe_size, self.target_size, energies=self.energies,
                          seed=self.seed, reward_exponent=beta)
        beta = 3.0 if self.reward_exponent is None else self.reward_exponent
        modes = read_bitstrings(self.mode_file) if self.mode_file else None
        return BitSeqEnv(self.n, self.k, modes=modes, num_modes=self.num_modes, seed=self.seed,
                         reward_exponent=beta)


@dataclass
class EvalConfig:
    snapshot_every: int = 1000
    top_k: int = 100
    mode_threshold: float | None = None
    mode_gap: float | None = None
    mode_quantile: float = 99.0
    mode_radius: int = 0
    exact: str = "auto"
    exact_every: int = 1
    test_set: str = ""
    test_set_size: int = 1000


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    objective: Objective = Objective.FL_DB
    subtb_lambda: float = 0.9
    backward: str = "learned"
    epsilon: float | None = None
    temperature: float = 1.0
    seed: int = 0
    batch_size: int = 16
    budget: int = 50_000
    lr: float | None = None
    log_z_lr: float | None = None
    init_log_z: float = 0.0
    hidden: int = 256
    layers: int = 2
    partial: bool = False
    concurrency: str = "sequential"
    workers: int = 4
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep_objectives: list[str] = field(default_factory=list)
    sweep_seeds: list[int] = field(default_factory=list)

    # defaults that depend on the environment kind
    def resolved_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 0.05 if self.env.kind == "set" else 0.0005

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        if self.env.kind == "set":
            return 1e-3
        return 1e-4 if self.objective is Objective.TB else 5e-3

    def resolved_log_z_lr(self) -> float:
        if self.log_z_lr is not None:
            return self.log_z_lr
        return 0.1 if self.env.kind == "set" else 1e-3

    def validate(self) -> None:
        if self.budget <= 0:
            raise ConfigError("train.budget must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.partial and self.objective.needs_complete:
            raise ConfigError("objective tb cannot train on partial trajectories (train.partial)")
        if self.partial and self.env.target_size < 2 and self.env.kind == "set":
            raise ConfigError("partial trajectories need target_size >= 2")
        if not 0.0 <= self.resolved_epsilon() <= 1.0:
            raise ConfigError("exploration.epsilon must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("exploration.temperature must be positive")
        if not 0.0 < self.subtb_lambda <= 1.0:
            raise ConfigError("objective.subtb_lambda must lie in (0, 1]")
        if self.backward not in ("learned", "uniform"):
            raise ConfigError("objective.backward must be learned or uniform")
        if self.concurrency not in ("sequential", "threads"):
            raise ConfigError("train.concurrency must be sequential or threads")
        if self.env.kind not in ("set", "bits"):
            raise ConfigError("env.kind must be set or bits")
        if self.eval.exact not in ("auto", "on", "off"):
            raise ConfigError("eval.exact must be auto, on or off")
        if self.eval.snapshot_every < 1:
            raise ConfigError("eval.snapshot_every must be positive")
        try:
            self.env.build()
        except (ValueError, OSError) as exc:
            raise ConfigError(f"[env] {exc}") from None

    def to_ini(self, extra: dict[str, dict[str, str]] | None = None) -> str:
        """Canonical, fully resolved configuration text."""
        from . import __version__

        e = self.env
        sections: dict[str, dict[str, Any]] = {
            "meta": {"version": __version__},
            "env": {"kind": e.kind, "preset": e.preset, "seed": e.seed,
                    "reward_exponent": e.reward_exponent if e.reward_exponent is not None else "",
                    "enum_cap": e.enum_cap},
            "objective": {"kind": self.objective.value, "subtb_lambda": self.subtb_lambda,
                          "backward": self.backward},
            "exploration": {"epsilon": self.resolved_epsilon(), "temperature": self.temperature},
            "train": {"seed": self.seed, "batch_size": self.batch_size, "budget": self.budget,
                      "lr": self.resolved_lr(), "log_z_lr": self.resolved_log_z_lr(),
                      "init_log_z": self.init_log_z, "hidden": self.hidden, "layers": self.layers,
                      "partial": str(self.partial).lower(), "concurrency": self.concurrency,
                      "workers": self.workers},
            "eval": {f.name: ("" if getattr(self.eval, f.name) is None else getattr(self.eval, f.name))
                     for f in dataclasses.fields(EvalConfig)},
        }
        if e.kind == "set":
            sections["env"].update(universe_size=e.universe_size, target_size=e.target_size,
                                   energies=",".join(repr(float(x)) for x in e.energies)
                                   if e.energies is not None else "")
        else:
            sections["env"].update(n=e.n, k=e.k, num_modes=e.num_modes, mode_file=e.mode_file)
        if self.sweep_objectives or self.sweep_seeds:
            sections["sweep"] = {"objectives": ",".join(self.sweep_objectives),
                                 "seeds": ",".join(map(str, self.sweep_seeds))}
        for sec, items in (extra or {}).items():
            sections.setdefault(sec, {}).update(items)
        out = io.StringIO()
        for sec, items in sections.items():
            out.write(f"[{sec}]\n")
            for k, v in items.items():
                out.write(f"{k} = {v}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self) -> str:
        """Hash of the resolved configuration, ignoring the training seed."""
        text = dataclasses.replace(self, seed=0).to_ini()
        return hashlib.sha256(text.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------

PRESETS: dict[str, dict[str, dict[str, str]]] = {
    "set-small": {"env": {"kind": "set", "universe_size": "30", "target_size": "20"},
                  "eval": {"mode_gap": "2.0"}},
    "set-medium": {"env": {"kind": "set", "universe_size": "80", "target_size": "60"},
                   "eval": {"mode_gap": "2.0"}},
    "set-large": {"env": {"kind": "set", "universe_size": "100", "target_size": "80"},
                  "eval": {"mode_gap": "2.0"}},
    "set-tiny": {"env": {"kind": "set", "universe_size": "6", "target_size": "3"}},
    "bits-normal": {"env": {"kind": "bits", "n": "120", "k": "4"}},
    "bits-long": {"env": {"kind": "bits", "n": "140", "k": "4"}},
    "bits-verylong": {"env": {"kind": "bits", "n": "160", "k": "4"}},
    "bits-tiny": {"env": {"kind": "bits", "n": "20", "k": "4", "num_modes": "8",
                          "enum_cap": "2000000"},
                  "eval": {"exact": "off"}},
}

_FIELDS: dict[str, dict[str, tuple[str, type]]] = {
    "env": {"kind": ("env.kind", str), "preset": ("env.preset", str), "seed": ("env.seed", int),
            "reward_exponent": ("env.reward_exponent", float), "enum_cap": ("env.enum_cap", int),
            "universe_size": ("env.universe_size", int), "target_size": ("env.target_size", int),
            "energies": ("env.energies", list), "n": ("env.n", int), "k": ("env.k", int),
            "num_modes": ("env.num_modes", int), "mode_file": ("env.mode_file", str)},
    "objective": {"kind": ("objective", Objective), "subtb_lambda": ("subtb_lambda", float),
                  "backward": ("backward", str)},
    "exploration": {"epsilon": ("epsilon", float), "temperature": ("temperature", float)},
    "train": {"seed": ("seed", int), "batch_size": ("batch_size", int), "budget": ("budget", int),
              "lr": ("lr", float), "log_z_lr": ("log_z_lr", float),
              "init_log_z": ("init_log_z", float), "hidden": ("hidden", int),
              "layers": ("layers", int), "partial": ("partial", bool),
              "concurrency": ("concurrency", str), "workers": ("workers", int)},
    "eval": {"snapshot_every": ("eval.snapshot_every", int), "top_k": ("eval.top_k", int),
             "mode_threshold": ("eval.mode_threshold", float), "mode_gap": ("eval.mode_gap", float),
             "mode_quantile": ("eval.mode_quantile", float),
             "mode_radius": ("eval.mode_radius", int), "exact": ("eval.exact", str),
             "exact_every": ("eval.exact_every", int), "test_set": ("eval.test_set", str),
             "test_set_size": ("eval.test_set_size", int)},
    "sweep": {"objectives": ("sweep_objectives", "strlist"), "seeds": ("sweep_seeds", "intlist")},
    "meta": {"version": ("", str)},
    # informational, written by the runner
    "report": {"mode_criterion": ("", str), "backend": ("", str)},
}


def _convert(raw: str, kind) -> Any:
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if raw == "" and kind in (float, list):
        return None
    if kind is list:
        return [float(x) for x in raw.split(",") if x.strip()]
    if kind == "strlist":
        return [x.strip() for x in raw.split(",") if x.strip()]
    if kind == "intlist":
        return [int(x) for x in raw.split(",") if x.strip()]
    if kind is Objective:
        return Objective.parse(raw)
    if kind is int:
        return int(float(raw)) if re.fullmatch(r"[0-9.]+e[0-9]+", raw.lower()) else int(raw)
    return kind(raw)


def _line_index(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            where[(section, "")] = no
            continue
        m = re.match(r"([A-Za-z0-9_.\-]+)\s*[=:]", s)
        if m and section:
            where[(section, m.group(1).lower())] = no
    return where


def _assign(cfg: RunConfig, path: str, value: Any) -> None:
    if not path:
        return
    target: Any = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        target = getattr(target, p)
    setattr(target, parts[-1], value)


def _apply(cfg: RunConfig, values: dict[str, dict[str, str]], origin: str,
           lines: dict[tuple[str, str], int] | None = None) -> None:
    for section, items in values.items():
        if section not in _FIELDS:
            line = (lines or {}).get((section, ""))
            raise ConfigError(f"{origin}:{line or '?'}: unknown section [{section}]")
        for key, raw in items.items():
            line = (lines or {}).get((section, key))
            loc = f"{origin}:{line}" if line else origin
            if key not in _FIELDS[section]:
                raise ConfigError(f"{loc}: unknown key {section}.{key}")
            path, kind = _FIELDS[section][key]
            try:
                value = _convert(raw, kind)
            except ValueError as exc:
                raise ConfigError(f"{loc}: {section}.{key}: {exc}") from None
            _assign(cfg, path, value)


def _read_ini(text: str, origin: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    return {sec.lower(): dict(parser.items(sec)) for sec in parser.sections()}


def parse_override(item: str) -> tuple[str, str, str]:
    item = item.lstrip("-")
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    lhs, value = item.split("=", 1)
    section, key = lhs.split(".", 1)
    return section.strip().lower(), key.strip().lower(), value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                preset: str | None = None, text: str | None = None) -> RunConfig:
    """Resolve a configuration: preset, then file (or ``text``), then overrides; validates."""
    cfg = RunConfig()
    file_values: dict[str, dict[str, str]] = {}
    lines: dict[tuple[str, str], int] = {}
    origin = "<config>"
    if path is not None:
        origin = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{origin}: {exc}") from None
    if text is not None:
        file_values = _read_ini(text, origin)
        lines = _line_index(text)
    name = preset or file_values.get("env", {}).get("preset", "").strip()
    if name:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        _apply(cfg, PRESETS[name], f"preset {name}")
    _apply(cfg, file_values, origin, lines)
    if name:
        cfg.env.preset = name
    over: dict[str, dict[str, str]] = {}
    for item in overrides or []:
        sec, key, value = parse_override(item)
        over.setdefault(sec, {})[key] = value
    _apply(cfg, over, "command line")
    cfg.validate()
    return cfg
