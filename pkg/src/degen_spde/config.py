"""Run configuration: line-oriented `key = value` files with [section] headers.

The format is intentionally diffable: one key per line, decimal numbers,
full-line comments starting with '#'.  parse and serialize round-trip
exactly: serialize(parse(text)) is canonical and parsing it back yields an
identical configuration.
"""

from dataclasses import dataclass, field

import numpy as np

from .weights import beta_admissible

TASKS = ("simulate", "check", "null-control", "inverse-source", "hardy",
         "observability")
ESTIMATE_NAMES = ("thm-3.1", "thm-3.2", "lemma-3.4", "thm-3.5", "thm-3.6",
                  "thm-4.2")

# key -> (type tag, default); tuples serialize space-separated
SCHEMA: dict[str, dict] = {
    "problem": {
        "alpha": ("float", 0.5),
        "eps": ("float", 0.01),
        "T": ("float", 2.0),
        "a": ("float", 0.0),
        "b": ("float", 0.0),
        "c": ("float", 0.0),
        "omega": ("floats", (0.5, 0.9)),
        "omega1": ("floats", (0.55, 0.85)),
        "omega2": ("floats", (0.6, 0.8)),
    },
    "discretization": {
        "N": ("int", 32),
        "depth": ("int", 6),
        "cap": ("int", 14),
    },
    "weights": {
        "beta": ("float_or_auto", "auto"),
        "lambda_grid": ("floats", (1.0, 2.0)),
        "s_grid": ("floats", (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)),
        "margin": ("float", 1.01),
    },
    "task": {
        "name": ("str", "simulate"),
        "estimate": ("str", "thm-3.2"),
        "ensemble": ("int", 20),
        "tau_grid": ("floats", (1e-1, 1e-2, 1e-3, 1e-4)),
        "s_control": ("float", 4.0),
        "lambda_control": ("float", 2.0),
        "cg_tol": ("float", 1e-8),
        "cg_max": ("int", 600),
        "pairs": ("int", 50),
        "draws": ("int", 50),
        "profiles": ("int", 100),
        "gammas": ("floats", (0.0, 0.5, 1.5, 2.0)),
        "hardy_eps": ("floats", (0.0, 0.01)),
        "mu": ("float", 0.0),
    },
    "run": {
        "seed": ("int", 0),
        "threads": ("int", 1),
    },
}

SECTION_ORDER = ("problem", "discretization", "weights", "task", "run")


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, key):
        section, name = key
        return self.sections[section][name]

    def set(self, section, name, value):
        self.sections[section][name] = value

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.sections == other.sections


def default_config() -> RunConfig:
    return RunConfig({s: {k: v for k, (_, v) in keys.items()}
                      for s, keys in SCHEMA.items()})


class ConfigParseError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _parse_value(tag: str, raw: str):
    raw = raw.strip()
    if tag == "float":
        return float(raw)
    if tag == "int":
        return int(raw)
    if tag == "str":
        return raw
    if tag == "floats":
        return tuple(float(p) for p in raw.split())
    if tag == "float_or_auto":
        return "auto" if raw == "auto" else float(raw)
    raise ValueError(f"unknown schema tag {tag}")


def _format_value(tag: str, value) -> str:
    if tag == "floats":
        return " ".join(repr(float(v)) for v in value)
    if tag == "float":
        return repr(float(value))
    if tag == "float_or_auto":
        return value if value == "auto" else repr(float(value))
    return str(value)


def parse_config(text: str) -> RunConfig:
    cfg = default_config()
    errors = []
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                errors.append(f"line {lineno}: unknown section [{section}]")
                section = None
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        if section is None:
            errors.append(f"line {lineno}: key outside any known section")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            errors.append(f"line {lineno}: unknown key {key!r} in [{section}]")
            continue
        tag = SCHEMA[section][key][0]
        try:
            cfg.set(section, key, _parse_value(tag, raw))
        except ValueError:
            errors.append(f"line {lineno}: cannot parse {key} value {raw.strip()!r} as {tag}")
    if errors:
        raise ConfigParseError(errors)
    return cfg


def serialize(cfg: RunConfig) -> str:
    lines = []
    for section in SECTION_ORDER:
        lines.append(f"[{section}]")
        for key, (tag, _) in SCHEMA[section].items():
            lines.append(f"{key} = {_format_value(tag, cfg.sections[section][key])}")
        lines.append("")
    return "\n".join(lines)


def _check_interval(name, pair, errors):
    if len(pair) != 2:
        errors.append(f"{name} needs exactly two endpoints, got {len(pair)}")
        return None
    lo, hi = pair
    if not lo < hi:
        errors.append(f"{name} endpoints must increase: {lo} >= {hi}")
    return lo, hi


def validate(cfg: RunConfig) -> list[str]:
    """Every violated constraint, not just the first."""
    errors: list[str] = []
    p = cfg.sections["problem"]
    d = cfg.sections["discretization"]
    w = cfg.sections["weights"]
    t = cfg.sections["task"]

    if not 0.0 < p["alpha"] < 2.0:
        errors.append(f"problem.alpha must lie in (0,2), got {p['alpha']}")
    if p["eps"] < 0.0:
        errors.append(f"problem.eps must be nonnegative, got {p['eps']}")
    if p["T"] <= 0.0:
        errors.append(f"problem.T must be positive, got {p['T']}")
    om = _check_interval("problem.omega", p["omega"], errors)
    om1 = _check_interval("problem.omega1", p["omega1"], errors)
    om2 = _check_interval("problem.omega2", p["omega2"], errors)
    if om and om1 and om2:
        if not (0.0 < om[0] < om1[0] < om2[0] < om2[1] < om1[1] < om[1] < 1.0):
            errors.append(
                "intervals must nest strictly: 0 < omega.lo < omega1.lo < "
                "omega2.lo < omega2.hi < omega1.hi < omega.hi < 1; got "
                f"omega={om}, omega1={om1}, omega2={om2}")

    if d["N"] < 2:
        errors.append(f"discretization.N must be at least 2, got {d['N']}")
    if d["depth"] < 1:
        errors.append(f"discretization.depth must be at least 1, got {d['depth']}")
    if d["depth"] > d["cap"]:
        errors.append(
            f"discretization.depth {d['depth']} exceeds the cap {d['cap']} "
            f"(2^{d['depth']} leaves)")

    if w["beta"] != "auto" and 0.0 < p["alpha"] < 2.0:
        adm = beta_admissible(p["alpha"], float(w["beta"]))
        if not adm:
            errors.append(
                f"weights.beta={w['beta']} inadmissible for alpha={p['alpha']}: "
                f"window ({adm.lo}, {adm.hi}]")
    if any(s <= 0 for s in w["s_grid"]) or any(l <= 0 for l in w["lambda_grid"]):
        errors.append("weights grids must be positive")
    if w["margin"] < 1.0:
        errors.append(f"weights.margin must be at least 1, got {w['margin']}")

    if t["name"] not in TASKS:
        errors.append(f"task.name must be one of {TASKS}, got {t['name']!r}")
    if t["name"] == "check" and t["estimate"] not in ESTIMATE_NAMES:
        errors.append(f"task.estimate must be one of {ESTIMATE_NAMES}, got {t['estimate']!r}")
    if t["name"] == "check" and t["estimate"] == "thm-4.2" and not 0 < p["alpha"] < 0.5:
        errors.append(f"estimate thm-4.2 requires alpha in (0,1/2), got {p['alpha']}")
    if t["name"] == "observability" and not 0 < p["alpha"] < 0.5:
        errors.append(f"observability requires alpha in (0,1/2), got {p['alpha']}")
    if t["name"] == "null-control" and p["a"] != 0.0 and not 0 < p["alpha"] < 0.5:
        errors.append(
            f"null-control with convection requires alpha in (0,1/2), got {p['alpha']}")
    taus = t["tau_grid"]
    if any(tb >= ta for ta, tb in zip(taus, taus[1:])) or any(x <= 0 for x in taus):
        errors.append(f"task.tau_grid must be positive and strictly decreasing, got {taus}")
    if t["ensemble"] < 1:
        errors.append(f"task.ensemble must be positive, got {t['ensemble']}")
    if t["pairs"] < 2:
        errors.append(f"task.pairs must be at least 2, got {t['pairs']}")
    for g in t["gammas"]:
        if not (0.0 <= g < 1.0 or 1.0 < g <= 2.0):
            errors.append(f"task.gammas entries must lie in [0,1) or (1,2], got {g}")
    for e in t["hardy_eps"]:
        if e != 0.0 and not 0.0 < e < 1.0:
            errors.append(f"task.hardy_eps entries must be 0 or in (0,1), got {e}")
    if not 0.0 < t["cg_tol"] < 1.0:
        errors.append(f"task.cg_tol must lie in (0,1), got {t['cg_tol']}")
    if t["mu"] < 0.0:
        errors.append(f"task.mu must be nonnegative, got {t['mu']}")
    if cfg.sections["run"]["threads"] < 1:
        errors.append("run.threads must be at least 1")
    return errors


def resolve_beta(cfg: RunConfig, purpose: str = "check") -> float:
    """'auto' picks the natural exponent: 2 - alpha for the estimate sweeps,
    (4 - 2 alpha)/3 (flat state weight) for the control construction."""
    beta = cfg.sections["weights"]["beta"]
    alpha = cfg.sections["problem"]["alpha"]
    if beta != "auto":
        return float(beta)
    if purpose == "control":
        return (4.0 - 2.0 * alpha) / 3.0
    return 2.0 - alpha
