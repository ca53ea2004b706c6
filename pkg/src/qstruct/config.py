"""Strict INI-style scenario configuration.

Files use ``[section]`` headers and ``key = value`` lines; ``#`` starts a
comment.  Duplicate keys or sections are parse errors, unknown sections
and keys are validation errors, and every violation is reported at once.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from qstruct.errors import ParseError, ValidationError
from qstruct.gridstate import Grid1D
from qstruct.sgdyn import SGConfig

SCENARIOS = ("sg-run", "er-demo", "bohm-run", "classical-sweep")

REQUIRED = object()


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _mass_pairs(text: str) -> list[tuple[float, float]]:
    pairs = []
    for item in text.split(","):
        if item.strip():
            a, b = item.split(":")
            pairs.append((float(a), float(b)))
    return pairs


_TYPE_NAMES = {
    int: "integer",
    float: "number",
    str: "string",
    _float_list: "comma-separated list of numbers",
    _mass_pairs: "comma-separated list of m1:m2 pairs",
}

# section -> key -> (parser, default)
SCHEMA = {
    "scenario": {
        "name": (str, None),
        "output_dir": (str, "qstruct-out"),
        "seed": (int, 0),
    },
    "physics": {
        "m_e": (float, REQUIRED),
        "m_p": (float, REQUIRED),
        "mu": (float, REQUIRED),
        "B0": (float, 0.0),
        "b": (float, REQUIRED),
        "internal_omega": (float, REQUIRED),
    },
    "numerics": {
        "z_min": (float, REQUIRED),
        "z_max": (float, REQUIRED),
        "z_n": (int, REQUIRED),
        "rho_min": (float, REQUIRED),
        "rho_max": (float, REQUIRED),
        "rho_n": (int, REQUIRED),
        "dt": (float, REQUIRED),
        "steps": (int, REQUIRED),
        "save_every": (int, 100),
    },
    "initial": {
        "z0": (float, 0.0),
        "sigma_cm": (float, 1.0),
        "k0": (float, 0.0),
        "spin_up": (float, 2**-0.5),
        "spin_dn": (float, 2**-0.5),
    },
    "bohm": {
        "n_traj": (int, 10000),
        "dt_traj_ratio": (float, 0.5),
        "node_epsilon": (float, 1e-12),
        "csv_max_traj": (int, 1000),
    },
    "er": {
        "m1": (float, REQUIRED),
        "m2": (float, REQUIRED),
        "var1": (float, REQUIRED),
        "var2": (float, REQUIRED),
        "cm_var": (float, 1.0),
        "rho_var": (float, 1.0),
        "grid_sigmas": (float, 8.0),
        "n": (int, 256),
    },
    "sweep": {
        "sigma1": (_float_list, REQUIRED),
        "sigma2": (_float_list, REQUIRED),
        "masses": (_mass_pairs, REQUIRED),
    },
    "tolerances": {
        "spin_entropy_tol": (float, 0.01),
        "overlap_max": (float, 1e-3),
        "weight_tol": (float, 1e-6),
        "ehrenfest_rel_tol": (float, 0.01),
        "r_infidelity_max": (float, 1e-5),
        "r_l1_max": (float, 1e-4),
        "norm_drift_max": (float, 1e-7),
        "deflection_ratio_min": (float, 0.1),
        "free_entropy_max": (float, 1e-6),
        "product_entropy_max": (float, 1e-4),
        "entangled_entropy_min": (float, 0.05),
        "oracle_entropy_tol": (float, 2e-3),
        "ks_max": (float, 0.03),
        "cm_deflection_sigmas": (float, 3.0),
        "mi_zero_tol": (float, 1e-6),
        "mi_offlocus_min": (float, 1e-3),
        "mi_oracle_tol": (float, 1e-6),
    },
}

# sections whose REQUIRED keys must be present for each scenario
SCENARIO_SECTIONS = {
    "sg-run": ("physics", "numerics"),
    "bohm-run": ("physics", "numerics"),
    "er-demo": ("er",),
    "classical-sweep": ("sweep",),
}


@dataclass
class ScenarioConfig:
    scenario: str
    physics: dict = field(default_factory=dict)
    numerics: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    bohm: dict = field(default_factory=dict)
    er: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "qstruct-out"
    seed: int = 0

    def sg_config(self) -> SGConfig:
        p, n = self.physics, self.numerics
        return SGConfig(
            m_e=p["m_e"], m_p=p["m_p"], mu=p["mu"], B0=p["B0"], b=p["b"],
            internal_omega=p["internal_omega"], dt=n["dt"], steps=n["steps"],
            grids=(Grid1D(n["z_min"], n["z_max"], n["z_n"]),
                   Grid1D(n["rho_min"], n["rho_max"], n["rho_n"])),
        )


def _read(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        strict=True, interpolation=None, empty_lines_in_values=False,
        comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError("key outside any [section]", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ParseError(f"cannot parse {line.strip()!r}", lineno) from None
    return parser


def parse_config(text: str, scenario: str | None = None) -> ScenarioConfig:
    """Parse and validate a scenario config.

    ``scenario`` (e.g. from the command line) takes the place of, or must
    agree with, ``[scenario] name``.

    Raises
    ------
    ParseError
        Malformed text, with the offending line number.
    ValidationError
        Lists every unknown, missing or invalid entry.
    """
    parser = _read(text)
    problems: list[str] = []
    values: dict[str, dict] = {}

    for section in parser.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in SCHEMA[section]:
                problems.append(f"unknown key '{key}' in [{section}]")

    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except ValueError:
                    problems.append(f"[{section}] {key} = {raw!r} is not a valid {_TYPE_NAMES[conv]}")
            elif default is not REQUIRED:
                values[section][key] = default

    name = values["scenario"].get("name")
    if scenario is None:
        scenario = name
    elif name is not None and name != scenario:
        problems.append(f"[scenario] name = {name!r} disagrees with requested scenario {scenario!r}")
    if scenario not in SCENARIOS:
        problems.append(f"scenario must be one of {', '.join(SCENARIOS)}, got {scenario!r}")
    else:
        for section in SCENARIO_SECTIONS[scenario]:
            for key, (_, default) in SCHEMA[section].items():
                if default is REQUIRED and key not in values[section] and not parser.has_option(section, key):
                    problems.append(f"missing required key '{key}' in [{section}]")

    if not problems and scenario in SCENARIOS:
        problems.extend(_check_values(scenario, values))
    if problems:
        raise ValidationError(problems)

    cfg = ScenarioConfig(
        scenario=scenario,
        output_dir=values["scenario"]["output_dir"],
        seed=values["scenario"]["seed"],
        **{s: values[s] for s in ("physics", "numerics", "initial", "bohm", "er", "sweep", "tolerances")},
    )
    return cfg


def _check_values(scenario: str, values: dict) -> list[str]:
    problems = []
    if scenario in ("sg-run", "bohm-run"):
        p, n = values["physics"], values["numerics"]
        for key in ("m_e", "m_p"):
            if not p[key] > 0:
                problems.append(f"[physics] {key} must be positive")
        if not n["dt"] > 0:
            problems.append("[numerics] dt must be positive")
        if n["steps"] < 1:
            problems.append("[numerics] steps must be at least 1")
        if n["save_every"] < 1:
            problems.append("[numerics] save_every must be at least 1")
        for axis in ("z", "rho"):
            lo, hi, count = n[f"{axis}_min"], n[f"{axis}_max"], n[f"{axis}_n"]
            if not hi > lo:
                problems.append(f"[numerics] {axis}_max must exceed {axis}_min")
            if count < 2 or count & (count - 1):
                problems.append(f"[numerics] {axis}_n must be a power of two")
        if not p["internal_omega"] > 0:
            problems.append("[physics] internal_omega must be positive")
        i = values["initial"]
        if not i["sigma_cm"] > 0:
            problems.append("[initial] sigma_cm must be positive")
        if abs(i["spin_up"] ** 2 + i["spin_dn"] ** 2 - 1.0) > 1e-9:
            problems.append("[initial] spin_up^2 + spin_dn^2 must equal 1")
    if scenario == "bohm-run":
        b = values["bohm"]
        if b["n_traj"] < 0:
            problems.append("[bohm] n_traj must be nonnegative")
        if not 0 < b["dt_traj_ratio"] <= 1:
            problems.append("[bohm] dt_traj_ratio must lie in (0, 1]")
    if scenario == "er-demo":
        e = values["er"]
        for key in ("m1", "m2", "var1", "var2", "cm_var", "rho_var", "grid_sigmas"):
            if not e[key] > 0:
                problems.append(f"[er] {key} must be positive")
        if e["n"] < 2 or e["n"] & (e["n"] - 1):
            problems.append("[er] n must be a power of two")
    if scenario == "classical-sweep":
        s = values["sweep"]
        if not s["sigma1"] or not s["sigma2"] or not s["masses"]:
            problems.append("[sweep] sigma1, sigma2 and masses must be nonempty")
        if any(x <= 0 for x in s["sigma1"] + s["sigma2"]):
            problems.append("[sweep] widths must be positive")
        if any(a <= 0 or b <= 0 for a, b in s["masses"]):
            problems.append("[sweep] masses must be positive")
    return problems


def load_config(path, scenario: str | None = None) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), scenario)


def shipped_config_path(name: str) -> Path:
    """Path of a config file shipped with the package (e.g. ``"sg.conf"``)."""
    return Path(__file__).parent / "configs" / name
