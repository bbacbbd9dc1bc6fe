"""Run configuration: ``[section]`` headers with flat ``key = value`` lines.

``#`` starts a comment.  List-valued keys separate entries with ``;`` and
numbers within an entry with whitespace.  Every key is validated against
the schema below; errors name the key and line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import InvalidInputError


class ConfigError(InvalidInputError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


REQUIRED = object()


def _float(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False):
    def parse(text):
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        if v < lo or v > hi or (lo_open and v == lo) or (hi_open and v == hi):
            raise ValueError(f"must lie in {'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}")
        return v
    return parse


def _int(lo=-math.inf, hi=math.inf):
    def parse(text):
        v = int(text)
        if not lo <= v <= hi:
            raise ValueError(f"must lie in [{lo}, {hi}]")
        return v
    return parse


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    return parse


def _bool(text):
    t = text.lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError("must be on or off")


def _vector(n):
    def parse(text):
        v = tuple(float(x) for x in text.split())
        if len(v) != n or not all(map(math.isfinite, v)):
            raise ValueError(f"expected {n} finite numbers")
        return v
    return parse


def _entries(n, positive=()):
    """``;``-separated entries of ``n`` numbers; indices in ``positive`` must be > 0."""
    def parse(text):
        out = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            v = _vector(n)(chunk)
            if any(v[i] <= 0 for i in positive):
                raise ValueError("widths must be positive")
            out.append(v)
        return tuple(out)
    return parse


def _box(text):
    v = _vector(6)(text)
    if any(v[2 * i + 1] <= v[2 * i] for i in range(3)):
        raise ValueError("each upper bound must exceed the lower bound")
    return v


def _text(text):
    if not text:
        raise ValueError("must not be empty")
    return text


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "domain": {"box": (_box, REQUIRED)},
    "mesh": {"n": (_int(1, 64), REQUIRED), "degree": (_int(1, 2), 2)},
    "model": {
        "kind": (_choice("kohn_sham", "linear"), "kohn_sham"),
        "n_orbitals": (_int(1, 64), 1),
        "coulomb": (_entries(4), ()),
        "gaussian_wells": (_entries(5, positive=(4,)), ()),
        "projectors": (_entries(5, positive=(4,)), ()),
        "xc": (_choice("none", "x_alpha"), "none"),
        "xc_alpha": (_float(0.0, 1.5, lo_open=True), 2.0 / 3.0),
        "hartree": (_bool, False),
        "hartree_method": (_choice("poisson", "direct"), "poisson"),
        "hartree_tolerance": (_float(0.0, 1.0, lo_open=True), 0.01),
    },
    "linear": {
        "solution": (_choice("peak", "sine", "bubble"), "peak"),
        "peak_center": (_vector(3), (0.3, 0.4, 0.6)),
        "peak_sharpness": (_float(0.0, 1e6, lo_open=True), 50.0),
    },
    "afem": {
        "strategy": (_choice("dorfler", "maximum"), "dorfler"),
        "theta": (_float(0.0, 1.0, True, True), 0.5),
        "gamma_m": (_float(0.0, 1.0, lo_open=True), 0.5),
        "max_iters": (_int(1, 1000), 20),
        "eta_tol": (_float(0.0, lo_open=True), 1e-8),
        "max_ndof": (_int(1, 10 ** 8), 200_000),
    },
    "scf": {
        "tol": (_float(0.0, 1.0, lo_open=True), 1e-7),
        "mixing": (_float(0.0, 1.0, lo_open=True), 0.3),
        "max_iter": (_int(1, 10 ** 5), 300),
        "eig_tol": (_float(0.0, 1.0, lo_open=True), 1e-8),
        "seed": (_int(0, 2 ** 32 - 1), 0),
    },
    "output": {
        "dir": (_text, "out"),
        "vtk": (_bool, False),
        "expected_energy": (_float(), None),
        "energy_band": (_float(0.0), None),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``sections[name][key]`` holds typed values."""

    sections: dict
    name: str = "config"

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def replace(self, section: str, **values) -> "RunConfig":
        new = {s: dict(v) for s, v in self.sections.items()}
        new[section].update(values)
        return RunConfig(new, self.name)


def parse_config(text: str, name: str = "config") -> RunConfig:
    """Parse and validate; the first problem raises ``ConfigError`` with its line number."""
    seen: dict[tuple[str, str], int] = {}
    raw: dict[str, dict[str, tuple[str, int]]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            raw.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}] (lines {seen[section, key]} and {lineno})",
                              lineno)
        seen[section, key] = lineno
        raw[section][key] = (value, lineno)

    parsed: dict[tuple[str, str], Any] = {}
    # values in line order, so the reported error is the first one in the file
    for (sec, key), lineno in sorted(seen.items(), key=lambda kv: kv[1]):
        value = raw[sec][key][0]
        try:
            parsed[sec, key] = SCHEMA[sec][key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} = {value!r}: {exc}", lineno) from None
    sections: dict[str, dict[str, Any]] = {}
    for sec, keys in SCHEMA.items():
        sections[sec] = {}
        for key, (_, default) in keys.items():
            if (sec, key) in parsed:
                sections[sec][key] = parsed[sec, key]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{sec}]")
            else:
                sections[sec][key] = default
    _cross_check(sections)
    return RunConfig(sections, name)


def _cross_check(s):
    box = np.array(s["domain"]["box"]).reshape(3, 2)
    for entry in s["model"]["coulomb"] + s["model"]["gaussian_wells"] + s["model"]["projectors"]:
        c = np.array(entry[1:4])
        if np.any(c < box[:, 0]) or np.any(c > box[:, 1]):
            raise ConfigError(f"center {tuple(c)} lies outside the domain box")
    if s["model"]["kind"] == "linear":
        c = np.array(s["linear"]["peak_center"])
        if np.any(c < box[:, 0]) or np.any(c > box[:, 1]):
            raise ConfigError(f"peak_center {tuple(c)} lies outside the domain box")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(" ".join(repr(x) for x in e) for e in v)
        return " ".join(repr(x) for x in v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Text that parses back to an equal configuration (defaults written out)."""
    lines = []
    for sec, keys in cfg.sections.items():
        lines.append(f"[{sec}]")
        for key, v in keys.items():
            if v is None or v == ():
                continue
            lines.append(f"{key} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)


# -- builders --------------------------------------------------------------

def build_model(cfg: RunConfig):
    from .model import CoulombWell, GaussianWell, KohnShamModel, Projector, x_alpha
    m = cfg["model"]
    return KohnShamModel(
        n_orbitals=m["n_orbitals"],
        domain_box=np.array(cfg["domain"]["box"]).reshape(3, 2),
        coulomb_wells=tuple(CoulombWell(z, (x, y, w)) for z, x, y, w in m["coulomb"]),
        gaussian_wells=tuple(GaussianWell(d, (x, y, z), s) for d, x, y, z, s in m["gaussian_wells"]),
        projectors=tuple(Projector(a, (x, y, z), s) for a, x, y, z, s in m["projectors"]),
        xc=x_alpha(m["xc_alpha"]) if m["xc"] == "x_alpha" else None,
        hartree=m["hartree"],
        hartree_method=m["hartree_method"],
        name=cfg.name,
    )


def build_mesh(cfg: RunConfig):
    from .mesh import build_box_mesh
    return build_box_mesh(cfg["domain"]["box"], cfg["mesh"]["n"])


def build_afem_config(cfg: RunConfig):
    from .afem import AfemConfig
    from .scf import ScfConfig
    a, s = cfg["afem"], cfg["scf"]
    return AfemConfig(strategy=a["strategy"], theta=a["theta"], gamma_m=a["gamma_m"],
                      max_iters=a["max_iters"], eta_tol=a["eta_tol"], max_ndof=a["max_ndof"],
                      degree=cfg["mesh"]["degree"],
                      scf=ScfConfig(tol=s["tol"], mixing=s["mixing"], max_iter=s["max_iter"],
                                    eig_tol=s["eig_tol"], seed=s["seed"]))


def build_linear_problem(cfg: RunConfig):
    from .presets import manufactured_problem
    lin = cfg["linear"]
    return manufactured_problem(lin["solution"], np.array(cfg["domain"]["box"]).reshape(3, 2),
                                center=lin["peak_center"], sharpness=lin["peak_sharpness"])
