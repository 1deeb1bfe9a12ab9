"""Experiment configuration files: ``key = value`` lines grouped in [sections].

Values are parsed as JSON when possible (numbers, lists, matrices, true/false,
null) and kept as strings otherwise.  Example::

    [experiment]
    name = pendulum
    seed = 7

    [estimation]
    beta = 0.01
    kernel = epanechnikov
    bandwidth = 0.05
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .sysmodel import SystemModel

SECTIONS = ("experiment", "model", "estimation", "synthesis", "learning")


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_sections(path):
    """{section: {key: value}} from a config file; ParseError on malformed lines."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ParseError(f"{path}: malformed line", row=lineno) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"{path}: key before any [section]", row=exc.lineno) from exc
    return {s: {k: _value(v) for k, v in cp.items(s)} for s in cp.sections()}


def write_sections(path, sections):
    with open(path, "w", encoding="utf-8") as fh:
        for name, values in sections.items():
            fh.write(f"[{name}]\n")
            for k, v in values.items():
                if isinstance(v, np.ndarray):
                    v = v.tolist()
                fh.write(f"{k} = {v if isinstance(v, str) else json.dumps(v)}\n")
            fh.write("\n")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: str = "out"
    model: dict = field(default_factory=dict)
    estimation: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)
    learning: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        sec = read_sections(path)
        unknown = set(sec) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections: {sorted(unknown)}")
        exp = sec.get("experiment", {})
        if "seed" not in exp:
            raise ConfigError("[experiment] seed is mandatory")
        for key in ("data",):
            ref = sec.get("estimation", {}).get(key)
            if ref is not None and not os.path.exists(ref):
                raise ConfigError(f"referenced file does not exist: {ref}")
        return cls(str(exp.get("name", "experiment")), int(exp["seed"]), str(exp.get("out", "out")),
                   sec.get("model", {}), sec.get("estimation", {}), sec.get("synthesis", {}),
                   sec.get("learning", {}))


def load_model(path):
    """SystemModel from a [model] section with A, B, G and optional C_q as JSON matrices."""
    sec = read_sections(path)
    m = sec.get("model", sec.get(next(iter(sec), "model"), {}))
    missing = [k for k in ("A", "B", "G") if k not in m]
    if missing:
        raise ConfigError(f"model file lacks {missing}")
    try:
        return SystemModel(np.array(m["A"], float), np.array(m["B"], float), np.array(m["G"], float),
                           None if m.get("C_q") is None else np.array(m["C_q"], float),
                           bool(m.get("check_binary_G", True)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model matrices: {exc}") from exc


def save_model(path, model: SystemModel):
    write_sections(path, {"model": {"A": model.A, "B": model.B, "G": model.G,
                                    "C_q": None if model.C_q is None else model.C_q,
                                    "check_binary_G": model.check_binary_G}})
