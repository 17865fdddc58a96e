"""Pipeline configuration (INI) and append-only structured logs.

Every value may be overridden by an environment variable named
``FACETWIN_<SECTION>_<KEY>``, e.g. ``FACETWIN_SOLVER_OMEGA_C=30``.
Precedence: built-in defaults < config file < environment < command line.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .solver import SolverConfig

ENV_PREFIX = "FACETWIN_"
LOG_SCHEMA = "facetwin-log"
LOG_SCHEMA_VERSION = 1


@dataclass
class PathsSection:
    template: str = ""
    anchors: str = ""
    basis: str = ""
    manifest: str = ""


@dataclass
class SolverSection:
    iterations: int = 5
    omega_c: float = 25.0
    omega_r: float = 10.0
    lambda_delta: float = 4.0
    lambda_f: float = 5.0
    lambda_q: float = 5.0
    inner_iterations: int = 1
    damping: float = 1e-3
    max_retries: int = 12


@dataclass
class CameraSection:
    swap_principal_point: bool = False


@dataclass
class SamplingSection:
    m: int = 5
    ratios: str = "asian:0.65,white:0.30,black:0.05"
    gender_ratios: str = "male:0.5,female:0.5"


@dataclass
class TextureSection:
    resolution: int = 2048
    depth_eps_fraction: float = 1e-3


@dataclass
class EvaluationSection:
    radii: str = "80,90,100,110"
    tolerance: float = 5.0
    center: str = "nose_tip"
    allow_scale: bool = False


@dataclass
class OutputSection:
    directory: str = "."
    seed: int = 0


@dataclass
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    solver: SolverSection = field(default_factory=SolverSection)
    camera: CameraSection = field(default_factory=CameraSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    texture: TextureSection = field(default_factory=TextureSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(iterations=s.iterations, omega_c=s.omega_c, omega_r=s.omega_r,
                            lambda_delta=s.lambda_delta, lambda_f=s.lambda_f, lambda_q=s.lambda_q,
                            inner_iterations=s.inner_iterations, damping=s.damping, max_retries=s.max_retries)

    def validate(self) -> None:
        for name in ("omega_c", "omega_r", "lambda_delta", "lambda_f", "lambda_q", "damping"):
            if getattr(self.solver, name) < 0:
                raise ValueError(f"solver.{name} must be non-negative")
        if self.solver.iterations < 1:
            raise ValueError("solver.iterations must be >= 1")
        if self.sampling.m < 1:
            raise ValueError("sampling.m must be >= 1")
        if self.texture.resolution < 1:
            raise ValueError("texture.resolution must be positive")

    def check_paths(self, *names: str) -> None:
        """Raise ``FileNotFoundError`` for any named path that is unset or missing."""
        for name in names:
            value = getattr(self.paths, name)
            if not value or not Path(value).exists():
                raise FileNotFoundError(f"paths.{name}: {value or '(unset)'} does not exist")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for sec in fields(self):
            parser[sec.name] = {k: _format(v) for k, v in asdict(getattr(self, sec.name)).items()}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, kind: type, where: str) -> Any:
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ValueError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def _apply(cfg: PipelineConfig, section: str, key: str, raw: str, where: str) -> None:
    if not hasattr(cfg, section):
        raise ValueError(f"{where}: unknown section [{section}]")
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in fields(sec)}
    if key not in types:
        raise ValueError(f"{where}: unknown key {section}.{key}")
    kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
    setattr(sec, key, _coerce(raw, kind, where))


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser[section].items():
                _apply(cfg, section, key, raw, f"{path}")
    env = os.environ if env is None else env
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if hasattr(cfg, section) and key:
            _apply(cfg, section, key, env[name], name)
    cfg.validate()
    return cfg


def parse_ratios(text: str) -> dict[str, float]:
    """``"asian:0.65,white:0.3"`` or a bare ``"0.65,0.30,0.05"`` (asian, white, black order)."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if all(":" not in p for p in parts):
        names = ("asian", "white", "black")
        if len(parts) != len(names):
            raise ValueError("bare ratios need three values: asian,white,black")
        pairs = zip(names, parts)
    else:
        pairs = (p.split(":", 1) for p in parts)
    out = {}
    for name, val in pairs:
        v = float(val)
        if v < 0:
            raise ValueError("ratios must be non-negative")
        out[name.strip().lower()] = v
    if sum(out.values()) <= 0:
        raise ValueError("ratios sum to zero")
    return out


class StructuredLog:
    """Append-only JSON-lines log whose first line declares the schema."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self._write({"schema": LOG_SCHEMA, "version": LOG_SCHEMA_VERSION})

    def _write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write(self, event: str, **data: Any) -> None:
        self._write({"event": event, **data})


def read_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != LOG_SCHEMA:
        raise ValueError(f"{path}: not a facetwin log")
    if header.get("version") != LOG_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported log version {header.get('version')}")
    return [json.loads(line) for line in lines[1:] if line.strip()]
