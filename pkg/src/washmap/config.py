"""Pipeline configuration loaded from TOML, with CLI overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import tomli

from .census import INDICATORS
from .errors import MissingInputError, ValidationError
from .features import LOW_ACCESS_METERS
from .forest import ForestParams
from .geo import GridSpec


@dataclass(frozen=True)
class CVSettings:
    n_folds: int = 5
    mode: str = "partition"

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValidationError("cv.n_folds must be >= 2")
        if self.mode not in ("partition", "resample"):
            raise ValidationError(f"cv.mode must be 'partition' or 'resample', got {self.mode!r}")


@dataclass(frozen=True)
class ExplainSettings:
    n_samples: int = 250

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("explain.n_samples must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    out: Path = Path("run")
    seed: int = 0
    threads: Optional[int] = None
    indicators: List[str] = field(default_factory=lambda: list(INDICATORS))
    nodata_area_threshold: float = 0.5
    low_access_threshold: float = LOW_ACCESS_METERS
    grid: Optional[GridSpec] = None
    forest: ForestParams = ForestParams()
    cv: CVSettings = CVSettings()
    explain: ExplainSettings = ExplainSettings()

    def __post_init__(self):
        if not self.indicators:
            raise ValidationError("indicators must not be empty")
        bad = [i for i in self.indicators if i not in INDICATORS]
        if bad:
            raise ValidationError(f"unknown indicators {bad}")
        if not 0.0 <= self.nodata_area_threshold <= 1.0:
            raise ValidationError("nodata_area_threshold must be in [0, 1]")
        if not self.low_access_threshold >= 0:
            raise ValidationError("low_access_threshold must be >= 0")
        if self.threads is not None and self.threads < 1:
            raise ValidationError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["manifest"] = str(self.manifest)
        d["out"] = str(self.out)
        d["grid"] = self.grid.to_dict() if self.grid else None
        return d

    def digest(self) -> str:
        """sha256 of the effective config, excluding the output location and thread count."""
        d = self.to_dict()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"forest": ForestParams, "cv": CVSettings, "explain": ExplainSettings}


def _check_keys(table: dict, allowed, where: str):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown config keys in {where}: {unknown}")


def config_from_dict(doc: dict, base: Path = Path(".")) -> PipelineConfig:
    top = {f.name for f in fields(PipelineConfig)}
    _check_keys(doc, top, "top level")
    if "manifest" not in doc:
        raise ValidationError("config must name a manifest")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ValidationError(f"[{key}] must be a table")
            _check_keys(value, {f.name for f in fields(cls)}, f"[{key}]")
            kwargs[key] = cls(**value)
        elif key == "grid":
            kwargs[key] = GridSpec.from_dict(value)
        elif key in ("manifest", "out"):
            p = Path(value)
            kwargs[key] = p if p.is_absolute() else base / p
        else:
            kwargs[key] = value
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as e:
        raise ValidationError(str(e)) from e
    if "seed" not in doc.get("forest", {}):
        cfg = replace(cfg, forest=replace(cfg.forest, seed=cfg.seed))
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config {path} does not exist")
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as e:
        raise ValidationError(f"{path}: {e}") from e
    return config_from_dict(doc, path.parent)


def with_overrides(cfg: PipelineConfig, seed=None, threads=None, out=None) -> PipelineConfig:
    """Apply CLI flags. ``--seed`` also reseeds the forest."""
    changes = {}
    if seed is not None:
        changes["seed"] = seed
        changes["forest"] = replace(cfg.forest, seed=seed)
    if threads is not None:
        changes["threads"] = threads
    if out is not None:
        changes["out"] = Path(out)
    return replace(cfg, **changes) if changes else cfg


def effective_threads(cfg: PipelineConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def write_config_toml(path, manifest, out="run", seed=0, extra: str = ""):
    """Minimal config for a generated world."""
    Path(path).write_text(
        f'manifest = "{manifest}"\nout = "{out}"\nseed = {seed}\n'
        'indicators = ["water", "sewage", "toilet"]\n'
        "\n[forest]\nn_trees = 100\nmin_samples_leaf = 1\n"
        '\n[cv]\nn_folds = 5\nmode = "partition"\n'
        "\n[explain]\nn_samples = 250\n" + extra,
        encoding="utf-8",
    )
