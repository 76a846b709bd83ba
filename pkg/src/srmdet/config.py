"""Run configuration: one JSON document, overridable from the command line.

Example::

    {
      "engine": {"mode": "sparcnn", "seed": 7, "budgets": {"LARGE": 50, "MEDIUM": 150, "SMALL": 20},
                 "policy": {"base_tp": 0.5}},
      "scorer": {"spec": "oracle", "noise_sigma": 0.05, "seed": 0, "timeout": 30},
      "evaluation": {"iou": 0.5, "difficult": "ignore", "eleven_point": false},
      "workers": 1
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from .detect import EngineConfig
from .evaluation import IGNORE, INCLUDE


@dataclass
class ScorerSpec:
    spec: str = "oracle"
    noise_sigma: float = 0.0
    seed: int = 0
    timeout: float = 30.0

    def __post_init__(self):
        if self.spec != "oracle" and not self.spec.startswith("external:"):
            raise ValueError(f"scorer must be 'oracle' or 'external:CMD', got {self.spec!r}")

    @property
    def command(self) -> str | None:
        return self.spec[len("external:"):] if self.spec.startswith("external:") else None


@dataclass
class EvaluationSpec:
    iou: float = 0.5
    difficult: str = IGNORE
    eleven_point: bool = False

    def __post_init__(self):
        if self.difficult not in (INCLUDE, IGNORE):
            raise ValueError(f"difficult must be {INCLUDE!r} or {IGNORE!r}")


@dataclass
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    scorer: ScorerSpec = field(default_factory=ScorerSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    workers: int = 1

    def to_dict(self) -> dict:
        return {"engine": self.engine.to_dict(), "scorer": asdict(self.scorer),
                "evaluation": asdict(self.evaluation), "workers": self.workers}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - {"engine", "scorer", "evaluation", "workers"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            engine=EngineConfig.from_dict(d.get("engine", {})),
            scorer=_strict(ScorerSpec, d.get("scorer", {}), "scorer"),
            evaluation=_strict(EvaluationSpec, d.get("evaluation", {}), "evaluation"),
            workers=int(d.get("workers", default_workers())),
        )


def _strict(cls, d: Mapping, section: str):
    bad = set(d) - set(cls.__dataclass_fields__)
    if bad:
        raise ValueError(f"unknown {section} keys: {sorted(bad)}")
    return cls(**d)


def default_workers() -> int:
    return int(os.environ.get("SRMDET_WORKERS", "1"))


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig(workers=default_workers())
    with open(path, encoding="utf-8") as f:
        return RunConfig.from_dict(json.load(f))


def write_resolved(config: RunConfig, output_path: str | os.PathLike, command: str) -> Path:
    """Persist the fully-resolved config beside an output file."""
    out = Path(str(output_path) + ".config.json")
    out.write_text(json.dumps({"command": command, **config.to_dict()}, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    return out
