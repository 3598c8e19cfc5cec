"""JSON run configuration with schema validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import jsonschema

from .adapters import RouterKind
from .bench import TrainConfig


class ConfigError(ValueError):
    pass


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "method": {"enum": ["mor", "lora", "moelora"]},
        "d_in": {"type": "integer", "minimum": 1},
        "d_out": {"type": "integer", "minimum": 1},
        "tag_width": {"type": "integer", "minimum": 1},
        "n_tasks": {"type": "integer", "minimum": 1},
        "r": {"type": "integer", "minimum": 1},
        "n_experts": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "router": {"enum": ["learnable", "mean_pool", "balanced"]},
        "aux_coefficient": {"type": "number", "minimum": 0},
        "optimizer": {"enum": ["adam", "sgd"]},
        "lr": {"type": "number", "minimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "teacher_seed": {"type": ["integer", "null"], "minimum": 0},
        "log_every": {"type": "integer", "minimum": 1},
        "eval_every": {"type": "integer", "minimum": 1},
        "n_eval": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
    },
}


@dataclass
class RunConfig:
    method: str = "mor"
    d_in: int = 32
    d_out: int = 24
    tag_width: int = 4
    n_tasks: int = 4
    r: int = 8
    n_experts: int = 4
    alpha: float = 32.0
    router: str = "learnable"
    aux_coefficient: float = 0.0
    optimizer: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 20_000
    batch_size: int = 8
    dropout: float = 0.05
    seed: int = 0
    teacher_seed: int | None = None
    log_every: int = 50
    eval_every: int = 1000
    n_eval: int = 256
    output_dir: str = "runs/latest"

    @property
    def teacher_seed_value(self) -> int:
        return self.seed if self.teacher_seed is None else self.teacher_seed

    def router_kind(self) -> RouterKind:
        if self.router == "balanced":
            return RouterKind.balanced(self.aux_coefficient)
        return RouterKind(self.router)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def _format_path(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    if not path and error.validator == "additionalProperties":
        return "<root>"
    return path or "<root>"


def config_from_dict(data) -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_format_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    cfg = RunConfig(**data)
    if not cfg.n_tasks <= cfg.tag_width <= cfg.d_in:
        raise ConfigError("tag_width: need n_tasks <= tag_width <= d_in")
    if cfg.r > min(cfg.d_in, cfg.d_out):
        raise ConfigError("r: rank must not exceed min(d_in, d_out)")
    if cfg.aux_coefficient and cfg.router != "balanced":
        raise ConfigError("aux_coefficient: only valid with router 'balanced'")
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)
