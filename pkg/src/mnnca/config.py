"""JSON config loading with schema validation and line-numbered errors."""
from __future__ import annotations

import json
import re
from pathlib import Path

import jsonschema

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_INT = {"type": "integer"}
_NUM = {"type": "number"}

NEIGHBORHOOD = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "radius": {"type": "integer", "minimum": 1},
        "kernels": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": ["identity", "sobel_x", "sobel_y", "laplacian"]}},
    },
}

AUTOMATON = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "channels": {"type": "integer", "minimum": 4},
        "hidden": {"oneOf": [{"type": "integer", "minimum": 1},
                             {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
        "fire_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "mix": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["sum", "random", "env", "output"]},
                "reserved": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "rules": {"type": "array", "minItems": 1, "items": NEIGHBORHOOD},
    },
}

SEED = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["perlin", "uniform"]},
        "lo": _NUM, "hi": _NUM, "seed": _INT,
        "frequency": {"type": "integer", "minimum": 1},
        "octaves": {"type": "integer", "minimum": 1, "maximum": 8},
        "persistence": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "periodic": {"type": "boolean"},
    },
}

LOSS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["sw", "gram"]},
        "projections": {"type": "integer", "minimum": 8},
        "levels": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False,
            "properties": {"factor": {"enum": [1, 2, 4]},
                           "filters": {"type": "integer", "minimum": 1},
                           "size": {"type": "integer", "minimum": 1}}}},
        "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "bank_seed": _INT,
    },
}

TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "automaton": AUTOMATON,
        "seed": SEED,
        "loss": LOSS,
        "batch_size": {"type": "integer", "minimum": 1},
        "steps_min": {"type": "integer", "minimum": 1},
        "steps_max": {"type": "integer", "minimum": 1},
        "batch_count": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "normalize_grads": {"type": "boolean"},
        "resolution": {"type": "integer", "minimum": 4},
        "master_seed": _INT,
        "pool_size": {"type": "integer", "minimum": 0},
        "overflow_weight": {"type": "number", "minimum": 0},
    },
}


def _line_of(text: str, path, unexpected: str | None = None) -> int:
    """Best-effort line number of the JSON key at ``path`` (list indices skipped)."""
    pos = 0
    keys = [p for p in path if isinstance(p, str)]
    if unexpected is not None:
        keys.append(unexpected)
    for key in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _format(err: jsonschema.ValidationError, text: str, source: str) -> str:
    unexpected = None
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        unexpected = extra[0] if extra else None
    line = _line_of(text, list(err.absolute_path), unexpected)
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{source}:{line}: {where}: {err.message}"


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft7Validator(TRAIN)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("\n".join(_format(e, text, source) for e in errors))
    try:
        return TrainConfig.from_json(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def parse_seed_spec(text: str):
    """Seed spec from inline JSON or a path to a JSON file."""
    from .seeds import seed_spec_from_json

    p = Path(text)
    raw = p.read_text() if not text.lstrip().startswith("{") and p.is_file() else text
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"seed spec: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    errors = list(jsonschema.Draft7Validator(SEED).iter_errors(data))
    if errors:
        raise ConfigError("\n".join(_format(e, raw, "seed-spec") for e in errors))
    return seed_spec_from_json(data)
