"""JSON-schema validation for architecture files."""

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from .spec import ArchSpecError


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("effnetv2").joinpath("schemas", name).read_text()
    return json.loads(text)


def schema_errors(data, name: str) -> list[str]:
    """Every violation of schema ``name``, as ``path: message`` strings."""
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    return [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]


def validate_arch_dict(data) -> None:
    problems = schema_errors(data, "archspec.schema.json")
    if problems:
        raise ArchSpecError("; ".join(problems))
