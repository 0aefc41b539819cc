"""Prompt library: templates with ``{NAME}`` placeholders, schemas, presets."""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError

_PLACEHOLDER = re.compile(r"\{([A-Z_]+)\}")


@lru_cache(maxsize=None)
def _library(path: str | None = None) -> dict:
    if path is None:
        text = resources.files("aqllm.data").joinpath("prompts.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return json.loads(text)


def render(template: str, **values) -> str:
    """Substitute ``{NAME}`` placeholders; other braces are left alone."""

    def sub(m):
        key = m.group(1)
        if key not in values:
            raise ConfigurationError(f"template placeholder {{{key}}} has no value")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


def template(name: str) -> str:
    try:
        return _library()["templates"][name]
    except KeyError:
        raise ConfigurationError(f"no prompt template {name!r}") from None


def schema_ids() -> list[str]:
    return sorted(_library()["schemas"])


def schema(schema_id: str) -> dict:
    try:
        return _library()["schemas"][schema_id]
    except KeyError:
        raise ConfigurationError(f"no output schema {schema_id!r}") from None


def preset(name: str) -> str:
    try:
        return _library()["presets"][name]
    except KeyError:
        raise ConfigurationError(f"no prompt preset {name!r}") from None


def instructor_system_prompt() -> str:
    return template("instructor_system")
