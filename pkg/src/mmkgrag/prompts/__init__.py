"""Prompt templates and their tiny rendering engine.

Templates are plain text files shipped with the package.  Slots use
``{name}`` syntax; rendering replaces only the slots the caller provides
and leaves every other brace alone, so templates may freely contain JSON
examples.  A config may point ``prompt_dir`` at a directory whose files
override the packaged ones by name, making every prompt editable without
touching code.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

_SLOT = re.compile(r"\{(\w+)\}")

TEMPLATE_NAMES = (
    "initial_extraction.txt",
    "refinement.txt",
    "keywords.txt",
    "graph_answer.txt",
    "page_answer.txt",
    "synthesis.txt",
    "synthesis_single.txt",
    "single_pass.txt",
    "personas.txt",
    "tasks.txt",
    "questions.txt",
    "judge_pairwise.txt",
    "judge_local.txt",
)


def load_template(name: str, prompt_dir: str | Path | None = None) -> str:
    """Load a template by file name, preferring ``prompt_dir`` overrides."""
    if prompt_dir:
        override = Path(prompt_dir) / name
        if override.is_file():
            return override.read_text(encoding="utf-8")
    try:
        return (resources.files(__name__) / name).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"unknown prompt template {name!r}") from None


def render_template(template: str, **slots: str) -> str:
    """Fill ``{name}`` slots; unknown braces pass through untouched."""
    return _SLOT.sub(lambda m: str(slots.get(m.group(1), m.group(0))), template)
