"""Loading and filling the plain-text prompt templates under ``prompts/``."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Optional

PROMPT_DIR = Path(__file__).with_name("prompts")
_SLOT = re.compile(r"\{([A-Za-z_][A-Za-z_0-9]*)\}")


class TemplateSet:
    """Templates read from a directory, falling back to the packaged ones."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = Path(directory) if directory else None
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in self._cache:
            path = None
            if self.directory is not None and (self.directory / name).exists():
                path = self.directory / name
            else:
                path = PROMPT_DIR / name
            self._cache[name] = path.read_text(encoding="utf-8")
        return self._cache[name]

    def render(self, name: str, **slots) -> str:
        return fill(self.get(name), **slots)


def fill(template: str, **slots) -> str:
    """Replace ``{name}`` placeholders; unknown braces are left untouched."""

    def sub(m):
        key = m.group(1)
        return str(slots[key]) if key in slots else m.group(0)

    return _SLOT.sub(sub, template)


def grammar_text() -> str:
    return (PROMPT_DIR / "grammar.ebnf").read_text(encoding="utf-8")
