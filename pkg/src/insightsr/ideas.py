"""Reflection on evaluated candidates and the persistent idea library.

Each candidate is classified as POSITIVE (beats the best score so far),
NEGATIVE (does not) or INVALID (could not be parsed, fitted or evaluated).
The idea-role model writes a short lesson for it, which is appended to the
library. Prompts draw a few ideas per category from the most recent entries.
"""
from __future__ import annotations

import enum
import json
import math
import os
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .llmio import DEFAULT_SAMPLING, Backend, ChatRequest, Sampling
from .templating import TemplateSet


class Category(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INVALID = "invalid"


CATEGORY_ORDER = (Category.POSITIVE, Category.NEGATIVE, Category.INVALID)


def categorize(outcome, s_star: float) -> Category:
    """Errors are INVALID; otherwise POSITIVE iff the score strictly beats ``s_star``."""
    if isinstance(outcome, BaseException):
        return Category.INVALID
    score = outcome.score
    if not math.isfinite(score):
        return Category.INVALID
    return Category.POSITIVE if score > s_star else Category.NEGATIVE


@dataclass(frozen=True)
class Idea:
    category: Category
    content: str
    context: str
    fitness: Optional[float]
    iteration: int
    id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if self.category is Category.INVALID and self.fitness is not None:
            raise ValueError("INVALID ideas carry no fitness")

    def to_json(self) -> dict:
        out = {"id": self.id, "iteration": self.iteration, "content": self.content, "context": self.context}
        if self.fitness is not None:
            out["fitness"] = self.fitness
        return out

    @classmethod
    def from_json(cls, category: Category, d: dict) -> "Idea":
        return cls(
            category=category,
            content=d["content"],
            context=d["context"],
            fitness=d.get("fitness"),
            iteration=d["iteration"],
            id=d["id"],
        )


class IdeaLibrary:
    """Three append-only lists of ideas, mirrored to a JSON file on every append.

    File layout: ``{"positive": [...], "negative": [...], "invalid": [...]}``,
    each element ``{id, iteration, content, context, fitness?}``.
    """

    def __init__(self, path: Optional[os.PathLike] = None):
        self.path = Path(path) if path is not None else None
        self._lists: dict[Category, list[Idea]] = {c: [] for c in CATEGORY_ORDER}
        self._next_id = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return sum(len(v) for v in self._lists.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, IdeaLibrary):
            return NotImplemented
        return self._lists == other._lists and self._next_id == other._next_id

    def entries(self, category: Category) -> list[Idea]:
        return list(self._lists[Category(category)])

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self._lists[c]) for c in CATEGORY_ORDER)

    def append(self, idea: Idea) -> Idea:
        with self._lock:
            stored = replace(idea, id=self._next_id)
            self._lists[stored.category].append(stored)
            self._next_id += 1
            if self.path is not None:
                self._flush()
        return stored

    def snapshot(self) -> dict[Category, tuple[Idea, ...]]:
        with self._lock:
            return {c: tuple(v) for c, v in self._lists.items()}

    def to_json(self) -> dict:
        return {c.value: [i.to_json() for i in self._lists[c]] for c in CATEGORY_ORDER}

    def _flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, self.path)

    @classmethod
    def load(cls, path: os.PathLike) -> "IdeaLibrary":
        lib = cls(path)
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        ids = []
        for c in CATEGORY_ORDER:
            for d in data.get(c.value, []):
                idea = Idea.from_json(c, d)
                lib._lists[c].append(idea)
                ids.append(idea.id)
        lib._next_id = max(ids) + 1 if ids else 0
        return lib

    @classmethod
    def open(cls, path: os.PathLike) -> "IdeaLibrary":
        """Load ``path`` when it exists (warm restart), else start empty."""
        return cls.load(path) if Path(path).exists() else cls(path)


def update(lib: IdeaLibrary, idea: Idea) -> IdeaLibrary:
    lib.append(idea)
    return lib


def sample_recent(
    lib: IdeaLibrary,
    lam: float = 0.5,
    per_category: int = 3,
    seed: int = 0,
    categories: Iterable[Category] = CATEGORY_ORDER,
) -> list[Idea]:
    """Up to ``per_category`` ideas per category from its last ``ceil(lam*len)`` entries."""
    if not 0 < lam <= 1:
        raise ValueError("lam must be in (0, 1]")
    if per_category <= 0:
        raise ValueError("per_category must be positive")
    wanted = {Category(c) for c in categories}
    snap = lib.snapshot()
    rng = np.random.default_rng(seed)
    out: list[Idea] = []
    for c in CATEGORY_ORDER:
        entries = snap[c]
        if c not in wanted or not entries:
            continue
        pool_size = math.ceil(lam * len(entries))
        pool = entries[len(entries) - pool_size:]
        picks = rng.choice(len(pool), size=min(per_category, len(pool)), replace=False)
        out.extend(pool[i] for i in sorted(picks))
    return out


def extract(
    category: Category,
    context: str,
    prompt_state: str,
    backend: Backend,
    *,
    fitness: Optional[float] = None,
    iteration: int = 0,
    dataset_description: str = "",
    templates: Optional[TemplateSet] = None,
    sampling: Sampling = DEFAULT_SAMPLING["idea"],
    on_prompt=None,
) -> Idea:
    """Ask the idea-role model for a lesson on one candidate.

    ``context`` describes the candidate: rendered equation and score, or the
    raw output plus the error for INVALID ones.
    """
    category = Category(category)
    templates = templates or TemplateSet()
    system = templates.get("system_idea.txt").strip()
    user = templates.render(
        f"idea_{category.value}.txt",
        dataset_description=dataset_description,
        context=context,
        prompt_history=prompt_state,
    )
    if on_prompt is not None:
        on_prompt("idea", system, user)
    resp = backend.complete(ChatRequest("idea", system, user, sampling, 1))
    return Idea(
        category=category,
        content=resp.completions[0].strip(),
        context=context,
        fitness=None if category is Category.INVALID else fitness,
        iteration=iteration,
    )


def format_ideas(ideas: Sequence[Idea]) -> str:
    labels = {
        Category.POSITIVE: "What worked",
        Category.NEGATIVE: "What did not help",
        Category.INVALID: "Errors to avoid",
    }
    blocks = []
    for c in CATEGORY_ORDER:
        items = [i for i in ideas if i.category is c]
        if items:
            blocks.append(f"{labels[c]}:\n" + "\n".join(f"- {i.content}" for i in items))
    return "\n\n".join(blocks)
