"""Data-aware insight: free-text structural analysis of the data.

An initial insight is produced from a uniform sample of training rows. Each
time the search finds a new best equation, its residuals are attached to a
fresh sample and the data-role model is asked to refine the previous insight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .data import Dataset, ResampledView, resample
from .expr import evaluate, render
from .llmio import DEFAULT_SAMPLING, Backend, ChatRequest, Sampling
from .templating import TemplateSet

VIEW_SIZE = 100

PromptHook = Optional[Callable[[str, str, str], None]]


class InsightError(Exception):
    pass


@dataclass(frozen=True)
class Insight:
    content: str
    iteration: int
    trigger_score: Union[float, str]
    version: int
    source_view_seed: int

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "iteration": self.iteration,
            "trigger_score": self.trigger_score,
            "source_view_seed": self.source_view_seed,
            "content": self.content,
        }


def _fmt(value: float) -> str:
    return f"{value:>14.6g}"


def format_rows(view: ResampledView) -> str:
    """Fixed-width table: variable names, target, and residual when present."""
    header = list(view.variable_names) + [view.target_name]
    if view.has_residuals:
        header.append("residual")
    lines = ["".join(f"{h:>14}" for h in header)]
    for row in view.rows:
        cells = [_fmt(v) for v in row.x] + [_fmt(row.y)]
        if row.residual is not None:
            cells.append(_fmt(row.residual))
        lines.append("".join(cells))
    return "\n".join(lines)


def describe_dataset(data: Dataset) -> str:
    parts = [data.description or f"Find an equation for {data.target_name}."]
    inputs = ", ".join(f"{v.name} ({v.description or v.name}{', ' + v.unit if v.unit else ''})" for v in data.variables)
    parts.append(f"Target: {data.target_name}. Inputs: {inputs}.")
    return " ".join(parts)


def _ask(backend: Backend, user_prompt: str, templates: TemplateSet, sampling: Sampling, on_prompt: PromptHook) -> str:
    system = templates.get("system_data.txt").strip()
    if on_prompt is not None:
        on_prompt("data", system, user_prompt)
    req = ChatRequest("data", system, user_prompt, sampling, 1)
    for _ in range(2):
        text = backend.complete(req).completions[0]
        if text.strip():
            return text
    raise InsightError("data analysis returned an empty insight twice")


def initial_insight(
    data: Dataset,
    backend: Backend,
    seed: int,
    *,
    templates: Optional[TemplateSet] = None,
    sampling: Sampling = DEFAULT_SAMPLING["data"],
    view_size: int = VIEW_SIZE,
    on_prompt: PromptHook = None,
) -> Insight:
    """Version-0 insight from a uniform sample of (at most) ``view_size`` rows."""
    templates = templates or TemplateSet()
    size = min(view_size, int(data.splits["train"].size))
    view = resample(data, None, size, seed)
    prompt = templates.render(
        "insight_initial.txt",
        dataset_description=describe_dataset(data),
        rows_table=format_rows(view),
        requirements=templates.get("insight_requirements.txt").strip(),
    )
    content = _ask(backend, prompt, templates, sampling, on_prompt)
    return Insight(content=content, iteration=0, trigger_score="initial", version=0, source_view_seed=seed)


def residuals(expression, params, data: Dataset) -> np.ndarray:
    """``y - f(x)`` on training rows, aligned to all rows (NaN elsewhere)."""
    train = data.splits["train"]
    X, y = data.split("train")
    out = np.full(data.n, np.nan)
    out[train] = y - evaluate(expression, params, X, data.variable_names)
    return out


def refine_insight(
    f_star,
    data: Dataset,
    prev: Insight,
    backend: Backend,
    seed: int,
    *,
    iteration: int = 0,
    templates: Optional[TemplateSet] = None,
    sampling: Sampling = DEFAULT_SAMPLING["data"],
    view_size: int = VIEW_SIZE,
    on_prompt: PromptHook = None,
) -> Insight:
    """Ask for a refined insight given the new best candidate ``f_star``.

    ``f_star`` needs ``expression`` and ``fit`` (with ``params`` and ``score``).
    """
    if f_star.expression is None or f_star.fit is None:
        raise InsightError("refinement needs a fitted candidate")
    templates = templates or TemplateSet()
    res = residuals(f_star.expression, f_star.fit.params, data)
    size = min(view_size, int(data.splits["train"].size))
    view = resample(data, res, size, seed)
    prompt = templates.render(
        "insight_refine.txt",
        dataset_description=describe_dataset(data),
        best_equation=format_equation(f_star.expression, f_star.fit.params, f_star.fit.score),
        previous_insight=prev.content.strip(),
        rows_table=format_rows(view),
        requirements=templates.get("insight_requirements.txt").strip(),
    )
    content = _ask(backend, prompt, templates, sampling, on_prompt)
    return Insight(
        content=content,
        iteration=iteration,
        trigger_score=float(f_star.fit.score),
        version=prev.version + 1,
        source_view_seed=seed,
    )


def format_equation(expression, params, score: Optional[float] = None) -> str:
    text = render(expression)
    if len(params):
        text += "\nparams = [" + ", ".join(f"{p:.6g}" for p in params) + "]"
    if score is not None:
        text += f"\nscore = {score:.6g}"
    return text

