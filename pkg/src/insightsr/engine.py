"""The closed search loop.

Each iteration samples ``b`` skeletons from the main model, fits and scores
them, classifies each one and asks for a reflection on it, refines the data
insight whenever the best score strictly improves, and rebuilds the prompt
from the experience buffer, the insight and recently extracted ideas.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ideas as ideas_mod
from . import insight as insight_mod
from .data import Dataset
from .expr import ExpressionError, Expression, complexity, parse, render
from .fit import FitConfig, FitResult, fit as fit_expression
from .ideas import Category, IdeaLibrary, categorize
from .insight import Insight, InsightError
from .llmio import DEFAULT_SAMPLING, Backend, ChatRequest, LLMError, Sampling, ScriptExhaustedError
from .templating import TemplateSet, grammar_text

log = logging.getLogger(__name__)

# Stream keys for derived seeds.
_INSIGHT, _FIT, _IDEAS, _PDRAW = 1, 2, 3, 4


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class EngineConfig:
    iterations: int = 1000
    k: int = 3
    b: int = 4
    lam: float = 0.5
    ideas_per_category: int = 3
    insight_probability: float = 1.0
    use_positive: bool = True
    use_negative: bool = True
    use_invalid: bool = True
    seed: int = 0
    buffer_capacity: int = 50
    retain_negative: bool = False
    valid_window: int = 40
    view_size: int = 100
    workers: int = 1
    wall_clock_budget: Optional[float] = None
    fit: FitConfig = field(default_factory=FitConfig)
    sampling: dict = field(default_factory=lambda: dict(DEFAULT_SAMPLING))

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("k", "b", "ideas_per_category", "buffer_capacity", "valid_window", "view_size", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must be in (0, 1]")
        if not 0 <= self.insight_probability <= 1:
            raise ValueError("insight_probability must be in [0, 1]")

    @property
    def idea_categories(self) -> tuple[Category, ...]:
        flags = (
            (Category.POSITIVE, self.use_positive),
            (Category.NEGATIVE, self.use_negative),
            (Category.INVALID, self.use_invalid),
        )
        return tuple(c for c, on in flags if on)

    @property
    def is_llmsr_equivalent(self) -> bool:
        return self.insight_probability == 0 and not self.idea_categories

    _ALIASES = {"T": "iterations", "lambda": "lam", "p": "insight_probability"}

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = {cls._ALIASES.get(k, k): v for k, v in d.items()}
        toggles = d.pop("idea_toggles", None)
        if toggles:
            for key in ("use_positive", "use_negative", "use_invalid"):
                if key in toggles:
                    d[key] = toggles[key]
        if "fit" in d and isinstance(d["fit"], dict):
            d["fit"] = FitConfig.from_dict(d["fit"])
        if "sampling" in d:
            merged = dict(DEFAULT_SAMPLING)
            for role, s in d["sampling"].items():
                merged[role] = s if isinstance(s, Sampling) else Sampling(**s)
            d["sampling"] = merged
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown engine fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "k": self.k,
            "b": self.b,
            "lam": self.lam,
            "ideas_per_category": self.ideas_per_category,
            "insight_probability": self.insight_probability,
            "use_positive": self.use_positive,
            "use_negative": self.use_negative,
            "use_invalid": self.use_invalid,
            "seed": self.seed,
            "buffer_capacity": self.buffer_capacity,
            "retain_negative": self.retain_negative,
            "valid_window": self.valid_window,
            "view_size": self.view_size,
            "workers": self.workers,
            "wall_clock_budget": self.wall_clock_budget,
            "fit": self.fit.to_dict(),
            "sampling": {
                role: {"temperature": s.temperature, "top_k": s.top_k, "top_p": s.top_p}
                for role, s in self.sampling.items()
            },
        }


@dataclass
class Candidate:
    raw_completion: str
    expression: Optional[Expression]
    fit: Optional[FitResult]
    category: Category
    iteration: int
    index: int = 0
    source: str = ""
    error: Optional[str] = None

    @property
    def score(self) -> float:
        return self.fit.score if self.fit is not None else -math.inf

    @property
    def rendered(self) -> Optional[str]:
        return render(self.expression) if self.expression is not None else None


@dataclass(frozen=True)
class BufferEntry:
    text: str
    expression: Expression
    params: tuple[float, ...]
    score: float


class ExperienceBuffer:
    """Best skeletons seen so far, kept sorted by descending score."""

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self.entries: list[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, expression: Expression, params, score: float) -> bool:
        text = render(expression)
        for i, e in enumerate(self.entries):
            if e.text == text:
                if score <= e.score:
                    return False
                del self.entries[i]
                break
        entry = BufferEntry(text, expression, tuple(float(p) for p in params), float(score))
        self.entries.append(entry)
        # Stable sort keeps insertion order among equal scores.
        self.entries.sort(key=lambda e: -e.score)
        del self.entries[self.capacity:]
        return True

    def top(self, k: int) -> list[BufferEntry]:
        return self.entries[:k]


@dataclass
class BestTracker:
    f_star: Optional[Candidate] = None
    s_star: float = -math.inf

    def offer(self, cand: Candidate) -> bool:
        if cand.fit is None or not cand.fit.score > self.s_star:
            return False
        self.f_star, self.s_star = cand, cand.fit.score
        return True


# ---------------------------------------------------------------------------
# Completion handling

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_START = re.compile(r"^[\sA-Za-z_0-9(.+\-]")


def _clean_line(line: str) -> str:
    line = line.strip().rstrip(";").strip()
    if line.startswith("return "):
        line = line[len("return "):]
    if "=" in line:
        line = line.rsplit("=", 1)[1]
    return line.strip()


def extract_expression(raw: str, variables: Sequence[str]) -> str:
    """Pick the expression text out of a model completion.

    Takes the first fenced code block when there is one, otherwise scans the
    plain lines. Within the chosen region the first line that parses wins;
    failing that, the first non-empty line is returned so its parse error is
    reported.
    """
    m = _FENCE.search(raw)
    region = m.group(1) if m else raw
    lines = [_clean_line(l) for l in region.splitlines()]
    lines = [l for l in lines if l and not l.startswith("#") and _START.match(l)]
    for line in lines:
        try:
            parse(line, variables)
            return line
        except (ExpressionError, ValueError):
            continue
    return lines[0] if lines else raw.strip()


def evaluate_completion(raw: str, data: Dataset, fit_cfg: FitConfig, seed: int):
    """Parse and fit one completion; returns ``(source, expression, outcome)``.

    ``outcome`` is a :class:`FitResult` or the exception that stopped it.
    """
    source = extract_expression(raw, data.variable_names)
    try:
        expression = parse(source, data.variable_names)
    except ExpressionError as exc:
        return source, None, exc
    try:
        return source, expression, fit_expression(expression, data, fit_cfg, seed)
    except ExpressionError as exc:
        return source, expression, exc


def ingest_candidate(
    raw: str,
    data: Dataset,
    tracker: BestTracker,
    cfg: EngineConfig,
    *,
    iteration: int = 0,
    index: int = 0,
    seed: Optional[int] = None,
    evaluated=None,
) -> Candidate:
    """Parse, fit and score one completion, then classify it against ``tracker``."""
    if evaluated is None:
        if seed is None:
            seed = derive_seed(cfg.seed, _FIT, iteration, index)
        evaluated = evaluate_completion(raw, data, cfg.fit, seed)
    source, expression, outcome = evaluated
    category = categorize(outcome, tracker.s_star)
    failed = isinstance(outcome, BaseException)
    return Candidate(
        raw_completion=raw,
        expression=expression,
        fit=None if failed else outcome,
        category=category,
        iteration=iteration,
        index=index,
        source=source,
        error=f"{type(outcome).__name__}: {outcome}" if failed else None,
    )


def candidate_context(cand: Candidate) -> str:
    if cand.category is Category.INVALID:
        return f"Model output:\n{cand.raw_completion.strip()}\n\nError: {cand.error}"
    return insight_mod.format_equation(cand.expression, cand.fit.params, cand.fit.score)


# ---------------------------------------------------------------------------
# Prompt assembly


def describe_variables(data: Dataset) -> str:
    lines = []
    for v in data.variables:
        unit = f" [{v.unit}]" if v.unit else ""
        desc = f": {v.description}" if v.description else ""
        lo, hi = float(data.X[:, data.variable_names.index(v.name)].min()), float(
            data.X[:, data.variable_names.index(v.name)].max()
        )
        lines.append(f"- {v.name}{unit}{desc} (observed range {lo:.4g} to {hi:.4g})")
    unit = f" [{data.target_unit}]" if data.target_unit else ""
    lines.append(f"- target {data.target_name}{unit}")
    return "\n".join(lines)


def build_prompt(
    buffer: ExperienceBuffer,
    insight: Optional[Insight],
    sampled_ideas: Sequence,
    k: int,
    p_draw: bool,
    data: Dataset,
    *,
    templates: Optional[TemplateSet] = None,
    max_params: int = 10,
) -> str:
    """Render the main-model prompt.

    The insight section appears only when ``p_draw`` is true and the ideas
    section only when ``sampled_ideas`` is non-empty. Buffer examples are the
    top ``k`` by score, listed in ascending order so the best comes last.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    templates = templates or TemplateSet()
    examples_section = insight_section = ideas_section = ""
    top = buffer.top(k)
    if top:
        blocks = []
        for e in reversed(top):
            params = ", ".join(f"{p:.6g}" for p in e.params)
            blocks.append(f"score = {e.score:.6g}; params = [{params}]\n```\n{e.text}\n```")
        examples_section = templates.render("main_examples.txt", examples="\n\n".join(blocks))
    if p_draw and insight is not None:
        insight_section = templates.render("main_insight.txt", insight=insight.content.strip())
    if sampled_ideas:
        ideas_section = templates.render("main_ideas.txt", ideas=ideas_mod.format_ideas(sampled_ideas))
    return templates.render(
        "main.txt",
        task_description=insight_mod.describe_dataset(data),
        variables=describe_variables(data),
        grammar=grammar_text().strip(),
        max_params=max_params,
        examples_section=examples_section,
        insight_section=insight_section,
        ideas_section=ideas_section,
    )


# ---------------------------------------------------------------------------
# Run log


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class RunLog:
    """Collects history, prompts, insights and timings; optionally mirrors them to JSONL files.

    ``history.jsonl`` carries only deterministic fields; wall-clock data goes
    to ``timing.jsonl`` so replay runs produce byte-identical histories.
    """

    FILES = ("history", "prompts", "insights", "timing")

    def __init__(self, directory: Optional[Path] = None):
        self.records: dict[str, list[dict]] = {name: [] for name in self.FILES}
        self._handles = {}
        if directory is not None:
            directory = Path(directory)
            directory.mkdir(parents=True, exist_ok=True)
            for name in self.FILES:
                self._handles[name] = open(directory / f"{name}.jsonl", "w", encoding="utf-8")

    def write(self, stream: str, record: dict) -> None:
        record = {k: _jsonable(v) for k, v in record.items()}
        self.records[stream].append(record)
        fh = self._handles.get(stream)
        if fh is not None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

    @property
    def history(self) -> list[dict]:
        return self.records["history"]

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles = {}


@dataclass
class RunResult:
    best: Optional[Candidate]
    s_star: float
    history: list[dict]
    insights: list[Insight]
    library: IdeaLibrary
    buffer: ExperienceBuffer
    iterations_completed: int
    refinements: int
    aborted: bool = False
    error: Optional[str] = None


class _Run:
    def __init__(self, cfg, data, backend, library, runlog, templates, clock):
        self.cfg = cfg
        self.data = data
        self.backend = backend
        self.library = library if library is not None else IdeaLibrary()
        self.log = runlog if runlog is not None else RunLog()
        self.templates = templates or TemplateSet()
        self.clock = clock
        self.tracker = BestTracker()
        self.buffer = ExperienceBuffer(cfg.buffer_capacity)
        self.insights: list[Insight] = []
        self.window: deque = deque(maxlen=cfg.valid_window)
        self.p_rng = np.random.default_rng(derive_seed(cfg.seed, _PDRAW))
        self.prompt_count = 0
        self.refinements = 0
        self.iterations_completed = 0
        self.description = insight_mod.describe_dataset(data)
        _, y_train = data.split("train")
        self.train_var = float(np.var(y_train))

    def record_prompt(self, role: str, system: str, user: str, iteration: int) -> None:
        self.log.write(
            "prompts",
            {"id": self.prompt_count, "iteration": iteration, "role": role, "system": system, "user": user},
        )
        self.prompt_count += 1

    def hook(self, iteration: int):
        return lambda role, system, user: self.record_prompt(role, system, user, iteration)

    def set_insight(self, ins: Insight) -> None:
        self.insights.append(ins)
        self.log.write("insights", ins.to_dict())

    def next_prompt(self, iteration: int) -> tuple[str, bool]:
        sampled = ideas_mod.sample_recent(
            self.library,
            self.cfg.lam,
            self.cfg.ideas_per_category,
            derive_seed(self.cfg.seed, _IDEAS, iteration),
            self.cfg.idea_categories,
        )
        p_draw = bool(self.p_rng.random() < self.cfg.insight_probability)
        prompt = build_prompt(
            self.buffer, self.insights[-1], sampled, self.cfg.k, p_draw, self.data,
            templates=self.templates, max_params=self.cfg.fit.max_params,
        )
        return prompt, p_draw

    def evaluate_all(self, completions: Sequence[str], iteration: int) -> list:
        seeds = [derive_seed(self.cfg.seed, _FIT, iteration, j) for j in range(len(completions))]
        args = [(raw, self.data, self.cfg.fit, s) for raw, s in zip(completions, seeds)]
        if self.cfg.workers > 1 and len(args) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                return list(pool.map(lambda a: evaluate_completion(*a), args))
        return [evaluate_completion(*a) for a in args]

    def extract_idea(self, cand: Candidate, prompt: str, iteration: int):
        return ideas_mod.extract(
            cand.category,
            candidate_context(cand),
            prompt,
            self.backend,
            fitness=cand.fit.score if cand.fit is not None else None,
            iteration=iteration,
            dataset_description=self.description,
            templates=self.templates,
            sampling=self.cfg.sampling["idea"],
            on_prompt=self.hook(iteration),
        )

    def store_idea(self, get_idea: Callable, cand: Candidate) -> None:
        try:
            idea = get_idea()
        except ScriptExhaustedError:
            raise
        except LLMError as exc:
            log.warning("idea extraction failed for candidate %d/%d: %s", cand.iteration, cand.index, exc)
            return
        self.library.append(idea)

    def iteration(self, t: int, prompt: str, p_draw: bool, main_prompt_id: int) -> None:
        cfg = self.cfg
        resp = self.backend.complete(
            ChatRequest("main", self.templates.get("system_main.txt").strip(), prompt, cfg.sampling["main"], cfg.b)
        )
        evaluated = self.evaluate_all(resp.completions, t)
        concurrent = self.backend.concurrent_safe and cfg.workers > 1
        pool = ThreadPoolExecutor(cfg.workers) if concurrent else None
        pending: list[tuple[Candidate, Callable]] = []
        try:
            for j, (raw, ev) in enumerate(zip(resp.completions, evaluated)):
                cand = ingest_candidate(raw, self.data, self.tracker, cfg, iteration=t, index=j, evaluated=ev)
                if pool is not None:
                    fut: Future = pool.submit(self.extract_idea, cand, prompt, t)
                    pending.append((cand, fut.result))
                else:
                    self.store_idea(lambda c=cand: self.extract_idea(c, prompt, t), cand)
                improved = self.tracker.offer(cand)
                refine_error = None
                if improved:
                    self.refinements += 1
                    try:
                        self.set_insight(
                            insight_mod.refine_insight(
                                cand, self.data, self.insights[-1], self.backend,
                                derive_seed(cfg.seed, _INSIGHT, self.insights[-1].version + 1),
                                iteration=t, templates=self.templates, sampling=cfg.sampling["data"],
                                view_size=cfg.view_size, on_prompt=self.hook(t),
                            )
                        )
                    except InsightError as exc:
                        refine_error = str(exc)
                        log.warning("insight refinement failed: %s", exc)
                    self.buffer.add(cand.expression, cand.fit.params, cand.fit.score)
                elif cfg.retain_negative and cand.category is Category.NEGATIVE:
                    self.buffer.add(cand.expression, cand.fit.params, cand.fit.score)
                self.window.append(cand.category)
                self.log_candidate(cand, improved, refine_error, p_draw, main_prompt_id, resp.latency_ms)
            for cand, get in pending:
                self.store_idea(get, cand)
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

    def log_candidate(self, cand, improved, refine_error, p_draw, prompt_id, latency_ms) -> None:
        fitted = cand.fit is not None
        nmse_train = None
        if fitted and self.train_var > 0:
            nmse_train = cand.fit.mse / self.train_var
        self.log.write(
            "history",
            {
                "iteration": cand.iteration,
                "index": cand.index,
                "completion_sha256": hashlib.sha256(cand.raw_completion.encode("utf-8")).hexdigest(),
                "source": cand.source,
                "expression": cand.rendered,
                "complexity": complexity(cand.expression) if cand.expression is not None else None,
                "params": [float(p) for p in cand.fit.params] if fitted else None,
                "score": cand.fit.score if fitted else None,
                "mse": cand.fit.mse if fitted else None,
                "nmse_train": nmse_train,
                "category": cand.category.value,
                "error": cand.error,
                "improved": improved,
                "refine_error": refine_error,
                "s_star": self.tracker.s_star,
                "insight_version": self.insights[-1].version,
                "insight_in_prompt": p_draw,
                "prompt_id": prompt_id,
                "valid_rate": sum(c is not Category.INVALID for c in self.window) / len(self.window),
            },
        )
        self.log.write(
            "timing",
            {"iteration": cand.iteration, "index": cand.index, "timestamp": self.clock(), "latency_ms": latency_ms},
        )


def run(
    config: EngineConfig,
    data: Dataset,
    backend: Backend,
    *,
    library: Optional[IdeaLibrary] = None,
    runlog: Optional[RunLog] = None,
    templates: Optional[TemplateSet] = None,
    clock: Callable[[], float] = time.time,
) -> RunResult:
    """Run the search for ``config.iterations`` iterations.

    Candidate-level failures become INVALID candidates. A backend failure
    aborts the loop; the result then has ``aborted=True`` and everything
    logged so far is kept.
    """
    r = _Run(config, data, backend, library, runlog, templates, clock)
    aborted, error = False, None
    started = time.monotonic()
    try:
        if config.iterations > 0:
            r.set_insight(
                insight_mod.initial_insight(
                    data, backend, derive_seed(config.seed, _INSIGHT, 0),
                    templates=r.templates, sampling=config.sampling["data"],
                    view_size=config.view_size, on_prompt=r.hook(0),
                )
            )
            prompt, p_draw = r.next_prompt(0)
            for t in range(1, config.iterations + 1):
                budget = config.wall_clock_budget
                if budget is not None and time.monotonic() - started > budget:
                    log.info("wall-clock budget exhausted after %d iterations", t - 1)
                    break
                prompt_id = r.prompt_count
                r.record_prompt("main", r.templates.get("system_main.txt").strip(), prompt, t)
                r.iteration(t, prompt, p_draw, prompt_id)
                r.iterations_completed = t
                prompt, p_draw = r.next_prompt(t)
    except (LLMError, InsightError) as exc:
        aborted, error = True, f"{type(exc).__name__}: {exc}"
        log.error("run aborted: %s", error)
    return RunResult(
        best=r.tracker.f_star,
        s_star=r.tracker.s_star,
        history=r.log.history,
        insights=r.insights,
        library=r.library,
        buffer=r.buffer,
        iterations_completed=r.iterations_completed,
        refinements=r.refinements,
        aborted=aborted,
        error=error,
    )
