"""Worked input/output examples for each module, with hand-derived oracles."""
import hashlib
import json
import math

import numpy as np
import pytest

from insightsr.cli import cmd_report, main
from insightsr.data import Dataset, DatasetError, GeneratorSpec, VariableInfo, generate, load_csv, resample
from insightsr.engine import (
    BestTracker,
    EngineConfig,
    ExperienceBuffer,
    build_prompt,
    ingest_candidate,
    run,
)
from insightsr.expr import Binary, Constant, EvalError, Param, ParseError, Unary, Variable, complexity, evaluate, parse, render
from insightsr.fit import FitConfig, fit, fit_arrays, score
from insightsr.ideas import Category, Idea, IdeaLibrary, categorize, extract, sample_recent
from insightsr.insight import Insight, initial_insight, refine_insight
from insightsr.llmio import ReplayBackend, ReplayScript, ScriptedBackend
from insightsr.metrics import acc_tau, nmse, valid_rate

FULL_OSC1 = "params[0]*sin(x) - params[1]*x*v - params[2]*v**3 - params[3]*x**3 - x*cos(x)"


def one_col(name, values, target):
    return Dataset("d", (VariableInfo(name),), np.array(values, float)[:, None], np.array(target, float), "y",
                   {"train": np.arange(len(values))})


# expr -----------------------------------------------------------------------


def test_expr_examples():
    e = parse("params[0]*sin(x) - params[1]*x*v", ["x", "v"])
    assert e.param_count == 2 and set(e.variables_used) == {"x", "v"}
    with pytest.raises(ParseError) as info:
        parse("sin(", ["x"])
    assert info.value.kind == "syntax"
    with pytest.raises(ParseError) as info:
        parse("params[0]*sigmoid(x)", ["x"])
    assert info.value.kind == "unknown_symbol"
    s = parse("params[0]*sin(x)", ["x"])
    assert evaluate(s, [0.8], np.array([[0.0]]), ["x"])[0] == 0.0
    assert evaluate(s, [0.8], np.array([[math.pi / 2]]), ["x"])[0] == 0.8
    with pytest.raises(EvalError) as err:
        evaluate(parse("log(x)", ["x"]), [], np.array([[-1.0]]), ["x"])
    assert err.value.kind == "domain"


def test_render_and_complexity_examples():
    assert render(Binary("mul", Param(0), Variable("x"))) == "(params[0] * x)"
    assert render(Constant(0.5)) == "0.5"
    assert render(Unary("sin", Binary("mul", Param(0), Variable("x")))) == "sin((params[0] * x))"
    assert complexity(Constant(1.0)) == 1
    assert complexity(Binary("add", Param(0), Variable("x"))) == 3
    # Hand count: 0.8*sin(1.0*x) -> 6, 0.5*v**3 -> 5, 0.2*x**3 -> 5, 0.5*x*v -> 5, x*cos(x) -> 4, four subtractions.
    truth = generate(GeneratorSpec("oscillator1", n_train=10, n_id=5, n_ood=5)).ground_truth
    assert complexity(parse(truth, ["x", "v"])) == 29


# fit ------------------------------------------------------------------------


def test_fit_examples():
    x = np.arange(10.0)
    res = fit_arrays(parse("params[0]*x + params[1]", ["x"]), x[:, None], 2 * x + 3, ["x"])
    assert np.allclose(res.params, [2, 3], atol=1e-6) and res.mse < 1e-12
    const = fit_arrays(parse("params[0]", ["x"]), x[:, None], np.full(10, 7.0), ["x"])
    assert abs(const.params[0] - 7) <= 1e-9 and abs(const.score) <= 1e-12


def test_oscillator1_five_parameter_fit():
    data = generate(GeneratorSpec("oscillator1", seed=0))
    e = parse("params[0]*sin(params[4]*x) - params[1]*v**3 - params[2]*x**3 - params[3]*x*v - x*cos(x)",
              data.variable_names)
    p = fit(e, data, FitConfig(restarts=5), seed=0).params.copy()
    # F*sin(w*x) equals (-F)*sin(-w*x); report the branch with positive frequency.
    if p[4] < 0:
        p[0], p[4] = -p[0], -p[4]
    assert np.max(np.abs(p - [0.8, 0.5, 0.2, 0.5, 1.0])) <= 1e-3


def test_score_examples():
    zero = parse("0", ["x"])
    assert score(zero, [], one_col("x", [0, 1], [1, -1])) == -1.0
    y = np.array([1.0, 4.0, 2.0, 9.0])
    data = one_col("x", [0, 1, 2, 3], y)
    assert score(parse(repr(float(y.mean())), ["x"]), [], data) == pytest.approx(-np.var(y), rel=1e-12)


# metrics --------------------------------------------------------------------


def test_metric_examples():
    assert nmse([0, 1, 3], [0, 1, 2]) == 0.5
    t = np.array([1.0, -2.0, 3.0, 0.5])
    assert acc_tau(1.05 * t, t, 0.1) == 1.0 and acc_tau(1.05 * t, t, 0.01) == 0.0
    assert acc_tau([1, 1, 1, 2], [1, 1, 1, 1], 0.1) == 0.75
    assert valid_rate([Category.INVALID] * 3) == 0.0
    assert valid_rate([Category.POSITIVE, Category.NEGATIVE, Category.NEGATIVE, Category.INVALID]) == 0.75
    assert valid_rate([Category.POSITIVE]) == 1.0


# data -----------------------------------------------------------------------


def test_csv_examples(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("a,y\n1,2\n2,4\n3,6\n")
    assert load_csv(path, ["a"], "y", split_policy="train").n == 3
    path.write_text("a,y\n1,2\nNaN,4\n3,6\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_csv(path, ["a"], "y")


def test_resample_example():
    data = generate(GeneratorSpec("lsr_synth_crk0", n_train=500, n_id=50, n_ood=50))
    view = resample(data, None, 100, 1)
    assert len(view.rows) == 100 and set(view.indices) <= set(data.splits["train"].tolist())
    assert all(r.residual is None for r in view.rows)


# insight --------------------------------------------------------------------


def test_insight_examples():
    data = generate(GeneratorSpec("lsr_synth_crk0", n_train=50, n_id=10, n_ood=10))
    script = ReplayScript.from_role_lists(data=["y increases monotonically with x"])
    ins = initial_insight(data, ReplayBackend(script), seed=0)
    assert ins.content == "y increases monotonically with x" and ins.version == 0
    assert initial_insight(data, ReplayBackend(script), seed=0) == ins


def _residual_column(prompt, n_cols):
    rows = []
    for line in prompt.splitlines():
        parts = line.split()
        if len(parts) == n_cols:
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                continue
    return np.array(rows)


def test_refinement_residual_examples():
    data = generate(GeneratorSpec("lsr_synth_crk0", n_train=60, n_id=10, n_ood=10))
    prev = Insight("first", 0, "initial", 0, 0)
    truth = parse(data.ground_truth, ["A"])
    perfect = type("C", (), {"expression": truth, "fit": fit(truth, data)})()
    backend = ScriptedBackend(lambda r, i: "interaction term x·v suspected")
    new = refine_insight(perfect, data, prev, backend, seed=1)
    assert new.content == "interaction term x·v suspected" and new.version == 1
    table = _residual_column(backend.requests[0].user_prompt, 3)
    assert len(table) > 0 and np.all(np.abs(table[:, 2]) <= 1e-12)

    zero = parse("0", ["A"])
    flat = type("C", (), {"expression": zero, "fit": fit(zero, data)})()
    refine_insight(flat, data, prev, backend, seed=1)
    table = _residual_column(backend.requests[1].user_prompt, 3)
    assert np.array_equal(table[:, 2], table[:, 1])


# ideas ----------------------------------------------------------------------


def test_categorize_examples():
    assert categorize(ParseError("syntax", 0, ""), -0.5) is Category.INVALID
    assert categorize(type("F", (), {"score": -0.01})(), -0.5) is Category.POSITIVE
    assert categorize(type("F", (), {"score": -0.5})(), -0.5) is Category.NEGATIVE


def test_extract_examples():
    backend = ScriptedBackend(lambda r, i: "always balance parentheses")
    inv = extract(Category.INVALID, "sin(", "", backend)
    assert (inv.category, inv.content, inv.fitness) == (Category.INVALID, "always balance parentheses", None)
    pos = extract(Category.POSITIVE, "ctx", "", backend, fitness=-1e-6)
    assert pos.fitness == -1e-6
    lib = IdeaLibrary()
    for i in range(3):
        lib.append(extract(Category.NEGATIVE, f"n{i}", "", backend, fitness=-1.0))
    assert [i.context for i in lib.entries(Category.NEGATIVE)] == ["n0", "n1", "n2"]


def test_library_examples(tmp_path):
    lib = IdeaLibrary(tmp_path / "lib.json")
    lib.append(Idea(Category.POSITIVE, "p", "c", -1.0, 0))
    assert lib.counts() == (1, 0, 0)
    assert IdeaLibrary.load(tmp_path / "lib.json") == lib
    many = IdeaLibrary()
    ids = [many.append(Idea(Category.NEGATIVE, str(i), "", -1.0, i)).id for i in range(100)]
    assert ids == list(range(100))


def test_recency_examples():
    lib = IdeaLibrary()
    for i in range(10):
        lib.append(Idea(Category.POSITIVE, str(i), "", -1.0, i))
    for seed in range(50):
        picked = sample_recent(lib, 0.5, 3, seed)
        assert len(picked) == 3 and all(5 <= p.id <= 9 for p in picked)
    assert sample_recent(IdeaLibrary(), 0.5, 3, 0) == []
    two = IdeaLibrary()
    for i in range(2):
        two.append(Idea(Category.NEGATIVE, str(i), "", -1.0, i))
    assert len(sample_recent(two, 0.5, 3, 0)) == 1  # ceil(0.5*2) = 1 recent entry
    assert len(sample_recent(two, 1.0, 3, 0)) == 2


# engine ---------------------------------------------------------------------


def small_osc1():
    return generate(GeneratorSpec("oscillator1", seed=1, n_train=200, n_id=50, n_ood=50))


def test_run_recovers_ground_truth_from_script():
    data = small_osc1()
    script = ReplayScript.from_role_lists(
        main=[[FULL_OSC1, "params[0]*x", "params[0]*v", "(("]],
        data=["i0", "i1", "i2"],
        idea=["a", "b", "c", "d"],
    )
    cfg = EngineConfig(iterations=1, b=4, seed=0, fit=FitConfig(restarts=3))
    result = run(cfg, data, ReplayBackend(script))
    oracle = fit(parse(FULL_OSC1, data.variable_names), data, cfg.fit, seed=0)
    X, y = data.split("train")
    pred = evaluate(result.best.expression, result.best.fit.params, X, data.variable_names)
    assert nmse(pred, y) < 1e-10
    assert result.s_star == -result.best.fit.mse
    assert result.s_star == pytest.approx(-oracle.mse, abs=1e-15)


def test_all_unparseable_run():
    data = small_osc1()
    script = ReplayScript.from_role_lists(
        main=[["(("] * 4] * 5, data=["insight"], idea=[f"avoid {i}" for i in range(20)]
    )
    result = run(EngineConfig(iterations=5, b=4), data, ReplayBackend(script))
    assert len(result.history) == 20 and all(h["category"] == "invalid" for h in result.history)
    assert result.s_star == -math.inf and result.best is None
    assert result.library.counts() == (0, 0, 20) and result.refinements == 0


def test_prompt_examples():
    data = small_osc1()
    insight = Insight("INSIGHT", 0, "initial", 0, 0)
    prompt = build_prompt(ExperienceBuffer(), insight, [], 3, True, data)
    assert "## Task" in prompt and "## Equation grammar" in prompt and "INSIGHT" in prompt
    assert "## Previous skeletons" not in prompt and "## Ideas from previous attempts" not in prompt
    assert "INSIGHT" not in build_prompt(ExperienceBuffer(), insight, [], 3, False, data)
    buf = ExperienceBuffer()
    for i in range(5):
        buf.add(parse(f"params[0]*x + {i}", ["x", "v"]), [1.0], -float(i))
    prompt = build_prompt(buf, insight, [], 3, False, data)
    assert [f"+ {float(i)!r})" in prompt for i in range(5)] == [True, True, True, False, False]


def test_ingest_examples():
    x = np.linspace(0, 1, 20)
    data = one_col("x", x, 2 * x)
    tracker, cfg = BestTracker(), EngineConfig()
    first = ingest_candidate("params[0]*x", data, tracker, cfg)
    assert first.category is Category.POSITIVE
    tracker.offer(first)
    assert ingest_candidate("params[0]*x", data, tracker, cfg).category is Category.NEGATIVE
    bad = ingest_candidate("hello world", data, tracker, cfg)
    assert bad.category is Category.INVALID and bad.error.startswith("ParseError")


# cli ------------------------------------------------------------------------


def test_generate_examples(tmp_path):
    spec = {"benchmark": "oscillator1", "n_train": 100, "n_id": 20, "n_ood": 20}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["generate", str(tmp_path / "s.json"), "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["generate", str(tmp_path / "s.json"), "--out", str(tmp_path / "b.csv")]) == 0
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 141
    (tmp_path / "neg.json").write_text(json.dumps(dict(spec, n_train=-1)))
    assert main(["generate", str(tmp_path / "neg.json")]) == 2


def test_run_manifest_examples(tmp_path):
    data = small_osc1()
    data.save(tmp_path / "osc.csv")
    ReplayScript.from_role_lists(
        main=[[FULL_OSC1, "params[0]*x"]], data=["a", "b"], idea=["i", "j"]
    ).save(tmp_path / "script.json")
    cfg = {
        "dataset": {"path": "osc.csv"},
        "engine": {"T": 1, "b": 2, "p": 0, "idea_toggles": {"use_positive": False, "use_negative": False,
                                                            "use_invalid": False}},
        "backend": {"type": "replay", "script": "script.json"},
        "output_dir": "out",
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", str(tmp_path / "c.json")]) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["metrics"]["id_test"]["nmse"] < 1e-10
    assert manifest["ablation"] == "llm-sr-equivalent"


def _write_history(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_report_examples(tmp_path):
    rows = [
        {"iteration": it, "index": j, "category": "negative", "score": -1.0 / it, "nmse_train": 0.1 / it,
         "valid_rate": 1.0}
        for it in range(1, 6) for j in range(4)
    ]
    _write_history(tmp_path / "h.jsonl", rows)
    files = cmd_report(tmp_path / "h.jsonl", tmp_path / "r1")
    assert len(files["convergence"].read_text().splitlines()) == 6

    invalid = [{"iteration": 1, "index": j, "category": "invalid", "valid_rate": 0.0} for j in range(4)]
    _write_history(tmp_path / "bad.jsonl", invalid)
    files = cmd_report(tmp_path / "bad.jsonl", tmp_path / "r2")
    lines = files["valid_rate"].read_text().splitlines()[1:]
    assert all(float(l.split(",")[1]) == 0.0 for l in lines)

    _write_history(tmp_path / "empty.jsonl", [])
    files = cmd_report(tmp_path / "empty.jsonl", tmp_path / "r3")
    assert files["convergence"].read_text() == "iteration,best_score,best_nmse_train\n"
    assert files["valid_rate"].read_text() == "iteration,valid_rate,window_valid_rate\n"
