import pytest

from insightsr.data import GeneratorSpec, generate
from insightsr.llmio import ReplayScript

# Skeleton completions in rising quality for oscillator1 (inputs x, v).
OSC1_SKELETONS = [
    "params[0]*x",
    "```python\nparams[0]*x + params[1]*v\n```",
    "this is not an equation ((",
    "params[0]*sin(x) + params[1]*v",
    "params[0]*sin(x) - params[1]*x*v - params[2]*v**3",
    "log(x - 10)",
    "params[0]*sin(x) - params[1]*x*v - params[2]*v**3 - params[3]*x**3",
    "params[0]*x + params[1]*v",
    "params[0]*sin(x) - params[1]*x*v - params[2]*v**3 - params[3]*x**3 - x*cos(x)",
    "params[0]/(x - x)",
]


def build_script(iterations: int, b: int, main_texts=OSC1_SKELETONS, n_data: int = None) -> ReplayScript:
    """Replay script with ``iterations`` main batches cycling through ``main_texts``."""
    main = []
    for t in range(iterations):
        main.append([main_texts[(t * b + j) % len(main_texts)] for j in range(b)])
    data = [f"Insight v{i}: the target looks odd in x and damped in v." for i in range(n_data or iterations * b + 1)]
    idea = [f"Lesson {i}: keep sin(x); cubic damping helps." for i in range(iterations * b)]
    return ReplayScript.from_role_lists(main=main, data=data, idea=idea)


@pytest.fixture(scope="session")
def osc1_small():
    return generate(GeneratorSpec("oscillator1", seed=3, n_train=200, n_id=60, n_ood=60))


@pytest.fixture(scope="session")
def crk0_small():
    return generate(GeneratorSpec("lsr_synth_crk0", seed=1, n_train=120, n_id=40, n_ood=40))
