import functools

import pytest

from nonprob.simulation import (
    ScenarioSpec,
    draw_nonprob_sample,
    draw_prob_sample,
    generate_population,
    make_sample,
    replicate_rng,
)


@functools.lru_cache(maxsize=None)
def _scenario(sid, index, seed):
    spec = ScenarioSpec.from_id(sid)
    rng = replicate_rng(seed, index)
    pop = generate_population(spec, rng)
    delta = draw_nonprob_sample(pop, spec, rng)
    in_b, pi = draw_prob_sample(pop, spec, rng)
    return pop, make_sample(pop, delta, in_b, pi)


@pytest.fixture
def scenario_sample():
    """``scenario_sample(sid, index=0, seed=11) -> (population, sample)``."""

    def make(sid, index=0, seed=11):
        return _scenario(sid, index, seed)

    return make


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
