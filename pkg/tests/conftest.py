import os

import numpy as np
import pytest
from hypothesis import settings

from nsod.pipeline import RunConfig
from nsod.student import StudentParams
from nsod.synthgen import CorpusSpec

settings.register_profile("nsod", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "nsod"))

TINY_CORPUS = CorpusSpec(n_unlabeled=30, n_test=10, k_support=2, distractor_count=4)
TINY_STUDENT = StudentParams(steps=150, decay_step=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("featcache"))


def tiny_config(out, cache=None, **kw) -> RunConfig:
    base = dict(output_dir=str(out), corpus=TINY_CORPUS, student=TINY_STUDENT, cache_dir=cache)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_cache):
    """One small fused run shared by the pipeline and CLI tests."""
    from nsod.pipeline import run_all

    out = tmp_path_factory.mktemp("tiny_run")
    record = run_all(tiny_config(out, tiny_cache))
    return out, record


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
