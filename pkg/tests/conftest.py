import numpy as np
import pytest
import torch

from semfl.datagen import SplitPlan, build_experiment_splits, generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus64():
    return generate_corpus(40, (64, 64), seed=7)


@pytest.fixture(scope="session")
def splits64(corpus64):
    return {d.subset_name: d for d in build_experiment_splits(corpus64, SplitPlan.paper(per_client=4))}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
