import numpy as np
import pytest

from piadm.score_oracle import ScoreOracle, TargetSpec

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_spd(rng, d, lo=0.3, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture
def gauss2():
    target = TargetSpec.gaussian([0.8, -0.4], [[0.6, 0.2], [0.2, 1.3]])
    return ScoreOracle(target, 4.0)


@pytest.fixture
def mixture2():
    target = TargetSpec.mixture([[-1.2, 0.3], [1.0, -0.2]],
                                [[[0.5, 0.1], [0.1, 0.4]], [[0.7, -0.2], [-0.2, 0.6]]], [0.35, 0.65])
    return ScoreOracle(target, 4.0)
