"""Pieces shared by the samplers: score plumbing, reports and the lock-step driver.

The sample population is split into fixed-size chunks.  Within a Picard
iteration every chunk evaluates its scores independently (possibly on a thread
pool); the iteration barrier is the gather of per-node residual sums, which
are reduced in chunk order so that the result never depends on scheduling.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np


class SamplerFailure(RuntimeError):
    pass


class PicardDivergence(SamplerFailure):
    pass


DIVERGENCE_FACTOR = 1e6


@dataclass
class ScoreHandle:
    """Backward-time score ``fn(t, x)`` with its dimension and Lipschitz bound."""

    fn: object
    dim: int
    lipschitz: float | None = None


def resolve_score(score) -> ScoreHandle:
    if isinstance(score, ScoreHandle):
        return score
    if hasattr(score, "backward_score"):
        return ScoreHandle(score.backward_score, int(score.dim), getattr(score, "lipschitz_bound", None))
    if callable(score) and hasattr(score, "dim"):
        return ScoreHandle(score, int(score.dim), getattr(score, "lipschitz_bound", None))
    raise TypeError("score must be an oracle with backward_score or a callable carrying a dim attribute")


class CountingScore:
    """Wraps an oracle and counts calls and per-path score evaluations."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.dim = oracle.dim
        self.lipschitz_bound = getattr(oracle, "lipschitz_bound", None)
        self.calls = 0
        self.evaluations = 0
        self._lock = threading.Lock()

    def backward_score(self, t, x):
        nodes = int(np.size(t))
        with self._lock:
            self.calls += 1
            self.evaluations += nodes
        return self.oracle.backward_score(t, x)

    def reset(self):
        with self._lock:
            self.calls = 0
            self.evaluations = 0


def checked_score(handle: ScoreHandle, t, x, where: str) -> np.ndarray:
    s = handle.fn(t, x)
    if not np.all(np.isfinite(s)):
        bad = np.argwhere(~np.isfinite(s))[0]
        raise SamplerFailure(f"non-finite score at {where}, array index {tuple(int(i) for i in bad)}")
    return s


@dataclass
class SamplerReport:
    implementation: str
    mode: str
    sequential_rounds: int = 0
    total_score_evals: int = 0
    max_parallel_width: int = 0
    residual_history: list = field(default_factory=list)
    max_path_residual_history: list = field(default_factory=list)
    corrector_residual_history: list = field(default_factory=list)
    picard_iterations: list = field(default_factory=list)
    wall_clock: float = 0.0

    def count_round(self, width: int, iterations: int = 1):
        self.sequential_rounds += iterations
        self.total_score_evals += iterations * width
        self.max_parallel_width = max(self.max_parallel_width, width)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = asdict(self)
        if not include_timing:
            out.pop("wall_clock")
        return out


def chunk_bounds(n_samples: int, chunk_size: int) -> list[tuple[int, int]]:
    chunk_size = max(1, int(chunk_size))
    return [(a, min(a + chunk_size, n_samples)) for a in range(0, n_samples, chunk_size)]


@contextmanager
def chunk_executor(threads: int | None):
    threads = 1 if threads is None else int(threads)
    if threads <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield pool.map


def contraction_factor(lipschitz: float | None, h: float) -> float:
    if lipschitz is None:
        return float("nan")
    return lipschitz ** 2 * h * math.exp(2 * h)


def iterate_lockstep(workspaces, depth: int, mapper, n_samples: int, residual_tol: float | None,
                     where: str, lipschitz: float | None, h: float):
    """Run up to ``depth`` Picard iterations on all chunk workspaces.

    Returns (batch-mean sup residuals, worst per-path sup residuals).
    """
    residuals, path_residuals = [], []
    for k in range(depth):
        results = list(mapper(lambda ws: ws.step(), workspaces))
        node_sums = results[0][0].copy()
        for sums, _ in results[1:]:
            node_sums += sums
        res = float(np.max(node_sums) / n_samples)
        residuals.append(res)
        path_residuals.append(float(max(float(p) for _, p in results)))
        if not math.isfinite(res) or (residuals[0] > 0 and res > DIVERGENCE_FACTOR * residuals[0]):
            raise PicardDivergence(
                f"Picard residual grew from {residuals[0]:.3g} to {res:.3g} at iteration {k} of {where}; "
                f"L^2 h e^(2h) = {contraction_factor(lipschitz, h):.3g}")
        if residual_tol is not None and res < residual_tol:
            break
    return residuals, path_residuals


def timer():
    return time.perf_counter()
