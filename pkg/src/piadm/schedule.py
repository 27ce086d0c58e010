"""Two-level time discretisation: outer blocks, inner grids and the corrector schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

_GEOMETRIC_SLACK = 1e-6
_DEFAULT_NODE_CAP = 5_000_000


class PlanError(ValueError):
    pass


class PlanTooLargeError(PlanError):
    pass


class ContractionWarning(UserWarning):
    pass


def _uniform_grid(length: float, step: float) -> np.ndarray:
    m = int(round(length / step))
    grid = np.arange(m + 1, dtype=float) * step
    grid[-1] = length
    return grid


def geometric_node_count(h: float, eta: float, step: float) -> int:
    """Number of steps the geometric rule will take, without building the grid."""
    slack = step * (1.0 - _GEOMETRIC_SLACK)
    n_uniform = max(0, math.floor((h - 1.0 - 1e-9) / step)) if h - step >= 1.0 + 1e-9 else 0
    r = h - n_uniform * step
    n_geo = max(1, math.ceil(math.log(r / eta) / math.log1p(slack)))
    return n_uniform + n_geo


def geometric_last_block(h: float, eta: float, step: float) -> np.ndarray:
    """Inner grid of the last block, ending at ``h - eta``.

    Uniform steps of ``step`` while the remaining distance to ``h`` stays at
    least 1 after the step, then steps shrinking geometrically so that every
    step is at most ``step * (h - tau_next)``.
    """
    slack = step * (1.0 - _GEOMETRIC_SLACK)
    if h - step >= 1.0 + 1e-9:
        n_uniform = math.floor((h - 1.0 - 1e-9) / step)
    else:
        n_uniform = 0
    uniform = np.arange(n_uniform + 1, dtype=float) * step
    r0 = h - uniform[-1]
    # remaining distances to h shrink by a common ratio q <= 1 + slack and end exactly at eta
    n_geo = max(1, math.ceil(math.log(r0 / eta) / math.log1p(slack)))
    remaining = r0 * (eta / r0) ** (np.arange(1, n_geo) / n_geo)
    tail = np.concatenate([h - remaining, [h - eta]])
    return np.concatenate([uniform, tail])


def check_decay_rule(grid: np.ndarray, h: float, step: float) -> None:
    steps = np.diff(grid)
    bound = np.minimum(step, step * (h - grid[1:]))
    bad = np.flatnonzero(steps > bound * (1.0 + 1e-12))
    if bad.size or np.any(steps <= 0):
        m = int(bad[0]) if bad.size else int(np.flatnonzero(steps <= 0)[0])
        raise PlanError(f"last-block step {m} violates the decay rule: {steps[m]!r} > {bound[m]!r}")


@dataclass(frozen=True, eq=False)
class DiscretizationPlan:
    T: float
    eta: float
    N: int
    block_lengths: tuple[float, ...]
    base_step: float
    picard_depth: int
    last_block_rule: str = "geometric"
    grids: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def block_starts(self) -> np.ndarray:
        starts = np.arange(self.N + 1, dtype=float) * self.h
        starts[-1] = self.T - self.eta
        return starts

    @property
    def steps_per_block(self) -> list[int]:
        return [len(g) - 1 for g in self.grids]

    @property
    def total_steps(self) -> int:
        return sum(self.steps_per_block)

    def grid(self, n: int) -> np.ndarray:
        return self.grids[n]

    def steps(self, n: int) -> np.ndarray:
        return np.diff(self.grids[n])

    def times(self, n: int) -> np.ndarray:
        """Absolute backward times of the nodes of block n."""
        return self.block_starts[n] + self.grids[n]

    def index_I(self, n: int, tau):
        grid = self.grids[n]
        tau_arr = np.asarray(tau, dtype=float)
        if np.any(tau_arr < 0) or np.any(tau_arr > grid[-1]):
            raise PlanError(f"tau outside [0, {grid[-1]}] in block {n}")
        idx = np.searchsorted(grid, tau_arr, side="right") - 1
        idx = np.minimum(idx, len(grid) - 2)
        return int(idx) if idx.ndim == 0 else idx

    def g(self, n: int, tau):
        return self.grids[n][self.index_I(n, tau)]

    def with_depth(self, K: int) -> "DiscretizationPlan":
        return DiscretizationPlan(self.T, self.eta, self.N, self.block_lengths, self.base_step, int(K),
                                  self.last_block_rule, self.grids)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "eta": self.eta,
            "N": self.N,
            "block_lengths": list(self.block_lengths),
            "base_step": self.base_step,
            "picard_depth": self.picard_depth,
            "last_block_rule": self.last_block_rule,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscretizationPlan":
        return build_plan(data["T"], data["eta"], data["N"], data["base_step"], data["picard_depth"],
                          data.get("last_block_rule", "geometric"), data.get("node_cap", _DEFAULT_NODE_CAP))


def build_plan(T: float, eta: float, N: int, base_step: float, picard_depth: int,
               last_block_rule: str = "geometric", node_cap: int = _DEFAULT_NODE_CAP) -> DiscretizationPlan:
    T, eta, base_step = float(T), float(eta), float(base_step)
    N, picard_depth = int(N), int(picard_depth)
    if not T > eta > 0:
        raise PlanError("need T > eta > 0")
    if N < 1:
        raise PlanError("need at least one block")
    if base_step <= 0:
        raise PlanError("base step must be positive")
    if picard_depth < 0:
        raise PlanError("Picard depth must be nonnegative")
    h = T / N
    ratio = h / base_step
    if abs(ratio - round(ratio)) > 1e-12 * max(1.0, ratio) or round(ratio) < 1:
        raise PlanError(f"base step {base_step} does not divide block length {h}")
    if eta >= h:
        raise PlanError("early-stop offset must be shorter than one block")
    m_uniform = int(round(ratio))
    if last_block_rule == "geometric":
        m_last = geometric_node_count(h, eta, base_step)
    elif last_block_rule == "uniform":
        m_last = math.ceil((h - eta) / base_step)
    else:
        raise PlanError(f"unknown last-block rule {last_block_rule!r}")
    if max(m_uniform, m_last) + 1 > node_cap:
        raise PlanTooLargeError(
            f"a block needs {max(m_uniform, m_last) + 1} grid nodes, above the cap of {node_cap}; "
            "raise the step-size constant or the cap")

    uniform = _uniform_grid(h, base_step)
    grids = [uniform] * (N - 1)
    if last_block_rule == "geometric":
        last = geometric_last_block(h, eta, base_step)
        check_decay_rule(last, h, base_step)
        cap = math.ceil(math.log(h / eta) / math.log1p(base_step)) + math.ceil(h / base_step) + 1
        if len(last) - 1 > cap:
            raise PlanError(f"last block has {len(last) - 1} steps, more than the expected {cap}")
    else:
        n_steps = m_last
        last = np.linspace(0.0, h - eta, n_steps + 1)
    grids.append(last)
    lengths = tuple([h] * (N - 1) + [h - eta])
    return DiscretizationPlan(T, eta, N, lengths, base_step, picard_depth, last_block_rule, tuple(grids))


def contraction_margin(plan: DiscretizationPlan, lipschitz: float, threshold: float = 0.5) -> float:
    """L^2 h e^{2h} for the longest block; warns above ``threshold``."""
    h = max(plan.block_lengths)
    value = lipschitz ** 2 * h * math.exp(2 * h)
    if value > threshold:
        warnings.warn(f"L^2 h e^(2h) = {value:.3g} exceeds {threshold}; Picard contraction is not guaranteed",
                      ContractionWarning, stacklevel=2)
    return value


@dataclass(frozen=True)
class CorrectorPlan:
    T_dagger: float
    N_dagger: int
    h_dagger: float
    M_dagger: int
    eps_dagger: float
    K_dagger: int
    gamma: float = 1.0

    def __post_init__(self):
        if self.N_dagger < 0 or self.M_dagger < 1 or self.K_dagger < 0:
            raise PlanError("corrector counts must be positive")
        if min(self.h_dagger, self.eps_dagger, self.gamma) <= 0:
            raise PlanError("corrector lengths and friction must be positive")
        if abs(self.N_dagger * self.h_dagger - self.T_dagger) > 1e-12 * max(1.0, self.T_dagger):
            raise PlanError("N_dagger * h_dagger must equal T_dagger")
        if abs(self.M_dagger * self.eps_dagger - self.h_dagger) > 1e-12 * max(1.0, self.h_dagger):
            raise PlanError("M_dagger * eps_dagger must equal h_dagger")

    @classmethod
    def build(cls, T_dagger: float, N_dagger: int, M_dagger: int, K_dagger: int, gamma: float = 1.0):
        N_dagger = int(N_dagger)
        h = T_dagger / N_dagger if N_dagger else T_dagger
        return cls(float(T_dagger) if N_dagger else 0.0, N_dagger, h, int(M_dagger), h / int(M_dagger),
                   int(K_dagger), float(gamma))

    def to_dict(self) -> dict:
        return {"T_dagger": self.T_dagger, "N_dagger": self.N_dagger, "M_dagger": self.M_dagger,
                "K_dagger": self.K_dagger, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> "CorrectorPlan":
        return cls.build(data["T_dagger"], data["N_dagger"], data["M_dagger"], data["K_dagger"],
                         data.get("gamma", 1.0))


@dataclass(frozen=True)
class PresetConstants:
    """Unit constants behind the order-of-magnitude parameter choices."""

    c_T: float = 1.0
    h: float = 1.0
    c_eps: float = 1.0
    c_K: float = 1.0
    c_eta: float = 1.0
    c_T_dagger: float = 1.0
    N_dagger: int = 1
    c_eps_dagger: float = 1.0
    c_K_dagger: float = 1.0
    node_cap: int = _DEFAULT_NODE_CAP


def _horizon(d, delta, c):
    log_term = math.log(d / delta ** 2)
    blocks = max(1, math.ceil(c.c_T * log_term / c.h))
    return blocks * c.h, blocks


def _snap_step(h, raw):
    raw = min(raw, h)
    return h / math.ceil(h / raw - 1e-9)


def theorem1_raw_step(d: int, delta: float, c: PresetConstants = PresetConstants()) -> float:
    T, _ = _horizon(d, delta, c)
    return c.c_eps * delta ** 2 / (d * T)


def theorem1_preset(d: int, delta: float, constants: PresetConstants = PresetConstants()) -> DiscretizationPlan:
    if d < 1 or not 0 < delta < 1:
        raise PlanError("need d >= 1 and 0 < delta < 1")
    c = constants
    T, N = _horizon(d, delta, c)
    step = _snap_step(c.h, theorem1_raw_step(d, delta, c))
    K = math.ceil(c.c_K * math.log(d / delta ** 2))
    return build_plan(T, c.c_eta * delta ** 2, N, step, K, "geometric", c.node_cap)


def theorem2_raw_step(d: int, delta: float, c: PresetConstants = PresetConstants()) -> float:
    ratio = math.sqrt(d) / delta
    return c.c_eps * delta / (math.sqrt(d) * max(math.log(ratio), 1.0))


def theorem2_preset(d: int, delta: float, constants: PresetConstants = PresetConstants(),
                    lipschitz: float = 1.0) -> tuple[DiscretizationPlan, CorrectorPlan]:
    if d < 1 or not 0 < delta < 1:
        raise PlanError("need d >= 1 and 0 < delta < 1")
    c = constants
    T, N = _horizon(d, delta, c)
    step = _snap_step(c.h, theorem2_raw_step(d, delta, c))
    K = math.ceil(c.c_K * math.log(d / delta ** 2))
    plan = build_plan(T, c.c_eta * delta ** 2, N, step, K, "geometric", c.node_cap)
    T_dagger = c.c_T_dagger * min(1.0, 1.0 / math.sqrt(lipschitz))
    h_dagger = T_dagger / c.N_dagger
    eps_dagger = c.c_eps_dagger * delta / math.sqrt(d)
    M_dagger = math.ceil(h_dagger / eps_dagger - 1e-9)
    if M_dagger + 1 > c.node_cap:
        raise PlanTooLargeError(f"corrector block needs {M_dagger + 1} nodes, above the cap of {c.node_cap}")
    K_dagger = math.ceil(c.c_K_dagger * math.log(d / delta ** 2))
    corrector = CorrectorPlan.build(T_dagger, c.N_dagger, M_dagger, K_dagger, max(1.0, math.sqrt(lipschitz)))
    return plan, corrector
