"""Predictor-corrector sampling: probability-flow predictor plus underdamped Langevin corrector.

Predictor dynamics: dy = (y + s(t, y)) / 2 dt, exact step with frozen score
``y' = e^{eps/2} y + (e^{eps/2} - 1) s``.

Corrector dynamics on (u, v) with friction ``gamma`` and the score frozen at the
end time of the outer block::

    du = v dt,   dv = (-gamma v + s(u)) dt + sqrt(2 gamma) dB,

whose invariant law is p (x) N(0, I).  Friction alone is propagated by
G(t) = [[1, (1 - e^{-gamma t}) / gamma], [0, e^{-gamma t}]].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .exact_law import literal_corrector_noise_var, ulmc_noise_cov, ulmc_step_weights
from .picard import (SamplerFailure, SamplerReport, checked_score, chunk_bounds, chunk_executor,
                     iterate_lockstep, resolve_score, timer)
from .sde_sampler import MODES, PicardWorkspace
from .streams import NormalStream


@dataclass(frozen=True)
class GMatrix:
    gamma: float
    t: float

    @property
    def blocks(self) -> tuple[float, float, float, float]:
        return 1.0, float(-np.expm1(-self.gamma * self.t) / self.gamma), 0.0, float(np.exp(-self.gamma * self.t))

    def as_array(self, d: int = 1) -> np.ndarray:
        a, b, c, e = self.blocks
        return np.kron(np.array([[a, b], [c, e]]), np.eye(d))

    def __matmul__(self, other: "GMatrix") -> "GMatrix":
        if other.gamma != self.gamma:
            raise ValueError("friction coefficients differ")
        return GMatrix(self.gamma, self.t + other.t)


def gmatrix(gamma: float, t: float) -> np.ndarray:
    """G(t) as a 2x2 array acting on (position, velocity) scalars."""
    return GMatrix(gamma, t).as_array(1)


@dataclass
class PhaseState:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ValueError("position and velocity shapes differ")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("phase state has non-finite entries")


def corrector_noise_cov(gamma: float, eps: float, r: int = 1, mode: str = "exact"):
    """Covariance of one step's injected noise, seen ``r - 1`` steps later.

    ``paper_verbatim`` returns the literal velocity-channel scalar; ``exact``
    returns the 2x2 (position, velocity) covariance G C G^T with C the
    one-step Brownian covariance under friction.
    """
    if gamma <= 0 or eps <= 0 or r < 1:
        raise ValueError("need gamma, eps > 0 and r >= 1")
    if mode == "paper_verbatim":
        return float(literal_corrector_noise_var(gamma, eps, r))
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    g = gmatrix(gamma, (r - 1) * eps)
    return g @ ulmc_noise_cov(gamma, eps) @ g.T


def predictor_weights(eps, mode="exact"):
    if mode == "exact":
        return np.expm1(eps / 2)
    if mode == "paper_verbatim":
        return 0.5 * np.expm1(eps)
    raise ValueError(f"unknown mode {mode!r}")


def predictor_workspace(plan, n, start, score, mode="exact"):
    tau = plan.grid(n)
    start_weight = np.exp(tau / 2)
    if mode == "paper_verbatim":
        start_weight = start_weight.copy()
        start_weight[1:] *= 0.5
    return PicardWorkspace(start, tau, plan.times(n), score, predictor_weights(plan.steps(n), mode),
                           start_weight=start_weight, where=f"predictor block {n}")


def run_predictor_block(plan, n, start_state, score, K=None, mode="exact", residual_tol=None):
    handle = resolve_score(score)
    start = np.atleast_2d(np.asarray(start_state, dtype=float))
    ws = predictor_workspace(plan, n, start, handle, mode)
    depth = plan.picard_depth if K is None else int(K)
    residuals, _ = iterate_lockstep([ws], depth, map, start.shape[0], residual_tol, f"predictor block {n}",
                                    handle.lipschitz, plan.block_lengths[n])
    return ws.end_state.copy(), residuals


def _corrector_coefficients(cplan, mode):
    g, eps = cplan.gamma, cplan.eps_dagger
    decay, pos_w, vel_w = ulmc_step_weights(g, eps)
    carry = -np.expm1(-g * eps) / g
    if mode == "exact":
        return decay, carry, pos_w, vel_w
    return decay, carry, -carry, -np.expm1(-g * eps)


def corrector_noise(cplan, std_noise, mode="exact"):
    """Scale standard normals (B, M, 2, d) into (position, velocity) step noise."""
    g, eps, M = cplan.gamma, cplan.eps_dagger, cplan.M_dagger
    if mode == "exact":
        fac = np.linalg.cholesky(ulmc_noise_cov(g, eps))
        pos = fac[0, 0] * std_noise[:, :, 0]
        vel = fac[1, 0] * std_noise[:, :, 0] + fac[1, 1] * std_noise[:, :, 1]
        return pos, vel
    offsets = M - np.arange(M) + 1
    sd = np.sqrt(literal_corrector_noise_var(g, eps, offsets))
    return np.zeros_like(std_noise[:, :, 1]), sd[None, :, None] * std_noise[:, :, 1]


class CorrectorWorkspace:
    """Picard iterates of one corrector block for a chunk of paths."""

    def __init__(self, start: PhaseState, cplan, t_frozen, score, std_noise, mode="exact", where="corrector"):
        self.u0 = np.atleast_2d(start.u)
        self.v0 = np.atleast_2d(start.v)
        self.cplan = cplan
        self.score = score
        self.where = where
        M = cplan.M_dagger
        self.times = np.full(M + 1, float(t_frozen))
        self.decay, self.carry, self.pos_w, self.vel_w = _corrector_coefficients(cplan, mode)
        self.noise_u, self.noise_v = corrector_noise(cplan, std_noise, mode)
        self.u = np.repeat(self.u0[:, None, :], M + 1, axis=1)
        self.v = np.repeat(self.v0[:, None, :], M + 1, axis=1)
        self.residual_history: list[float] = []
        self.iterations = 0

    @property
    def end(self) -> PhaseState:
        return PhaseState(self.u[:, -1].copy(), self.v[:, -1].copy())

    def step(self):
        s = checked_score(self.score, self.times, self.u, f"{self.where}, iteration {self.iterations}")[:, :-1]
        a = self.pos_w * s + self.noise_u
        b = self.vel_w * s + self.noise_v
        v_new = np.empty_like(self.v)
        v_new[:, 0] = self.v0
        v_new[:, 1:], _ = lfilter([1.0], [1.0, -self.decay], b, axis=1, zi=self.decay * self.v0[:, None, :])
        u_new = np.empty_like(self.u)
        u_new[:, 0] = self.u0
        u_new[:, 1:] = self.u0[:, None, :] + np.cumsum(self.carry * v_new[:, :-1] + a, axis=1)
        du, dv = u_new - self.u, v_new - self.v
        node_sq = np.einsum("bmd,bmd->bm", du, du) + np.einsum("bmd,bmd->bm", dv, dv)
        self.u, self.v = u_new, v_new
        self.iterations += 1
        node_sums = node_sq.sum(axis=0)
        self.residual_history.append(float(np.max(node_sums) / node_sq.shape[0]))
        return node_sums, float(node_sq.max())


def run_corrector_block(cplan, start: PhaseState, score, t_frozen, std_noise, mode="exact", K=None,
                        residual_tol=None):
    """Depth-K Picard solve of one corrector block; ``std_noise`` is (B, M, 2, d) standard normal."""
    handle = resolve_score(score)
    ws = CorrectorWorkspace(start, cplan, t_frozen, handle, std_noise, mode)
    depth = cplan.K_dagger if K is None else int(K)
    residuals, _ = iterate_lockstep([ws], depth, map, ws.u0.shape[0], residual_tol, "corrector block",
                                    handle.lipschitz, cplan.h_dagger)
    return ws.end, residuals


def sequential_corrector_step(state: PhaseState, s, noise_u, noise_v, coeffs) -> PhaseState:
    decay, carry, pos_w, vel_w = coeffs
    return PhaseState(state.u + carry * state.v + pos_w * s + noise_u, decay * state.v + vel_w * s + noise_v)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")


def run_piadm_ode(plan, cplan, score, seed, n_samples, mode="exact", threads=1, chunk_size=4096,
                  residual_tol=None):
    _check_mode(mode)
    handle = resolve_score(score)
    d = handle.dim
    n_corr = cplan.N_dagger if cplan is not None else 0
    report = SamplerReport("piadm_ode", mode)
    started = timer()
    bounds = chunk_bounds(n_samples, chunk_size)
    states = [NormalStream(seed, "init").draw(a, b, (d,)) for a, b in bounds]
    with chunk_executor(threads) as mapper:
        for n in range(plan.N):
            M = plan.steps_per_block[n]
            workspaces = [predictor_workspace(plan, n, y, handle, mode) for y in states]
            residuals, path_res = iterate_lockstep(workspaces, plan.picard_depth, mapper, n_samples, residual_tol,
                                                   f"predictor block {n}", handle.lipschitz, plan.block_lengths[n])
            report.residual_history.append(residuals)
            report.max_path_residual_history.append(path_res)
            report.picard_iterations.append(len(residuals))
            report.count_round(M + 1, len(residuals))
            states = [ws.end_state.copy() for ws in workspaces]
            if not n_corr:
                continue
            t_frozen = float(plan.times(n)[-1])
            momentum = NormalStream(seed, "momentum", n)
            phases = [PhaseState(y, momentum.draw(a, b, (d,))) for y, (a, b) in zip(states, bounds)]
            for nd in range(n_corr):
                stream = NormalStream(seed, "corrector", n, nd)
                cws = [CorrectorWorkspace(ph, cplan, t_frozen, handle,
                                          stream.draw(a, b, (cplan.M_dagger, 2, d)), mode,
                                          where=f"corrector block ({n}, {nd})")
                       for ph, (a, b) in zip(phases, bounds)]
                c_res, _ = iterate_lockstep(cws, cplan.K_dagger, mapper, n_samples, residual_tol,
                                            f"corrector block ({n}, {nd})", handle.lipschitz, cplan.h_dagger)
                report.corrector_residual_history.append(c_res)
                report.count_round(cplan.M_dagger + 1, len(c_res))
                phases = [ws.end for ws in cws]
            states = [ph.u for ph in phases]
    report.wall_clock = timer() - started
    return np.concatenate(states, axis=0), report


def run_sequential_ode(plan, cplan, score, seed, n_samples, mode="exact", threads=1, chunk_size=4096):
    """Per-step predictor and corrector recurrences driven by the same random streams."""
    _check_mode(mode)
    handle = resolve_score(score)
    d = handle.dim
    n_corr = cplan.N_dagger if cplan is not None else 0
    report = SamplerReport("sequential_ode", mode)
    started = timer()
    coeffs = _corrector_coefficients(cplan, mode) if n_corr else None

    def score_at(t, x):
        s = handle.fn(t, x)
        if not np.all(np.isfinite(s)):
            raise SamplerFailure(f"non-finite score at backward time {t}")
        return s

    def run_chunk(ab):
        a, b = ab
        y = NormalStream(seed, "init").draw(a, b, (d,))
        for n in range(plan.N):
            times, eps = plan.times(n), plan.steps(n)
            weights = predictor_weights(eps, mode)
            for m in range(eps.size):
                carry = np.exp(eps[m] / 2) * (0.5 if (mode == "paper_verbatim" and m == 0) else 1.0)
                y = carry * y + weights[m] * score_at(times[m], y)
            if not n_corr:
                continue
            state = PhaseState(y, NormalStream(seed, "momentum", n).draw(a, b, (d,)))
            for nd in range(n_corr):
                std = NormalStream(seed, "corrector", n, nd).draw(a, b, (cplan.M_dagger, 2, d))
                noise_u, noise_v = corrector_noise(cplan, std, mode)
                for j in range(cplan.M_dagger):
                    s = score_at(times[-1], state.u)
                    state = sequential_corrector_step(state, s, noise_u[:, j], noise_v[:, j], coeffs)
            y = state.u
        return y

    with chunk_executor(threads) as mapper:
        out = list(mapper(run_chunk, chunk_bounds(n_samples, chunk_size)))
    for n in range(plan.N):
        report.count_round(1, plan.steps_per_block[n])
        if n_corr:
            report.count_round(1, n_corr * cplan.M_dagger)
    report.wall_clock = timer() - started
    return np.concatenate(out, axis=0), report
