"""Blockwise Picard sampling of the backward SDE, and its sequential baseline.

Backward dynamics: dy = (y/2 + s(t, y)) dt + dW.  With the score frozen over a
step of length eps the exact update is

    y' = e^{eps/2} y + 2(e^{eps/2} - 1) s + sqrt(e^{eps} - 1) xi.

``mode="paper_verbatim"`` swaps the score weight for 2(e^{eps} - 1).
"""

from __future__ import annotations

import numpy as np

from .picard import (SamplerFailure, SamplerReport, checked_score, chunk_bounds, chunk_executor,
                     iterate_lockstep, resolve_score, timer)
from .streams import NormalStream

MODES = ("exact", "paper_verbatim")


def sde_score_weight(eps, mode="exact"):
    eps = np.asarray(eps, dtype=float)
    if mode == "exact":
        return 2.0 * np.expm1(eps / 2)
    if mode == "paper_verbatim":
        return 2.0 * np.expm1(eps)
    raise ValueError(f"unknown mode {mode!r}")


def sequential_exp_integrator_step(state, t_abs, eps, score_fn, noise, mode="exact"):
    """One exponential-integrator step of the backward SDE at backward time ``t_abs``."""
    s = score_fn(t_abs, state)
    if not np.all(np.isfinite(s)):
        raise SamplerFailure(f"non-finite score at backward time {t_abs}")
    return np.exp(eps / 2) * state + sde_score_weight(eps, mode) * s + np.sqrt(np.expm1(eps)) * noise


class PicardWorkspace:
    """Iterates of one block for a chunk of paths.

    Node m of the next iterate is
    ``start_weight[m] * y0 + sum_{j<m} e^{(tau_m - tau_{j+1})/2} (score_weight[j] s_j + noise[j])``
    where s_j is the score of the current iterate at node j.  Node 0 is pinned
    to the block start state.
    """

    def __init__(self, start, tau, times, score, score_weight, noise=None, start_weight=None, where="block"):
        self.start = np.asarray(start, dtype=float)
        self.tau = np.asarray(tau, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.score = score
        self.score_weight = np.asarray(score_weight, dtype=float)
        self.noise = noise
        self.where = where
        M = self.tau.size - 1
        self.start_weight = np.exp(self.tau / 2) if start_weight is None else np.asarray(start_weight)
        self.grow = np.exp(self.tau[1:] / 2)[None, :, None]
        shrink = np.exp(-self.tau[1:] / 2)
        # weights and noise pre-multiplied by e^{-tau_{j+1}/2} once per block
        self._score_scale = (self.score_weight * shrink)[None, :, None]
        self._noise_term = None if noise is None else noise * shrink[None, :, None]
        self._start_term = self.start_weight[None, 1:, None] * self.start[:, None, :]
        self.states = np.repeat(self.start[:, None, :], M + 1, axis=1)
        self.residual_history: list[float] = []
        self.iterations = 0

    @property
    def end_state(self):
        return self.states[:, -1, :]

    def step(self):
        s = checked_score(self.score, self.times, self.states, f"{self.where}, iteration {self.iterations}")
        new = np.empty_like(self.states)
        new[:, 0] = self.start
        body = new[:, 1:]
        np.multiply(s[:, :-1], self._score_scale, out=body)
        if self._noise_term is not None:
            body += self._noise_term
        np.cumsum(body, axis=1, out=body)
        body *= self.grow
        body += self._start_term
        diff = self.states
        diff -= new
        node_sq = np.einsum("bmd,bmd->bm", diff, diff)
        self.states = new
        self.iterations += 1
        node_sums = node_sq.sum(axis=0)
        self.residual_history.append(float(np.max(node_sums) / node_sq.shape[0]))
        return node_sums, float(node_sq.max())


def sde_block_workspace(plan, n, start, score, std_noise, mode="exact", where=None):
    eps = plan.steps(n)
    noise = np.sqrt(np.expm1(eps))[None, :, None] * std_noise
    return PicardWorkspace(start, plan.grid(n), plan.times(n), score, sde_score_weight(eps, mode), noise,
                           where=where or f"SDE block {n}")


def run_piadm_sde_block(plan, n, start_state, score, noise, K=None, mode="exact", residual_tol=None):
    """Depth-K Picard solve of block n for a batch of start states (B, d).

    ``noise`` holds standard normals of shape (B, M_n, d), drawn once for the
    block and reused by every iteration.  Returns (end_state, residuals).
    """
    handle = resolve_score(score)
    start = np.atleast_2d(np.asarray(start_state, dtype=float))
    ws = sde_block_workspace(plan, n, start, handle, np.asarray(noise).reshape(start.shape[0], -1, start.shape[1]),
                             mode)
    depth = plan.picard_depth if K is None else int(K)
    residuals, _ = iterate_lockstep([ws], depth, map, start.shape[0], residual_tol, f"SDE block {n}",
                                    handle.lipschitz, plan.block_lengths[n])
    return ws.end_state.copy(), residuals


def _initial_states(seed, a, b, d):
    return NormalStream(seed, "init").draw(a, b, (d,))


def run_piadm_sde(plan, score, seed, n_samples, mode="exact", threads=1, chunk_size=4096,
                  residual_tol=None):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    handle = resolve_score(score)
    d = handle.dim
    report = SamplerReport("piadm_sde", mode)
    started = timer()
    bounds = chunk_bounds(n_samples, chunk_size)
    states = [_initial_states(seed, a, b, d) for a, b in bounds]
    with chunk_executor(threads) as mapper:
        for n in range(plan.N):
            M = plan.steps_per_block[n]
            stream = NormalStream(seed, "sde", n)
            workspaces = list(mapper(
                lambda ab_y: sde_block_workspace(plan, n, ab_y[1], handle, stream.draw(ab_y[0][0], ab_y[0][1], (M, d)),
                                                 mode),
                zip(bounds, states)))
            residuals, path_res = iterate_lockstep(workspaces, plan.picard_depth, mapper, n_samples, residual_tol,
                                                   f"SDE block {n}", handle.lipschitz, plan.block_lengths[n])
            states = [ws.end_state.copy() for ws in workspaces]
            report.residual_history.append(residuals)
            report.max_path_residual_history.append(path_res)
            report.picard_iterations.append(len(residuals))
            report.count_round(M + 1, len(residuals))
    report.wall_clock = timer() - started
    return np.concatenate(states, axis=0), report


def run_sequential_sde(plan, score, seed, n_samples, mode="exact", threads=1, chunk_size=4096):
    """Step-by-step exponential integrator driven by the same noise as PIADM-SDE."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    handle = resolve_score(score)
    d = handle.dim
    report = SamplerReport("sequential_sde", mode)
    started = timer()

    def run_chunk(ab):
        a, b = ab
        y = _initial_states(seed, a, b, d)
        for n in range(plan.N):
            times, eps = plan.times(n), plan.steps(n)
            noise = NormalStream(seed, "sde", n).draw(a, b, (eps.size, d))
            for m in range(eps.size):
                y = sequential_exp_integrator_step(y, times[m], eps[m], handle.fn, noise[:, m], mode)
        return y

    with chunk_executor(threads) as mapper:
        out = list(mapper(run_chunk, chunk_bounds(n_samples, chunk_size)))
    for n in range(plan.N):
        report.count_round(1, plan.steps_per_block[n])
    report.wall_clock = timer() - started
    return np.concatenate(out, axis=0), report
