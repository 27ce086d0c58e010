"""Exact Gaussian laws of the samplers for Gaussian targets.

With a Gaussian target the score is affine, so every update is affine in the
state and the injected noise.  Two independent routes are provided:

* ``affine_of_step`` / ``propagate`` push a law through one discrete step at a
  time (the sequential solve, i.e. the Picard fixed point);
* ``piadm_sde_law`` / ``piadm_ode_law`` build finite-depth Picard iterates as
  coefficient matrices over the basis (start state, constant, noise normals) in
  the eigenbasis of the target covariance, where all coordinates decouple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnsupportedTarget(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("mean and covariance dimensions disagree")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if mean.size and np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, d: int) -> "GaussianLaw":
        return cls(np.zeros(d), np.eye(d))

    def marginal(self, idx) -> "GaussianLaw":
        idx = np.asarray(idx)
        return GaussianLaw(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def rotate(self, q: np.ndarray) -> "GaussianLaw":
        """Law of q @ x."""
        return GaussianLaw(q @ self.mean, q @ self.cov @ q.T)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.reshape(-1).tolist(), "dim": self.dim}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianLaw":
        d = int(data["dim"])
        return cls(np.asarray(data["mean"]), np.asarray(data["cov"]).reshape(d, d))


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def psd_factor(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, falling back to a symmetric root when singular."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return psd_sqrt(mat)


@dataclass(frozen=True, eq=False)
class AffineStep:
    """x -> A x + b + L n with L L^T = noise_cov and n standard normal."""

    A: np.ndarray
    b: np.ndarray
    noise_cov: np.ndarray

    @property
    def noise_factor(self) -> np.ndarray:
        return psd_factor(self.noise_cov)

    def apply(self, x: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        out = x @ self.A.T + self.b
        if noise is not None:
            out = out + noise @ self.noise_factor.T
        return out

    def then(self, other: "AffineStep") -> "AffineStep":
        """Apply self first, then ``other``."""
        return AffineStep(other.A @ self.A, other.A @ self.b + other.b,
                          other.A @ self.noise_cov @ other.A.T + other.noise_cov)


def propagate(law: GaussianLaw, step: AffineStep) -> GaussianLaw:
    cov = step.A @ law.cov @ step.A.T + step.noise_cov
    return GaussianLaw(step.A @ law.mean + step.b, 0.5 * (cov + cov.T))


# ---------------------------------------------------------------- divergences
def kl_gaussian(p: GaussianLaw, q: GaussianLaw) -> float:
    d = p.dim
    try:
        chol_q = np.linalg.cholesky(q.cov)
    except np.linalg.LinAlgError:
        raise ValueError("second argument has a singular covariance") from None
    sign, logdet_p = np.linalg.slogdet(p.cov)
    if sign <= 0:
        return float("inf")
    logdet_q = 2.0 * np.sum(np.log(np.diag(chol_q)))
    solved = np.linalg.solve(chol_q, p.cov)
    trace = np.trace(np.linalg.solve(chol_q.T, solved))
    diff = np.linalg.solve(chol_q, q.mean - p.mean)
    return float(max(0.0, 0.5 * (trace + diff @ diff - d + logdet_q - logdet_p)))


def w2_gaussian(p: GaussianLaw, q: GaussianLaw) -> float:
    root_q = psd_sqrt(q.cov)
    cross = psd_sqrt(root_q @ p.cov @ root_q)
    bures = np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross)
    return float(np.sqrt(max(0.0, np.sum((p.mean - q.mean) ** 2) + bures)))


def tv_bound_from_kl(kl: float) -> float:
    return float(np.sqrt(kl / 2.0))


# ---------------------------------------------------------- per-step affine maps
@dataclass(frozen=True)
class StepDescriptor:
    """One sampler step: ``kind`` in {sde, ode, corrector}.

    ``t`` is the backward time at which the score is queried, ``eps`` the step
    length.  ``first_in_block`` matters only for the literal predictor, which
    halves the block start state; ``noise_offset`` only for the literal
    corrector noise.
    """

    kind: str
    t: float
    eps: float
    mode: str = "exact"
    gamma: float = 1.0
    noise_offset: int = 1
    first_in_block: bool = False


def _affine_score(oracle, t_backward: float):
    if oracle.target.n_components != 1:
        raise UnsupportedTarget("exact laws need a single-Gaussian target")
    forward = oracle.horizon - t_backward
    mean, prec = oracle.gaussian_params(max(forward, 0.0))
    shift = oracle.score_shift(max(forward, 0.0))
    return -prec, prec @ mean + shift


def ulmc_step_weights(gamma: float, eps: float) -> tuple[float, float, float]:
    """(velocity carry, position drift weight, velocity drift weight) of one exact step."""
    x = gamma * eps
    decay = np.exp(-x)
    vel_w = -np.expm1(-x) / gamma
    if x < 1e-3:
        k = np.arange(2, 10)
        pos_w = np.sum((-1.0) ** k * x ** k / np.cumprod(np.arange(1, 10))[1:]) / gamma ** 2
    else:
        pos_w = (eps - vel_w) / gamma
    return decay, pos_w, vel_w


def ulmc_noise_cov(gamma: float, eps: float) -> np.ndarray:
    """2x2 covariance of the friction-propagated Brownian increment over one step."""
    x = gamma * eps
    if x < 1e-3:
        k = np.arange(3, 14)
        fact = np.cumprod(np.arange(1, 14))[2:]
        pos = np.sum((-1.0) ** (k + 1) * (2.0 ** (k - 1) - 2.0) * x ** k / fact) * 2.0 / gamma ** 2
    else:
        pos = (2.0 / gamma) * (eps - 2.0 * (-np.expm1(-x)) / gamma + (-np.expm1(-2 * x)) / (2 * gamma))
    vel = -np.expm1(-2 * x)
    cross = np.expm1(-x) ** 2 / gamma
    return np.array([[pos, cross], [cross, vel]])


def literal_corrector_noise_var(gamma: float, eps: float, offset: int) -> float:
    return 2.0 * gamma * (1.0 + gamma ** -2) * np.expm1(-gamma * eps) ** 2 * np.exp(-2.0 * gamma * offset * eps)


def affine_of_step(step: StepDescriptor, oracle) -> AffineStep:
    slope, const = _affine_score(oracle, step.t)
    d = slope.shape[0]
    eye = np.eye(d)
    eps = step.eps
    if step.kind == "sde":
        score_w = 2.0 * np.expm1(eps / 2) if step.mode == "exact" else 2.0 * np.expm1(eps)
        return AffineStep(np.exp(eps / 2) * eye + score_w * slope, score_w * const, np.expm1(eps) * eye)
    if step.kind == "ode":
        if step.mode == "exact":
            carry, score_w = np.exp(eps / 2), np.expm1(eps / 2)
        else:
            carry, score_w = np.exp(eps / 2), 0.5 * np.expm1(eps)
            if step.first_in_block:
                carry *= 0.5
        return AffineStep(carry * eye + score_w * slope, score_w * const, np.zeros((d, d)))
    if step.kind == "corrector":
        g = step.gamma
        decay, pos_w, vel_w = ulmc_step_weights(g, eps)
        if step.mode == "exact":
            noise = np.kron(ulmc_noise_cov(g, eps), eye)
        else:
            pos_w, vel_w = -vel_w, -np.expm1(-g * eps)
            noise = np.kron(np.diag([0.0, literal_corrector_noise_var(g, eps, step.noise_offset)]), eye)
        A = np.block([[eye + pos_w * slope, vel_w_carry(g, eps) * eye],
                      [vel_w * slope, decay * eye]])
        b = np.concatenate([pos_w * const, vel_w * const])
        return AffineStep(A, b, noise)
    raise ValueError(f"unknown step kind {step.kind!r}")


def vel_w_carry(gamma: float, eps: float) -> float:
    """Upper-right entry of G(eps): how far the velocity moves the position."""
    return -np.expm1(-gamma * eps) / gamma


def gmatrix_blocks(gamma: float, t) -> tuple:
    """Scalar blocks (1, (1-e^{-g t})/g, 0, e^{-g t}) of G(t)."""
    t = np.asarray(t, dtype=float)
    return np.ones_like(t), -np.expm1(-gamma * t) / gamma, np.zeros_like(t), np.exp(-gamma * t)


def augment_momentum(law: GaussianLaw) -> GaussianLaw:
    d = law.dim
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = law.cov
    cov[d:, d:] = np.eye(d)
    return GaussianLaw(np.concatenate([law.mean, np.zeros(d)]), cov)


def position_marginal(law: GaussianLaw) -> GaussianLaw:
    return law.marginal(np.arange(law.dim // 2))


# ----------------------------------------------------- sequential (fixed point)
def sde_step_descriptors(plan, mode="exact"):
    for n in range(plan.N):
        times = plan.times(n)
        for t, eps in zip(times[:-1], np.diff(plan.grid(n))):
            yield StepDescriptor("sde", float(t), float(eps), mode)


def sequential_sde_law(plan, oracle, mode="exact", start: GaussianLaw | None = None,
                       trace: list | None = None) -> GaussianLaw:
    law = start if start is not None else GaussianLaw.standard(oracle.dim)
    for step in sde_step_descriptors(plan, mode):
        law = propagate(law, affine_of_step(step, oracle))
        if trace is not None:
            trace.append(law)
    return law


def corrector_block_steps(cplan, t_frozen, mode="exact"):
    M = cplan.M_dagger
    for j in range(M):
        yield StepDescriptor("corrector", float(t_frozen), cplan.eps_dagger, mode, cplan.gamma, M - j + 1)


def sequential_ode_law(plan, cplan, oracle, mode="exact", start: GaussianLaw | None = None,
                       trace: list | None = None) -> GaussianLaw:
    law = start if start is not None else GaussianLaw.standard(oracle.dim)
    n_corr = cplan.N_dagger if cplan is not None else 0
    for n in range(plan.N):
        times = plan.times(n)
        for j, (t, eps) in enumerate(zip(times[:-1], np.diff(plan.grid(n)))):
            step = StepDescriptor("ode", float(t), float(eps), mode, first_in_block=(j == 0))
            law = propagate(law, affine_of_step(step, oracle))
            if trace is not None:
                trace.append(law)
        if n_corr:
            phase = augment_momentum(law)
            for _ in range(n_corr):
                for step in corrector_block_steps(cplan, times[-1], mode):
                    phase = propagate(phase, affine_of_step(step, oracle))
            law = position_marginal(phase)
            if trace is not None:
                trace.append(law)
    return law


# ------------------------------------------------ finite-depth Picard iterates
class _RotatedScore:
    """Per-coordinate affine score in the eigenbasis of the target covariance."""

    def __init__(self, oracle):
        if oracle.target.n_components != 1:
            raise UnsupportedTarget("exact laws need a single-Gaussian target")
        self.oracle = oracle
        lam, q = np.linalg.eigh(oracle.target.covariances[0])
        self.lam, self.q = lam, q
        self.mu = q.T @ oracle.target.means[0]

    def params(self, t_backward: np.ndarray):
        """Slope (precision) and constant per (coordinate, node): score = -prec*y + const."""
        forward = np.clip(self.oracle.horizon - np.asarray(t_backward, dtype=float), 0.0, None)
        decay = np.exp(-forward)[None, :]
        var = decay * self.lam[:, None] - np.expm1(-forward)[None, :]
        prec = 1.0 / var
        shift = self.oracle.score_shift(forward) @ self.q
        const = prec * np.sqrt(decay) * self.mu[:, None] + shift.T
        return prec, const


def _picard_lower(tau: np.ndarray) -> np.ndarray:
    """L[m, j] = exp((tau_m - tau_{j+1}) / 2) for j < m, else 0."""
    m = tau.size
    diff = tau[:, None] - tau[None, 1:]
    mask = np.arange(m)[:, None] > np.arange(m - 1)[None, :]
    return np.where(mask, np.exp(0.5 * np.where(mask, diff, 0.0)), 0.0)


def _flow_block_affine(tau, times, rot, K, kind, mode) -> AffineStep:
    M = tau.size - 1
    eps = np.diff(tau)
    prec, const = rot.params(times)
    d = prec.shape[0]
    lower = _picard_lower(tau)
    if kind == "sde":
        score_w = 2.0 * np.expm1(eps / 2) if mode == "exact" else 2.0 * np.expm1(eps)
        noise_w = np.sqrt(np.expm1(eps))
        n_basis = 2 + M
    else:
        score_w = np.expm1(eps / 2) if mode == "exact" else 0.5 * np.expm1(eps)
        n_basis = 2
    start_w = np.exp(tau / 2)
    if kind == "ode" and mode != "exact":
        start_w = start_w.copy()
        start_w[1:] *= 0.5
    # coefficients over basis [start, 1, noise_0..noise_{M-1}]
    fixed = np.zeros((M + 1, n_basis))
    fixed[:, 0] = start_w
    if kind == "sde":
        fixed[:, 2:] = lower * noise_w[None, :]
    Y = np.zeros((d, M + 1, n_basis))
    Y[:, :, 0] = 1.0
    weighted = lower * score_w[None, :]
    for _ in range(K):
        S = -prec[:, :, None] * Y
        S[:, :, 1] += const
        Y = fixed[None] + np.einsum("mj,ijb->imb", weighted, S[:, :M, :])
    end = Y[:, M, :]
    noise_var = np.sum(end[:, 2:] ** 2, axis=1)
    return AffineStep(np.diag(end[:, 0]), end[:, 1].copy(), np.diag(noise_var))


def _corrector_block_affine(cplan, t_frozen, rot, mode) -> AffineStep:
    M, eps, g = cplan.M_dagger, cplan.eps_dagger, cplan.gamma
    prec, const = rot.params(np.full(M + 1, t_frozen))
    d = prec.shape[0]
    steps_after = np.arange(M + 1)[:, None] - np.arange(M)[None, :] - 1
    mask = steps_after >= 0
    lag = np.where(mask, steps_after, 0) * eps
    p12 = np.where(mask, -np.expm1(-g * lag) / g, 0.0)
    p22 = np.where(mask, np.exp(-g * lag), 0.0)
    p11 = mask.astype(float)
    node_t = np.arange(M + 1) * eps
    decay, pos_w, vel_w = ulmc_step_weights(g, eps)
    # basis [u0, v0, 1, noise...]
    if mode == "exact":
        fac = np.linalg.cholesky(ulmc_noise_cov(g, eps))
        n_noise = 2 * M
    else:
        pos_w, vel_w = -(-np.expm1(-g * eps) / g), -np.expm1(-g * eps)
        offsets = M - np.arange(M) + 1
        lit_sd = np.sqrt(literal_corrector_noise_var(g, eps, offsets))
        n_noise = M
    n_basis = 3 + n_noise
    noise_pos = np.zeros((M, n_basis))
    noise_vel = np.zeros((M, n_basis))
    rows = np.arange(M)
    if mode == "exact":
        noise_pos[rows, 3 + 2 * rows] = fac[0, 0]
        noise_vel[rows, 3 + 2 * rows] = fac[1, 0]
        noise_vel[rows, 4 + 2 * rows] = fac[1, 1]
    else:
        noise_vel[rows, 3 + rows] = lit_sd
    U_fixed = np.zeros((M + 1, n_basis))
    U_fixed[:, 0] = 1.0
    U_fixed[:, 1] = -np.expm1(-g * node_t) / g
    U_fixed += p11 @ noise_pos + p12 @ noise_vel
    V_fixed = np.zeros((M + 1, n_basis))
    V_fixed[:, 1] = np.exp(-g * node_t)
    V_fixed += p22 @ noise_vel
    to_u = p11 * pos_w + p12 * vel_w
    to_v = p22 * vel_w
    U = np.zeros((d, M + 1, n_basis))
    U[:, :, 0] = 1.0
    V = np.zeros((d, M + 1, n_basis))
    V[:, :, 1] = 1.0
    for _ in range(cplan.K_dagger):
        S = -prec[:, :M, None] * U[:, :M, :]
        S[:, :, 2] += const[:, :M]
        U = U_fixed[None] + np.einsum("mj,ijb->imb", to_u, S)
        V = V_fixed[None] + np.einsum("mj,ijb->imb", to_v, S)
    u_end, v_end = U[:, M, :], V[:, M, :]
    A = np.block([[np.diag(u_end[:, 0]), np.diag(u_end[:, 1])],
                  [np.diag(v_end[:, 0]), np.diag(v_end[:, 1])]])
    b = np.concatenate([u_end[:, 2], v_end[:, 2]])
    cov_uu = np.sum(u_end[:, 3:] ** 2, axis=1)
    cov_uv = np.sum(u_end[:, 3:] * v_end[:, 3:], axis=1)
    cov_vv = np.sum(v_end[:, 3:] ** 2, axis=1)
    noise = np.block([[np.diag(cov_uu), np.diag(cov_uv)], [np.diag(cov_uv), np.diag(cov_vv)]])
    return AffineStep(A, b, noise)


def _block_diag_rotation(q: np.ndarray) -> np.ndarray:
    d = q.shape[0]
    out = np.zeros((2 * d, 2 * d))
    out[:d, :d] = q
    out[d:, d:] = q
    return out


def piadm_sde_law(plan, oracle, mode="exact", K: int | None = None,
                  start: GaussianLaw | None = None) -> GaussianLaw:
    """Law of PIADM-SDE output after depth-K Picard in every block."""
    rot = _RotatedScore(oracle)
    K = plan.picard_depth if K is None else K
    law = (start if start is not None else GaussianLaw.standard(oracle.dim)).rotate(rot.q.T)
    for n in range(plan.N):
        law = propagate(law, _flow_block_affine(plan.grid(n), plan.times(n), rot, K, "sde", mode))
    return law.rotate(rot.q)


def piadm_ode_law(plan, cplan, oracle, mode="exact", K: int | None = None,
                  start: GaussianLaw | None = None) -> GaussianLaw:
    """Law of PIADM-ODE output: depth-K predictor then N_dagger corrector blocks per outer block."""
    rot = _RotatedScore(oracle)
    K = plan.picard_depth if K is None else K
    law = (start if start is not None else GaussianLaw.standard(oracle.dim)).rotate(rot.q.T)
    n_corr = cplan.N_dagger if cplan is not None else 0
    for n in range(plan.N):
        times = plan.times(n)
        law = propagate(law, _flow_block_affine(plan.grid(n), times, rot, K, "ode", mode))
        if n_corr:
            phase = augment_momentum(law)
            block = _corrector_block_affine(cplan, float(times[-1]), rot, mode)
            for _ in range(n_corr):
                phase = propagate(phase, block)
            law = position_marginal(phase)
    return law.rotate(rot.q)


def corrector_block_law(law: GaussianLaw, cplan, t_frozen: float, oracle, mode="exact") -> GaussianLaw:
    """Push a phase-space law (position then velocity) through one depth-K corrector block."""
    rot = _RotatedScore(oracle)
    r2 = _block_diag_rotation(rot.q)
    block = _corrector_block_affine(cplan, float(t_frozen), rot, mode)
    return propagate(law.rotate(r2.T), block).rotate(r2)
