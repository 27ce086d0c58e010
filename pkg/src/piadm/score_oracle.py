"""Closed-form scores of OU-noised Gaussian and Gaussian-mixture targets."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .exact_law import GaussianLaw
from .streams import uniform_direction

_TIME_SLACK = 1e-9


class DomainError(ValueError):
    pass


def _as_matrix_stack(covs, d):
    arr = np.asarray(covs, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != (d, d):
        raise ValueError(f"covariances must be {d}x{d}, got {arr.shape[1:]}")
    return arr


@dataclass(frozen=True, eq=False)
class TargetSpec:
    """Data law p0: a Gaussian or a finite Gaussian mixture."""

    variant: str
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.variant not in ("gaussian", "mixture"):
            raise ValueError(f"unknown target variant {self.variant!r}")
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        d = means.shape[1]
        covs = _as_matrix_stack(self.covariances, d)
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        k = means.shape[0]
        if covs.shape[0] != k or weights.shape != (k,):
            raise ValueError("means, covariances and weights disagree on component count")
        if self.variant == "gaussian" and k != 1:
            raise ValueError("a gaussian target has exactly one component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for i, c in enumerate(covs):
            if np.max(np.abs(c - c.T)) > 1e-12:
                raise ValueError(f"covariance {i} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {i} is not positive definite") from None
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "weights", weights)
        if self.normalized:
            err = np.max(np.abs(self.covariance - np.eye(d)))
            if err > 1e-8:
                raise ValueError(f"target flagged normalized but overall covariance deviates by {err:.3g}")

    @classmethod
    def gaussian(cls, mean, cov, normalized=False):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls("gaussian", mean[None], np.asarray(cov, dtype=float)[None], np.ones(1), normalized)

    @classmethod
    def standard_normal(cls, dim):
        return cls.gaussian(np.zeros(dim), np.eye(dim), normalized=True)

    @classmethod
    def mixture(cls, means, covariances, weights, normalized=False):
        return cls("mixture", means, covariances, weights, normalized)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def covariance(self) -> np.ndarray:
        mu = self.mean
        dev = self.means - mu
        within = np.einsum("k,kij->ij", self.weights, self.covariances)
        between = np.einsum("k,ki,kj->ij", self.weights, dev, dev)
        return within + between

    @property
    def law(self) -> GaussianLaw:
        if self.variant != "gaussian":
            raise ValueError("only a gaussian target has a single Gaussian law")
        return GaussianLaw(self.means[0], self.covariances[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covariances)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
            "normalized": self.normalized,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TargetSpec":
        variant = data["variant"]
        if variant == "standard_normal":
            return cls.standard_normal(int(data["dim"]))
        if variant == "gaussian" and "mean" in data:
            return cls.gaussian(data["mean"], data["cov"], bool(data.get("normalized", False)))
        weights = data.get("weights", [1.0])
        return cls(variant, data["means"], data["covariances"], weights, bool(data.get("normalized", False)))


def ou_marginal(target, t: float):
    """Law of x_t when x_0 follows ``target`` under dx = -x/2 dt + dW.

    Single Gaussians (``TargetSpec`` or ``GaussianLaw``) map to a ``GaussianLaw``;
    mixtures map to a mixture ``TargetSpec`` with unchanged weights.
    """
    if t < 0:
        raise DomainError("forward time must be nonnegative")
    decay = np.exp(-t)
    keep = -np.expm1(-t)
    if isinstance(target, GaussianLaw):
        d = target.dim
        return GaussianLaw(np.sqrt(decay) * target.mean, decay * target.cov + keep * np.eye(d))
    d = target.dim
    means = np.sqrt(decay) * target.means
    covs = decay * target.covariances + keep * np.eye(d)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    if target.variant == "gaussian":
        return GaussianLaw(means[0], covs[0])
    return TargetSpec("mixture", means, covs, target.weights)


class ScoreOracle:
    """Exact score of the OU marginal p_t of a target, forward time t in [0, horizon].

    Each component covariance is diagonalised once; at time t the component
    covariance shares the eigenvectors and has eigenvalues
    ``exp(-t) * lam + 1 - exp(-t)``, so no per-time factorisation is needed.
    """

    def __init__(self, target: TargetSpec, horizon: float, box_radius: float | None = None,
                 n_probe: int = 4096, probe_seed: int = 0):
        if horizon < 0:
            raise ValueError("horizon must be nonnegative")
        self.target = target
        self.horizon = float(horizon)
        self.dim = target.dim
        lam, q = np.linalg.eigh(target.covariances)
        self._lam = lam
        self._q = q
        self._diagonal = all(np.allclose(c, np.diag(np.diag(c)), atol=0.0) for c in target.covariances)
        if self._diagonal:
            self._lam = np.stack([np.diag(c) for c in target.covariances])
            self._q = np.broadcast_to(np.eye(self.dim), q.shape).copy()
        self._mu_rot = np.einsum("kd,kde->ke", target.means, self._q)
        self._log_w = np.log(np.where(target.weights > 0, target.weights, np.finfo(float).tiny))
        if box_radius is None:
            box_radius = 4.0 + float(np.max(np.abs(target.means)))
        self.box_radius = float(box_radius)
        self.lipschitz_bound, self.magnitude_bound, self.bound_method = self._bounds(n_probe, probe_seed)

    # -- bounds ---------------------------------------------------------
    def _component_lipschitz(self):
        var_end = np.exp(-self.horizon) * self._lam + -np.expm1(-self.horizon)
        return np.maximum(1.0 / self._lam.min(axis=1), 1.0 / var_end.min(axis=1))

    def _bounds(self, n_probe, probe_seed):
        comp_l = self._component_lipschitz()
        radius = self.box_radius * np.sqrt(self.dim)
        mean_norm = np.linalg.norm(self.target.means, axis=1)
        magnitude = float(np.max(comp_l * (radius + mean_norm)))
        if self.target.n_components == 1:
            return float(comp_l[0]), magnitude, "closed_form"
        rng = np.random.default_rng(probe_seed)
        ts = rng.uniform(0.0, self.horizon, size=n_probe)
        ts[: min(8, n_probe)] = np.linspace(0.0, self.horizon, min(8, n_probe))
        xs = rng.uniform(-self.box_radius, self.box_radius, size=(n_probe, self.dim))
        centers = self.target.means[rng.integers(self.target.n_components, size=n_probe // 2)]
        xs[: n_probe // 2] = centers + 0.5 * rng.standard_normal(centers.shape)
        sampled = 0.0
        for a in range(0, n_probe, 256):
            jac = self.jacobian(ts[a:a + 256], xs[a:a + 256])
            sampled = max(sampled, float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2)))))
        return 1.25 * sampled, magnitude, f"sampled_jacobian(n={n_probe}, box=+-{self.box_radius:g}, safety=1.25)"

    # -- core evaluation ------------------------------------------------
    def _check_time(self, t):
        if np.any(t < -_TIME_SLACK) or np.any(t > self.horizon + _TIME_SLACK):
            raise DomainError(f"forward time outside [0, {self.horizon}]")

    def _components(self, t, x, need_logp=True):
        """Rotated residuals, inverse variances and (optionally) log-densities per component."""
        t = np.asarray(t, dtype=float)
        self._check_time(t)
        decay = np.exp(-t)[..., None, None]
        var = decay * self._lam + -np.expm1(-t)[..., None, None]
        mu = np.sqrt(decay) * self._mu_rot
        x = np.asarray(x, dtype=float)
        if self._diagonal:
            z = x[..., None, :] - mu
        else:
            z = np.einsum("...d,kde->...ke", x, self._q) - mu
        prec = 1.0 / var
        if not need_logp:
            return z, prec, None
        logp = -0.5 * (np.einsum("...kd,...kd,...kd->...k", z, z, prec)
                       + np.sum(np.log(2 * np.pi * var), axis=-1)) + self._log_w
        return z, prec, logp

    def _unrotate(self, w):
        if self._diagonal:
            return w
        return np.einsum("...ke,kde->...kd", w, self._q)

    def score(self, t, x):
        """Score at forward time t.  ``t`` is a scalar or has shape (P,) with x of shape (..., P, d)."""
        single = self.target.n_components == 1
        z, prec, logp = self._components(t, x, need_logp=not single)
        if single:
            return self._unrotate(-z * prec)[..., 0, :]
        comp = self._unrotate(-z * prec)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        return np.einsum("...k,...kd->...d", resp, comp)

    def log_density(self, t, x):
        _, _, logp = self._components(t, x)
        return logsumexp(logp, axis=-1)

    def jacobian(self, t, x) -> np.ndarray:
        """Jacobian of the score; ``t`` scalar with x (d,), or t (P,) with x (P, d)."""
        z, prec, logp = self._components(t, x)
        comp = self._unrotate(-z * prec)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        hess = -np.einsum("kde,...ke,kfe->...kdf", self._q, prec, self._q)
        mean_s = np.einsum("...k,...kd->...d", resp, comp)
        second = np.einsum("...k,...kd,...kf->...df", resp, comp, comp)
        return (np.einsum("...k,...kdf->...df", resp, hess) + second
                - mean_s[..., :, None] * mean_s[..., None, :])

    def score_shift(self, t) -> np.ndarray:
        return np.zeros(np.shape(t) + (self.dim,))

    def backward_score(self, t, x):
        t = np.asarray(t, dtype=float)
        if np.any(t < -_TIME_SLACK) or np.any(t > self.horizon + _TIME_SLACK):
            raise DomainError(f"backward time outside [0, {self.horizon}]")
        return self.score(np.clip(self.horizon - t, 0.0, self.horizon), x)

    def gaussian_params(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(mean, precision) of p_t for a single-Gaussian target."""
        if self.target.n_components != 1:
            raise ValueError("affine score parameters exist only for gaussian targets")
        law = ou_marginal(self.target.law, float(t))
        return law.mean, np.linalg.inv(law.cov)

    def metadata(self) -> dict:
        return {
            "lipschitz_bound": self.lipschitz_bound,
            "magnitude_bound": self.magnitude_bound,
            "bound_method": self.bound_method,
            "box_radius": self.box_radius,
            "horizon": self.horizon,
        }


@dataclass(eq=False)
class PerturbedOracle:
    """Base oracle plus a bounded, position-independent error direction per time.

    ``linf_budget`` adds a vector of norm ``amplitude`` at every time;
    ``l2_budget`` spreads a budget ``amplitude**2`` over the horizon, giving a
    per-time norm ``amplitude / sqrt(horizon)``.
    """

    base: ScoreOracle
    mode: str = "linf_budget"
    amplitude: float = 0.0
    seed: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.mode not in ("linf_budget", "l2_budget"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        self._direction = lru_cache(maxsize=1 << 16)(self._direction_uncached)

    @property
    def dim(self):
        return self.base.dim

    @property
    def horizon(self):
        return self.base.horizon

    @property
    def target(self):
        return self.base.target

    @property
    def norm(self) -> float:
        if self.mode == "linf_budget" or self.base.horizon == 0:
            return float(self.amplitude)
        return float(self.amplitude) / np.sqrt(self.base.horizon)

    @property
    def lipschitz_bound(self):
        return self.base.lipschitz_bound

    @property
    def magnitude_bound(self):
        return self.base.magnitude_bound + self.norm

    def _direction_uncached(self, t: float) -> np.ndarray:
        return uniform_direction(self.seed, t, self.dim)

    def score_shift(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.norm == 0.0:
            return np.zeros(t.shape + (self.dim,))
        flat = t.reshape(-1)
        with self._lock:
            dirs = np.stack([self._direction(float(s)) for s in flat])
        return self.norm * dirs.reshape(t.shape + (self.dim,))

    def score(self, t, x):
        return self.base.score(t, x) + self.score_shift(t)

    def backward_score(self, t, x):
        t = np.asarray(t, dtype=float)
        if np.any(t < -_TIME_SLACK) or np.any(t > self.horizon + _TIME_SLACK):
            raise DomainError(f"backward time outside [0, {self.horizon}]")
        ft = np.clip(self.horizon - t, 0.0, self.horizon)
        return self.base.score(ft, x) + self.score_shift(ft)

    def gaussian_params(self, t):
        return self.base.gaussian_params(t)

    def metadata(self) -> dict:
        meta = self.base.metadata()
        meta.update(perturbation_mode=self.mode, amplitude=self.amplitude, per_time_norm=self.norm,
                    magnitude_bound=self.magnitude_bound)
        return meta
