"""Sample diagnostics and Picard residual analytics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MomentSummary:
    """Unbiased sample moments with standard errors.

    ``mean_se`` is the sample standard deviation over sqrt(n).  ``cov_se`` is
    the standard deviation of the centred products (x_i - m_i)(x_j - m_j) over
    sqrt(n).
    """

    n: int
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "mean_se": self.mean_se.tolist(), "cov_se": self.cov_se.tolist()}

    def z_scores(self, mean, cov) -> tuple[np.ndarray, np.ndarray]:
        """Deviation from reference moments in standard errors (0 where the error is 0)."""
        dm = self.mean - np.asarray(mean)
        dc = self.cov - np.asarray(cov)
        with np.errstate(divide="ignore", invalid="ignore"):
            zm = np.where(self.mean_se > 0, dm / self.mean_se, np.where(dm == 0, 0.0, np.inf))
            zc = np.where(self.cov_se > 0, dc / self.cov_se, np.where(dc == 0, 0.0, np.inf))
        return zm, zc


def moment_summary(samples) -> MomentSummary:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    products = centred[:, :, None] * centred[:, None, :]
    return MomentSummary(n, mean, 0.5 * (cov + cov.T), x.std(axis=0, ddof=1) / np.sqrt(n),
                         products.std(axis=0, ddof=1) / np.sqrt(n))


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two empirical laws on the line (quantile coupling)."""
    a, b = np.sort(a), np.sort(b)
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    cuts = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mid = 0.5 * (cuts[1:] + cuts[:-1])
    ia = np.minimum((mid * a.size).astype(int), a.size - 1)
    ib = np.minimum((mid * b.size).astype(int), b.size - 1)
    return float(np.sqrt(np.sum(np.diff(cuts) * (a[ia] - b[ib]) ** 2)))


def sliced_w2(samples_a, samples_b, n_projections: int = 64, seed: int = 0) -> float:
    """Average over random unit directions of the 1-D W2 between projections."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    dirs = np.random.default_rng(seed).standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([_w2_1d(pa[:, i], pb[:, i]) for i in range(n_projections)]))


def mixture_moments(target) -> tuple[np.ndarray, np.ndarray]:
    return target.mean, target.covariance


@dataclass
class ResidualTrace:
    """Sup-squared Picard residuals, one list per block."""

    blocks: list = field(default_factory=list)

    @classmethod
    def from_report(cls, report, per_path: bool = False) -> "ResidualTrace":
        hist = report.max_path_residual_history if per_path else report.residual_history
        return cls([list(map(float, h)) for h in hist])

    def rows(self):
        for b, hist in enumerate(self.blocks):
            for k, r in enumerate(hist):
                yield b, k, r


def picard_rate(trace) -> list[float]:
    """Per-block least-squares slope of log residual against iteration over [2, K-1].

    Non-positive residuals are skipped; a block with nothing left to fit
    (one-shot convergence) reports ``-inf``.
    """
    blocks = trace.blocks if isinstance(trace, ResidualTrace) else [trace]
    rates = []
    for hist in blocks:
        r = np.asarray(hist, dtype=float)
        k = np.arange(r.size)
        keep = (k >= 2) & (r > 0)
        if keep.sum() < 2:
            rates.append(float("-inf"))
            continue
        slope = np.polyfit(k[keep], np.log(r[keep]), 1)[0]
        rates.append(float(slope))
    return rates


def fitted_exponent(xs, ys) -> float:
    """Slope of log y against log x."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
