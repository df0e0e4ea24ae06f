"""Fidelity metrics and closed-form posterior oracles.

The posterior oracle covers the linear-Gaussian identity-channel case: with
an exactly linear encoder (calibrated normalisation) and complex noise of
power sigma_n^2, the observation model on interleaved reals is
y = M x + n with per-component noise variance sigma_n^2 / 2, so Gaussian and
Gaussian-mixture priors admit conjugate posteriors.  Samplers are verified
against these, never against themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .codec import Codec
from .errors import ParameterError, ShapeError
from .priors import GaussianPrior, GmmPrior


@dataclass
class TrialReport:
    """One decoded trial; the harness serialises these to CSV rows."""

    trial: int
    seed: int
    csnr_db: float
    variant: str
    steps: int
    mse: float
    psnr_db: float
    l_m_final: float
    d_h: float | None
    success: bool


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    x, x_hat = np.asarray(x, dtype=float), np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float) -> float:
    """10 log10(peak^2 / MSE); +inf sentinel for an exact reconstruction."""
    if peak <= 0:
        raise ParameterError("peak must be positive")
    e = mse(x, x_hat)
    if e == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / e)


def mse_from_psnr(psnr_db: float, peak: float) -> float:
    return peak * peak * 10.0 ** (-psnr_db / 10.0)


def channel_error(h_hat, h_star) -> float:
    """d_h = ||h_hat - h_star||^2 over the complex taps."""
    h_hat = np.asarray(h_hat, dtype=np.complex128)
    h_star = np.asarray(h_star, dtype=np.complex128)
    if h_hat.shape != h_star.shape:
        raise ShapeError(f"shape mismatch {h_hat.shape} vs {h_star.shape}")
    return float(np.sum(np.abs(h_hat - h_star) ** 2))


def success_ratio(reports) -> float:
    reports = list(reports)
    if not reports:
        raise ParameterError("no reports")
    return sum(1 for r in reports if r.success) / len(reports)


def _sym_sqrt(S: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    lam, U = np.linalg.eigh((S + S.T) / 2.0)
    lam = np.clip(lam, floor, None)
    return (U * np.sqrt(lam)) @ U.T


def frechet_gaussian(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Squared 2-Wasserstein distance between Gaussians fitted to two sets:

        ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    d = a.shape[1]
    if b.shape[1] != d:
        raise ShapeError("sample sets must share dimension")
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ParameterError(f"need at least {d + 1} samples per set to fit a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    S_a = np.cov(a, rowvar=False)
    S_b = np.cov(b, rowvar=False)
    if d == 1:
        S_a, S_b = np.atleast_2d(S_a), np.atleast_2d(S_b)
    root_a = _sym_sqrt(S_a)
    cross = _sym_sqrt(root_a @ S_b @ root_a)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(S_a + S_b - 2.0 * cross))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# conjugate posterior oracle


@dataclass
class PosteriorParams:
    """Mixture posterior (K=1 for a Gaussian prior)."""

    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, m)
    covs: np.ndarray      # (K, m, m)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros_like(self.covs[0])
        for w, mk, Sk in zip(self.weights, self.means, self.covs):
            out += w * (Sk + np.outer(mk - mu, mk - mu))
        return out


def analytic_posterior(codec: Codec, prior, noise_power: float, y: np.ndarray) -> PosteriorParams:
    """Exact posterior of the source given y = encode(x) + CN noise over the
    identity channel, for an exactly linear (calibrated) codec."""
    if codec.kind != "linear":
        raise ParameterError("the conjugate oracle needs a linear codec")
    if codec.power_norm != "calibrated":
        raise ParameterError(
            "per-frame normalisation has no constant effective matrix; "
            "build the codec with power_norm='calibrated'"
        )
    if noise_power <= 0:
        raise ParameterError("noise power must be positive")
    y = np.asarray(y, dtype=float).reshape(-1)
    M = codec.scale * codec.A
    if y.size != M.shape[0]:
        raise ShapeError(f"y has {y.size} components, operator expects {M.shape[0]}")
    s2 = noise_power / 2.0  # per real component

    if isinstance(prior, GaussianPrior):
        weights = np.array([1.0])
        comp = [(prior.mean, np.diag(prior.variance))]
    elif isinstance(prior, GmmPrior):
        weights = prior.weights.copy()
        comp = [(mu, np.diag(var)) for mu, var in zip(prior.means, prior.variances)]
    else:
        raise ParameterError("oracle supports gaussian and gmm priors only")

    means, covs, logev = [], [], []
    for mu0, S0 in comp:
        prec = np.linalg.inv(S0) + (M.T @ M) / s2
        Sp = np.linalg.inv(prec)
        mp = Sp @ (np.linalg.solve(S0, mu0) + M.T @ y / s2)
        means.append(mp)
        covs.append(Sp)
        Sy = M @ S0 @ M.T + s2 * np.eye(M.shape[0])
        logev.append(stats.multivariate_normal.logpdf(y, mean=M @ mu0, cov=Sy))
    logev = np.asarray(logev) + np.log(weights)
    logev -= logev.max()
    w = np.exp(logev)
    w /= w.sum()
    return PosteriorParams(weights=w, means=np.asarray(means), covs=np.asarray(covs))


def prior_peak(prior, quantile: float = 0.999) -> float:
    """Amplitude quantile of the pooled per-coordinate prior marginals; the
    default PSNR peak for abstract vector sources."""
    if isinstance(prior, GaussianPrior):
        weights = np.array([1.0])
        means, stds = prior.mean[None, :], np.sqrt(prior.variance)[None, :]
    elif isinstance(prior, GmmPrior):
        weights = prior.weights
        means, stds = prior.means, np.sqrt(prior.variances)
    else:
        raise ParameterError("peak calibration needs an analytic prior")
    m = means.shape[1]

    def pooled_cdf(a: float) -> float:
        z_hi = (a - means) / stds
        z_lo = (-a - means) / stds
        per_dim = weights @ (stats.norm.cdf(z_hi) - stats.norm.cdf(z_lo))
        return float(per_dim.mean())

    lo, hi = 0.0, float(np.max(np.abs(means)) + 12.0 * np.max(stds))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pooled_cdf(mid) < quantile:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
