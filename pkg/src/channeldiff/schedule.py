"""Variance-preserving diffusion schedule and its elementary operations.

The forward process is x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps with a
linearly increasing beta_1..beta_T, giving the closed-form marginal
x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps with abar_t = prod(1-beta_i).

Timesteps are 1-based throughout (t = 1..T); abar_0 is defined as 1, which
makes the final ancestral step deterministic and equal to the current
denoised estimate.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretised VP-diffusion coefficients for T steps (arrays 0-indexed,
    entry i belongs to timestep t = i+1)."""

    T: int
    beta: np.ndarray         # per-step variances beta_t
    alpha: np.ndarray        # 1 - beta_t
    abar: np.ndarray         # cumulative products of alpha
    sigma_tilde: np.ndarray  # ancestral posterior standard deviations

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def abar_at(self, t: int) -> float:
        return float(self.abar[t - 1])

    def abar_prev_at(self, t: int) -> float:
        """abar_{t-1}, with abar_0 defined as 1."""
        return 1.0 if t == 1 else float(self.abar[t - 2])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma_tilde[t - 1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Construct the linear schedule beta_t = beta_start + (t-1)/(T-1)*(beta_end-beta_start).

    sigma_tilde_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t) with abar_0 = 1,
    so sigma_tilde_1 = 0 and the t=1 ancestral step is noiseless.
    """
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    abar = np.cumprod(alpha)
    abar_prev = np.concatenate(([1.0], abar[:-1]))
    sigma_tilde = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, abar=abar, sigma_tilde=sigma_tilde)


def _check_t(schedule: NoiseSchedule, t: int) -> None:
    if not (1 <= t <= schedule.T):
        raise ParameterError(f"timestep {t} outside [1, {schedule.T}]")


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Forward marginal draw: sqrt(abar_t) x0 + sqrt(1-abar_t) noise."""
    _check_t(schedule, t)
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = schedule.abar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def tweedie_mean(schedule: NoiseSchedule, x_t: np.ndarray, t: int, score: np.ndarray) -> np.ndarray:
    """Posterior-mean estimate of the clean signal from the score at x_t:

        x0_hat = (x_t + (1 - abar_t) * score) / sqrt(abar_t)
    """
    _check_t(schedule, t)
    x_t = np.asarray(x_t, dtype=float)
    score = np.asarray(score, dtype=float)
    if score.shape != x_t.shape:
        raise ShapeError(f"score shape {score.shape} != x_t shape {x_t.shape}")
    ab = schedule.abar_at(t)
    if ab == 0.0:
        raise ParameterError("abar_t = 0: Tweedie estimate undefined")
    return (x_t + (1.0 - ab) * score) / np.sqrt(ab)


def ancestral_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(coef on x_t, coef on x0_hat, sigma_tilde_t) for one reverse step."""
    _check_t(schedule, t)
    ab = schedule.abar_at(t)
    ab_prev = schedule.abar_prev_at(t)
    a = schedule.alpha_at(t)
    b = schedule.beta_at(t)
    c_xt = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    return float(c_xt), float(c_x0), schedule.sigma_at(t)


def ancestral_step(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    x0_hat: np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    """One reverse transition drawn from q(x_{t-1} | x_t, x0_hat).

    At t = 1 the coefficients collapse to (0, 1) and sigma_tilde is 0, so the
    step returns x0_hat exactly; the caller is expected to pass zero noise
    there (it is multiplied away regardless).
    """
    x_t = np.asarray(x_t, dtype=float)
    x0_hat = np.asarray(x0_hat, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0_hat.shape != x_t.shape or noise.shape != x_t.shape:
        raise ShapeError("x_t, x0_hat and noise must share one shape")
    c_xt, c_x0, sig = ancestral_coefficients(schedule, t)
    return c_xt * x_t + c_x0 * x0_hat + sig * noise


def dsnr(schedule: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio of the diffusion marginal: abar_t / (1 - abar_t)."""
    _check_t(schedule, t)
    ab = schedule.abar_at(t)
    return ab / (1.0 - ab)
