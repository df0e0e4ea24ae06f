"""Analytic priors with exact diffused scores, plus a small learned one.

Under the VP forward process, a Gaussian (or Gaussian-mixture) prior stays
Gaussian (mixture) at every timestep: component means scale by sqrt(abar_t)
and diagonal covariances become abar_t*var + (1-abar_t).  The score of that
diffused density is therefore available in closed form, which is what makes
every sampler in this package verifiable against finite differences and
conjugate algebra.

Complex quantities (channel taps) live in the 2L-real interleaved space;
their circularly-symmetric Gaussian prior splits each tap's variance evenly
across the real/imaginary parts, while score formulas keep the full per-tap
variance so that Tweedie updates work verbatim on the packed representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ParameterError, ShapeError, TrainingDivergence
from .schedule import NoiseSchedule


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


@dataclass(frozen=True)
class GaussianPrior:
    """N(mean, diag(variance)) in R^m."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ShapeError("mean and variance must share shape")
        if np.any(self.variance <= 0):
            raise ParameterError("variance entries must be strictly positive")

    kind = "gaussian"

    @property
    def dim(self) -> int:
        return self.mean.size

    def diffused(self, schedule: NoiseSchedule, t: int):
        ab = schedule.abar_at(t)
        return np.sqrt(ab) * self.mean, ab * self.variance + (1.0 - ab)

    def score(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        self._check_dim(x)
        mu, var = self.diffused(schedule, t)
        out = -(x - mu[None, :]) / var[None, :]
        return out[0] if single else out

    def score_hvp(self, schedule, x_t, t, v):
        x, single = _as_batch(v)
        _, var = self.diffused(schedule, t)
        out = -x / var[None, :]
        return out[0] if single else out

    def logpdf_diffused(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        mu, var = self.diffused(schedule, t)
        d = x - mu[None, :]
        out = -0.5 * np.sum(d * d / var + np.log(2 * np.pi * var), axis=-1)
        return out[0] if single else out

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean[None, :] + np.sqrt(self.variance)[None, :] * rng.standard_normal(
            (count, self.dim)
        )

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.copy(), np.diag(self.variance)

    def _check_dim(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"state dim {x.shape[-1]} != prior dim {self.dim}")


@dataclass(frozen=True)
class GmmPrior:
    """Mixture of diagonal Gaussians: weights (K,), means (K, m), variances (K, m)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    kind = "gmm"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if mu.ndim != 2 or var.shape != mu.shape or w.shape != (mu.shape[0],):
            raise ShapeError("need weights (K,), means (K,m), variances (K,m)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("weights must be a probability vector")
        if np.any(var <= 0):
            raise ParameterError("variance entries must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def diffused(self, schedule, t):
        ab = schedule.abar_at(t)
        return np.sqrt(ab) * self.means, ab * self.variances + (1.0 - ab)

    def score(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        self._check_dim(x)
        mu, var = self.diffused(schedule, t)
        out = kernels.gmm_score(np.ascontiguousarray(x), mu, var, np.log(self.weights))
        return out[0] if single else out

    def score_hvp(self, schedule, x_t, t, v):
        x, single = _as_batch(x_t)
        vv, _ = _as_batch(v)
        mu, var = self.diffused(schedule, t)
        out = kernels.gmm_score_hvp(
            np.ascontiguousarray(x), mu, var, np.log(self.weights), np.ascontiguousarray(vv)
        )
        return out[0] if single else out

    def logpdf_diffused(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        mu, var = self.diffused(schedule, t)
        out = kernels.gmm_logpdf(np.ascontiguousarray(x), mu, var, np.log(self.weights))
        return out[0] if single else out

    def responsibilities(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        mu, var = self.diffused(schedule, t)
        d = x[:, None, :] - mu[None, :, :]
        lj = -0.5 * np.sum(d * d / var[None] + np.log(2 * np.pi * var)[None], axis=2)
        lj += np.log(self.weights)[None, :]
        lj -= lj.max(axis=1, keepdims=True)
        r = np.exp(lj)
        r /= r.sum(axis=1, keepdims=True)
        return r[0] if single else r

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        eps = rng.standard_normal((count, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.weights @ self.means
        second = np.zeros((self.dim, self.dim))
        for w, mu, var in zip(self.weights, self.means, self.variances):
            second += w * (np.diag(var) + np.outer(mu, mu))
        return mean, second - np.outer(mean, mean)

    def _check_dim(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"state dim {x.shape[-1]} != prior dim {self.dim}")


def score(prior, schedule: NoiseSchedule, x_t, t: int):
    """Score of the diffused prior at (x_t, t); exact for analytic kinds."""
    return prior.score(schedule, x_t, t)


# ---------------------------------------------------------------------------
# complex Gaussian channel prior


def channel_score(sigma_h2, schedule: NoiseSchedule, h_t, t: int, paper_form: bool = False):
    """Score of the diffused complex-Gaussian tap prior, per tap:

        -h_t / (abar_t * sigma_h^2 + (1 - abar_t))

    With `paper_form` the time-independent variant -h_t / sigma_h^2 is
    returned instead.  Accepts complex (L,)/(B, L) arrays and returns the
    same shape.
    """
    sigma_h2 = np.asarray(sigma_h2, dtype=float)
    if np.any(sigma_h2 <= 0):
        raise ParameterError("per-tap variances must be positive")
    h = np.asarray(h_t, dtype=np.complex128)
    if paper_form:
        return -h / sigma_h2
    ab = schedule.abar_at(t)
    return -h / (ab * sigma_h2 + (1.0 - ab))


@dataclass(frozen=True)
class ChannelGaussianPrior:
    """CN(0, diag(tap_variances)) seen through the interleaved-pair lens.

    Each tap's variance splits evenly across its real/imaginary components;
    the score below uses the full complex variance, which is exactly what
    makes the standard (unit-noise) Tweedie formula reproduce the complex
    conditional mean on the packed representation.
    """

    tap_variances: np.ndarray
    paper_form: bool = False

    kind = "channel_gaussian"

    def __post_init__(self):
        v = np.asarray(self.tap_variances, dtype=float)
        if np.any(v <= 0):
            raise ParameterError("per-tap variances must be positive")
        object.__setattr__(self, "tap_variances", v)

    @property
    def dim(self) -> int:
        return 2 * self.tap_variances.size

    def _pair_var(self, schedule, t):
        if self.paper_form:
            v = self.tap_variances
        else:
            ab = schedule.abar_at(t)
            v = ab * self.tap_variances + (1.0 - ab)
        return np.repeat(v, 2)

    def score(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        out = -x / self._pair_var(schedule, t)[None, :]
        return out[0] if single else out

    def score_hvp(self, schedule, x_t, t, v):
        vv, single = _as_batch(v)
        out = -vv / self._pair_var(schedule, t)[None, :]
        return out[0] if single else out

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        std = np.repeat(np.sqrt(self.tap_variances / 2.0), 2)
        return std[None, :] * rng.standard_normal((count, self.dim))


# ---------------------------------------------------------------------------
# exact sampling and the tape-level score primitive


def prior_sample(prior, count: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws from the base (t=0) prior."""
    sampler = getattr(prior, "sample", None)
    if sampler is None:
        raise ParameterError(f"prior kind '{prior.kind}' does not support exact sampling")
    return sampler(count, rng)


def score_op(prior, schedule: NoiseSchedule, x_t, t: int):
    """Tape-aware score evaluation: the backward pass applies the prior's
    own Hessian-vector product (hand-derived for analytic kinds, a network
    vector-Jacobian product for learned ones)."""
    xv = ad.value_of(x_t)
    out = prior.score(schedule, xv, t)
    if not isinstance(x_t, ad.Var):
        return out
    tape = x_t.tape

    def vjp(g):
        return prior.score_hvp(schedule, xv, t, g)

    return tape.record(out, [(x_t, vjp)], "prior_score")


# ---------------------------------------------------------------------------
# learned score network


@dataclass
class LearnedScorePrior:
    """Small tanh MLP trained by denoising score matching.

    The network predicts the scaled noise eps_hat(x_t, abar_t); the score is
    recovered as -eps_hat / sqrt(1 - abar_t).  Time enters by concatenating
    abar_t to the input.
    """

    weights: list = field(default_factory=list)  # [(W, b), ...]
    dim: int = 0

    kind = "learned"

    def _forward(self, x, ab: float):
        feats = ad.concat([x, np.full((ad.value_of(x).shape[0], 1), ab)], axis=1)
        h = feats
        for i, (W, b) in enumerate(self.weights):
            h = ad.add_bias(ad.matmul(h, W), b)
            if i < len(self.weights) - 1:
                h = ad.tanh(h)
        return h

    def _forward_train(self, x_leaf, ab_col, weight_leaves):
        feats = ad.concat([x_leaf, ab_col], axis=1)
        h = feats
        for i, (W, b) in enumerate(weight_leaves):
            h = ad.add_bias(ad.matmul(h, W), b)
            if i < len(weight_leaves) - 1:
                h = ad.tanh(h)
        return h

    def score(self, schedule, x_t, t):
        x, single = _as_batch(x_t)
        ab = schedule.abar_at(t)
        eps_hat = self._forward(np.ascontiguousarray(x), ab)
        out = -eps_hat / np.sqrt(1.0 - ab)
        return out[0] if single else out

    def score_hvp(self, schedule, x_t, t, v):
        """Vector-Jacobian product of the score via a nested tape:
        grad_x <score(x), v> with v held constant."""
        x, single = _as_batch(x_t)
        vv, _ = _as_batch(v)
        ab = schedule.abar_at(t)
        tape = ad.Tape()
        leaf = tape.leaf(np.ascontiguousarray(x))
        eps_hat = self._forward(leaf, ab)
        inner = ad.total(ad.mul(eps_hat, -vv / np.sqrt(1.0 - ab)))
        tape.backward(inner)
        out = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        return out[0] if single else out

    def sample(self, count, rng):  # pragma: no cover - contract stub
        raise ParameterError("learned priors do not support exact sampling")


def train_score_mlp(
    prior_samples: np.ndarray,
    schedule: NoiseSchedule,
    steps: int = 4000,
    batch_size: int = 128,
    learning_rate: float = 3e-3,
    hidden: tuple = (64, 64),
    seed: int = 0,
) -> LearnedScorePrior:
    """Fit the denoising score-matching objective on a sample set.

    Per batch: draw (x0, t, eps), form x_t = sqrt(abar) x0 + sqrt(1-abar) eps
    and regress the network output onto eps (the variance-weighted form of
    matching -(x_t - sqrt(abar) x0)/(1-abar), which keeps targets bounded).
    """
    data = np.asarray(prior_samples, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ParameterError("prior_samples must be a non-empty (N, m) array")
    n, m = data.shape
    rng = np.random.default_rng(seed)

    sizes = [m + 1, *hidden, m]
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(1.0 / fan_in)
        params.append((W, np.zeros(fan_out)))

    model = LearnedScorePrior(weights=params, dim=m)
    mom1 = [np.zeros_like(p) for Wb in params for p in Wb]
    mom2 = [np.zeros_like(p) for Wb in params for p in Wb]
    b1, b2, eps_adam = 0.9, 0.999, 1e-8

    first_loss = None
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=batch_size)
        x0 = data[idx]
        ts = rng.integers(1, schedule.T + 1, size=batch_size)
        ab = schedule.abar[ts - 1][:, None]
        eps = rng.standard_normal((batch_size, m))
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

        tape = ad.Tape()
        leaves = [(tape.leaf(W), tape.leaf(b)) for W, b in model.weights]
        pred = model._forward_train(tape.leaf(x_t), tape.leaf(ab), leaves)
        loss = ad.sumsq(ad.sub(pred, eps))
        lval = float(ad.value_of(loss)) / batch_size
        if not np.isfinite(lval):
            raise TrainingDivergence(f"score-matching loss non-finite at step {step}")
        if first_loss is None:
            first_loss = lval
        tape.backward(loss)

        flat = [p for Wb in leaves for p in Wb]
        for j, leaf in enumerate(flat):
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            g = g / batch_size
            mom1[j] = b1 * mom1[j] + (1 - b1) * g
            mom2[j] = b2 * mom2[j] + (1 - b2) * g * g
            m1 = mom1[j] / (1 - b1**step)
            m2 = mom2[j] / (1 - b2**step)
            leaf.value -= learning_rate * m1 / (np.sqrt(m2) + eps_adam)

        model.weights = [(W.value, b.value) for W, b in leaves]

    model.final_loss = lval  # type: ignore[attr-defined]
    model.first_loss = first_loss  # type: ignore[attr-defined]
    return model
