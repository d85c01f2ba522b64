"""Isotropic Gaussian mixtures with exact diffused marginals and scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from difftime import rng as rngs
from difftime.sde import DiffusionSpec, transition

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """``sum_k w_k N(mu_k, v_k I)``.

    ``weights`` has shape ``(K,)``, ``means`` ``(K, dim)``, ``vars`` ``(K,)``.
    """

    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        v = np.atleast_1d(np.asarray(self.vars, dtype=np.float64))
        if not (w.shape[0] == mu.shape[0] == v.shape[0]):
            raise ValueError("weights, means and vars disagree on the number of components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(~(v > 0)):
            raise ValueError("component variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("vars", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def gaussian(cls, mean, var: float) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(np.ones(1), mean[None, :], np.array([float(var)]))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        """Per-coordinate variance of the mixture."""
        second = self.weights @ (self.means**2 + self.vars[:, None])
        return second - self.mean() ** 2

    def _component_logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        sq = ((x[:, None, :] - self.means[None]) ** 2).sum(-1)
        d = self.dim
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * d * (LOG_2PI + np.log(self.vars)) - 0.5 * sq / self.vars

    def log_density(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = logsumexp(self._component_logpdf(x), axis=1)
        out = np.maximum(out, -1e300)
        return float(out[0]) if single else out

    def responsibilities(self, x) -> np.ndarray:
        lp = self._component_logpdf(np.asarray(x, dtype=np.float64))
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def score(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        r = self.responsibilities(x2)
        s = np.einsum("nk,nkd->nd", r / self.vars, self.means[None] - x2[:, None, :])
        return s[0] if single else s

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        k = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + np.sqrt(self.vars[k])[:, None] * z

    def draw(self, n: int, seed: int, purpose: str, counter: int = 0) -> np.ndarray:
        """Keyed draw: row ``i`` depends only on ``(seed, purpose, counter, i)``."""
        u = rngs.uniforms(seed, purpose + "/component", counter, n)
        k = np.searchsorted(np.cumsum(self.weights), u, side="right")
        k = np.minimum(k, self.n_components - 1)
        z = rngs.normals(seed, purpose + "/noise", counter, n, self.dim)
        return self.means[k] + np.sqrt(self.vars[k])[:, None] * z

    def diffuse(self, spec: DiffusionSpec, t: float) -> "GaussianMixture":
        return diffuse(self, spec, t)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "vars": self.vars.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["vars"]))

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.means.shape == other.means.shape
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.vars, other.vars)
        )

    def __repr__(self):
        return f"GaussianMixture(weights={self.weights.tolist()}, means={self.means.tolist()}, vars={self.vars.tolist()})"


def toy_mixture(pi: float = 0.3) -> GaussianMixture:
    """``pi N(1, 0.1^2) + (1 - pi) N(3, 0.5^2)``."""
    return GaussianMixture(np.array([pi, 1.0 - pi]), np.array([[1.0], [3.0]]), np.array([0.1**2, 0.5**2]))


def diffuse(gm: GaussianMixture, spec: DiffusionSpec, t: float) -> GaussianMixture:
    """Exact marginal ``p(x, t)`` of the forward SDE started at ``gm``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if t == 0:
        return gm
    m, s = transition(spec, t)
    return GaussianMixture(gm.weights, m * gm.means, m**2 * gm.vars + s)


def _diffused_components(gm: GaussianMixture, spec: DiffusionSpec, t):
    m, s = transition(spec, np.asarray(t, dtype=np.float64))
    m, s = np.asarray(m), np.asarray(s)
    means = m[..., None, None] * gm.means  # (..., K, d)
    var = m[..., None] ** 2 * gm.vars + s[..., None]  # (..., K)
    return means, var


def marginal_log_density(gm: GaussianMixture, spec: DiffusionSpec, x: np.ndarray, t) -> np.ndarray:
    """``log p(x_i, t_i)`` for per-sample times (``t`` scalar or shape ``(n,)``)."""
    x = np.atleast_2d(x)
    means, var = _diffused_components(gm, spec, t)
    sq = ((x[:, None, :] - means) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(gm.weights)
    lp = logw - 0.5 * gm.dim * (LOG_2PI + np.log(var)) - 0.5 * sq / var
    return logsumexp(lp, axis=1)


def marginal_score(gm: GaussianMixture, spec: DiffusionSpec, x: np.ndarray, t) -> np.ndarray:
    """``grad log p(x_i, t_i)`` for per-sample times (``t`` scalar or shape ``(n,)``)."""
    x = np.atleast_2d(x)
    means, var = _diffused_components(gm, spec, t)
    diff = means - x[:, None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(gm.weights)
    lp = logw - 0.5 * gm.dim * np.log(var) - 0.5 * (diff**2).sum(-1) / var
    r = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return np.einsum("nk,nkd->nd", r / var, diff)


def conditional_score(spec: DiffusionSpec, t, x, x0) -> np.ndarray:
    """``grad_x log p(x, t | x0) = -(x - m x0) / s``."""
    m, s = transition(spec, t)
    if np.any(np.asarray(s) <= 0):
        raise ValueError("transition kernel is singular at t = 0")
    m, s = np.asarray(m), np.asarray(s)
    x, x0 = np.asarray(x, dtype=np.float64), np.asarray(x0, dtype=np.float64)
    if m.ndim:
        m, s = m[:, None], s[:, None]
    return -(x - m * x0) / s
