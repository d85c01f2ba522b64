"""Auxiliary bridge distributions fitted to samples of ``p(x, T)``.

The bridge is a finite isotropic Gaussian mixture fitted by EM, with the
component count chosen by BIC. It has exact log-density and trivial sampling,
so it can replace ``p_noise`` as the starting point of the reverse process.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from difftime import rng as rngs
from difftime.elbo import Estimate, _kl_replicates, _log_ratio_terms, mean_se
from difftime.mixture import LOG_2PI, GaussianMixture, diffuse
from difftime.sde import DiffusionSpec, pnoise, transition
from difftime.simulator import PathBatch, reverse_sample

VAR_FLOOR = 1e-6


@dataclass
class AuxFitResult:
    model: GaussianMixture
    n_components: int
    bic: float
    loglik_trace: np.ndarray
    fit_samples: int
    iterations: int = 0
    restarts: int = 1
    seed: int = 0
    events: list = field(default_factory=list)
    bic_by_k: dict = field(default_factory=dict)
    n_failed: int = 0

    def metadata(self) -> dict:
        return {
            "k": self.n_components,
            "bic": self.bic,
            "iterations": self.iterations,
            "restarts": self.restarts,
            "seed": self.seed,
            "fit_samples": self.fit_samples,
            "n_failed": self.n_failed,
        }

    def to_dict(self) -> dict:
        return {"mixture": self.model.to_dict(), "fit": self.metadata()}


def n_free_params(k: int, dim: int) -> int:
    """Free parameters of a k-component isotropic mixture: means, one variance each, weights."""
    return k * (dim + 2) - 1


def bic(total_loglik: float, k: int, dim: int, n: int) -> float:
    return -2.0 * total_loglik + n_free_params(k, dim) * np.log(n)


def draw_fit_set(spec: DiffusionSpec, data, T: float, n: int, seed: int = 0) -> np.ndarray:
    """Exact draws from ``p(x, T)``: data points pushed through the transition kernel.

    ``data`` is either an analytic ``GaussianMixture`` or an ``(N, dim)`` array
    standing in for ``p_data`` (resampled with replacement).
    """
    if n < 1 or not T > 0:
        raise ValueError("need n >= 1 and T > 0")
    if isinstance(data, GaussianMixture):
        x0 = data.draw(n, seed, "aux/x0")
    else:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        idx = np.minimum((rngs.uniforms(seed, "aux/index", 0, n) * len(data)).astype(int), len(data) - 1)
        x0 = data[idx]
    m, s = transition(spec, T)
    return m * x0 + np.sqrt(s) * rngs.normals(seed, "aux/eps", 0, n, x0.shape[1])


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


# Arrays below are laid out (k, n): reductions over components then run
# across contiguous rows, which is much faster than axis-1 reductions on
# narrow (n, k) arrays.


def _sq_dist(x, x2, mu):
    return np.maximum(x2[None, :] - 2.0 * (mu @ x.T) + (mu**2).sum(1)[:, None], 0.0)


def _log_components(x, x2, w, mu, v):
    d = x.shape[1]
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    c = logw - 0.5 * d * (LOG_2PI + np.log(v))
    return c[:, None] - 0.5 * _sq_dist(x, x2, mu) / v[:, None]


def _logsumexp_cols(a):
    m = a.max(axis=0)
    return m + np.log(np.exp(a - m).sum(axis=0))


def _em_once(x, k, iters, tol, rng):
    n, d = x.shape
    mu = _kmeanspp(x, k, rng)
    v = np.full(k, max(x.var(0).mean(), VAR_FLOOR))
    w = np.full(k, 1.0 / k)
    x2 = (x**2).sum(1)
    trace, events = [], []
    for it in range(iters):
        lc = _log_components(x, x2, w, mu, v)
        ll = _logsumexp_cols(lc)
        trace.append(ll.mean())
        if it and trace[-1] - trace[-2] < tol:
            break
        r = np.exp(lc - ll)
        nk = r.sum(1)
        empty = nk < 1e-8 * n
        if np.any(empty):
            # reseed from the worst-explained samples
            worst = np.argsort(ll)[: int(empty.sum())]
            for j, i in zip(np.flatnonzero(empty), worst):
                r[j, :] = 0.0
                r[:, i] = 0.0
                r[j, i] = 1.0
                events.append({"iteration": it, "component": int(j), "sample": int(i)})
            nk = r.sum(1)
            trace.clear()  # monotonicity restarts after a reseed
        w = nk / n
        mu = (r @ x) / nk[:, None]
        v = np.maximum((r * _sq_dist(x, x2, mu)).sum(1) / (d * nk), VAR_FLOOR)
    else:
        trace.append(_logsumexp_cols(_log_components(x, x2, w, mu, v)).mean())
    w = w / w.sum()
    return w, mu, v, np.array(trace), len(trace), events


def fit_em(samples, k: int, iters: int = 300, seed: int = 0, restarts: int = 3, tol: float = 1e-8) -> AuxFitResult:
    """EM for a k-component isotropic mixture; best of ``restarts`` k-means++ starts.

    ``loglik_trace`` holds the mean per-sample log-likelihood at each E-step.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    if k < 1 or n < 10 * k:
        raise ValueError("need k >= 1 and at least 10 samples per component")
    best = None
    for rs in range(restarts):
        w, mu, v, trace, its, events = _em_once(x, k, iters, tol, rngs.stream(seed, "em", k, rs))
        if best is None or trace[-1] > best[3][-1]:
            best = (w, mu, v, trace, its, events)
    w, mu, v, trace, its, events = best
    total = trace[-1] * n
    return AuxFitResult(
        model=GaussianMixture(w, mu, v),
        n_components=k,
        bic=float(bic(total, k, d, n)),
        loglik_trace=trace,
        fit_samples=n,
        iterations=its,
        restarts=restarts,
        seed=seed,
        events=events,
    )


def select_bic(samples, k_range=range(1, 9), iters: int = 300, seed: int = 0, restarts: int = 3) -> AuxFitResult:
    """Fit every k in ``k_range`` and keep the lowest BIC (ties go to the smaller k)."""
    ks = sorted(k_range)
    if not ks:
        raise ValueError("k_range is empty")
    best, scores = None, {}
    n = len(np.atleast_2d(samples))
    for k in ks:
        if n < 10 * k:
            break
        fit = fit_em(samples, k, iters, seed, restarts)
        scores[k] = fit.bic
        if best is None or fit.bic < best.bic:
            best = fit
    best.bic_by_k = scores
    return best


def fit_aux(spec, data, T, n_fit=10000, k_range=range(1, 9), iters=300, seed=0, restarts=3) -> AuxFitResult:
    """Concurrent bridge fit: BIC-selected mixture on forward-SDE samples at time T."""
    return select_bic(draw_fit_set(spec, data, T, n_fit, seed), k_range, iters, seed, restarts)


def bridged_reverse_sample(spec, score, aux: GaussianMixture, T, steps, n, seed=0, t_min=1e-5) -> PathBatch:
    """Reverse diffusion started from the fitted bridge instead of ``p_noise``."""
    return reverse_sample(spec, score, aux, T, steps, n, seed, t_min)


def fit_kl_se(k: int, dim: int, n: int) -> float:
    """Asymptotic spread of ``KL(p || fitted)`` due to fitting on ``n`` samples.

    For a well-specified MLE, ``2 n KL`` is approximately chi-squared with one
    degree of freedom per free parameter.
    """
    return float(np.sqrt(2.0 * n_free_params(k, dim)) / (2.0 * n))


@dataclass(frozen=True)
class Prop4Result:
    kl_aux: Estimate
    kl_noise: Estimate
    improvement: Estimate
    combined_se: float
    holds: bool
    fit: AuxFitResult


def prop4_check(spec, gm, T, n_fit=10000, n_mc=8192, k_range=range(1, 9), iters=300, seed=0) -> Prop4Result:
    """Compare ``KL(p_T || bridge)`` with ``KL(p_T || p_noise)`` on shared draws of ``p_T``.

    ``k_range`` must contain 1, so the searched family spans ``p_noise``. The
    combined SE joins both Monte Carlo errors with the finite-sample fitting
    spread of the bridge, since the inequality concerns the population optimum.
    """
    if 1 not in k_range:
        raise ValueError("k_range must include k=1")
    fit = fit_aux(spec, gm, T, n_fit, k_range, iters, seed)
    pT = diffuse(gm, spec, T)
    x = pT.draw(n_mc, seed, "prop4/x")
    a = _kl_replicates(*_log_ratio_terms(pT, fit.model, x))
    b = _kl_replicates(*_log_ratio_terms(pT, pnoise(spec, T), x))
    kl_aux, kl_noise = mean_se(a), mean_se(b)
    se = float(np.sqrt(kl_aux.se**2 + kl_noise.se**2 + fit_kl_se(fit.n_components, gm.dim, n_fit) ** 2))
    holds = kl_aux.value <= kl_noise.value + 2 * se
    return Prop4Result(kl_aux, kl_noise, mean_se(b - a), se, bool(holds), fit)
