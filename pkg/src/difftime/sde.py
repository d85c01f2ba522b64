"""Affine forward SDEs: drift/diffusion coefficients and Gaussian transition kernels.

Three families are supported:

* ``VP``     variance preserving, linear ``beta(t) = beta0 + (beta1 - beta0) t``
* ``VE``     variance exploding, ``sigma(t) = sigma_min (sigma_max / sigma_min)^t``
* ``VE_TOY`` the 1D toy process ``dx = sigma_base^t dw``

All formulas are closed form and vectorised over ``t``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

if TYPE_CHECKING:
    from difftime.mixture import GaussianMixture


class Family(str, enum.Enum):
    VE = "VE"
    VP = "VP"
    VE_TOY = "VE_TOY"


DEFAULT_PARAMS = {
    Family.VP: {"beta0": 0.1, "beta1": 20.0},
    Family.VE: {"sigma_min": 0.01, "sigma_max": 50.0},
    Family.VE_TOY: {"sigma_base": 10.0},
}


@dataclass(frozen=True)
class DiffusionSpec:
    family: Family
    params: dict = field(default_factory=dict)
    dim: int = 1

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        defaults = DEFAULT_PARAMS[family]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown parameters for {family.value}: {sorted(unknown)}")
        params = {k: float(self.params.get(k, v)) for k, v in defaults.items()}
        object.__setattr__(self, "params", params)
        if int(self.dim) < 1:
            raise ValueError("dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))

        if family is Family.VP and not 0 < params["beta0"] < params["beta1"]:
            raise ValueError("VP requires 0 < beta0 < beta1")
        if family is Family.VE and not 0 < params["sigma_min"] < params["sigma_max"]:
            raise ValueError("VE requires 0 < sigma_min < sigma_max")
        if family is Family.VE_TOY and not params["sigma_base"] > 1:
            raise ValueError("VE_TOY requires sigma_base > 1")

    @classmethod
    def vp(cls, beta0: float = 0.1, beta1: float = 20.0, dim: int = 1) -> "DiffusionSpec":
        return cls(Family.VP, {"beta0": beta0, "beta1": beta1}, dim)

    @classmethod
    def ve(cls, sigma_min: float = 0.01, sigma_max: float = 50.0, dim: int = 1) -> "DiffusionSpec":
        return cls(Family.VE, {"sigma_min": sigma_min, "sigma_max": sigma_max}, dim)

    @classmethod
    def ve_toy(cls, sigma_base: float = 10.0, dim: int = 1) -> "DiffusionSpec":
        return cls(Family.VE_TOY, {"sigma_base": sigma_base}, dim)

    def to_dict(self) -> dict:
        return {"family": self.family.value, "params": dict(self.params), "dim": self.dim}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSpec":
        return cls(Family(d["family"]), dict(d.get("params", {})), int(d.get("dim", 1)))


class TransitionKernel(NamedTuple):
    """``p(x_t | x_0) = N(mean_scale * x_0, var * I)``."""

    mean_scale: np.ndarray | float
    var: np.ndarray | float


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("time must be finite and non-negative")
    return t


def _out(a):
    return float(a) if np.ndim(a) == 0 else a


def integrated_beta(spec: DiffusionSpec, t) -> np.ndarray:
    """``int_0^t beta`` for the VP schedule."""
    b0, b1 = spec.params["beta0"], spec.params["beta1"]
    t = np.asarray(t, dtype=np.float64)
    return b0 * t + 0.5 * (b1 - b0) * t**2


def sigma_squared(spec: DiffusionSpec, t) -> np.ndarray:
    """``sigma^2(t)`` of the VE family."""
    smin, smax = spec.params["sigma_min"], spec.params["sigma_max"]
    return smin**2 * (smax / smin) ** (2.0 * np.asarray(t, dtype=np.float64))


def drift_diffusion(spec: DiffusionSpec, t):
    """Return ``(alpha(t), g(t))`` where the drift is ``f(x, t) = alpha(t) x``."""
    t = _check_time(t)
    p = spec.params
    if spec.family is Family.VP:
        beta = p["beta0"] + (p["beta1"] - p["beta0"]) * t
        alpha, g = -0.5 * beta, np.sqrt(beta)
    elif spec.family is Family.VE:
        rate = 2.0 * np.log(p["sigma_max"] / p["sigma_min"])
        alpha, g = np.zeros_like(t), np.sqrt(sigma_squared(spec, t) * rate)
    else:
        alpha, g = np.zeros_like(t), p["sigma_base"] ** t
    return _out(alpha), _out(g)


def transition(spec: DiffusionSpec, t) -> TransitionKernel:
    t = _check_time(t)
    if spec.family is Family.VP:
        b = integrated_beta(spec, t)
        mean_scale, var = np.exp(-0.5 * b), -np.expm1(-b)
    elif spec.family is Family.VE:
        smin, smax = spec.params["sigma_min"], spec.params["sigma_max"]
        mean_scale = np.ones_like(t)
        var = smin**2 * np.expm1(2.0 * t * np.log(smax / smin))
    else:
        log_s = np.log(spec.params["sigma_base"])
        mean_scale = np.ones_like(t)
        var = np.expm1(2.0 * t * log_s) / (2.0 * log_s)
    return TransitionKernel(_out(mean_scale), _out(var))


def pnoise(spec: DiffusionSpec, T: float) -> "GaussianMixture":
    """Reference noise distribution used to start the reverse process at time ``T``."""
    from difftime.mixture import GaussianMixture

    if not T > 0:
        raise ValueError("T must be positive")
    var = 1.0 if spec.family is Family.VP else float(transition(spec, T).var)
    return GaussianMixture.gaussian(np.zeros(spec.dim), var)
