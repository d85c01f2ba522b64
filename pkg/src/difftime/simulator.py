"""Forward sampling, Euler-Maruyama reverse diffusion and the probability-flow ODE."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from difftime import rng as rngs
from difftime.mixture import GaussianMixture
from difftime.sde import DiffusionSpec, drift_diffusion, transition

T_MIN = 1e-5


class SimulationError(RuntimeError):
    pass


@dataclass
class PathBatch:
    states: np.ndarray
    nfe: int
    times: np.ndarray

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(self.states.shape[1])])
            for row in self.states:
                w.writerow([repr(float(v)) for v in row])


def forward_sample(spec: DiffusionSpec, gm: GaussianMixture, T: float, n: int, seed: int = 0) -> PathBatch:
    """Exact draws of ``x_T`` through the Gaussian transition kernel."""
    if T < 0:
        raise ValueError("T must be non-negative")
    x0 = gm.draw(n, seed, "forward/x0")
    if T == 0:
        return PathBatch(x0, 0, np.array([0.0]))
    m, s = transition(spec, T)
    eps = rngs.normals(seed, "forward/eps", 0, n, gm.dim)
    return PathBatch(m * x0 + np.sqrt(s) * eps, 0, np.array([0.0, T]))


def reverse_grid(T: float, steps: int, t_min: float = T_MIN) -> np.ndarray:
    return np.linspace(T, t_min, steps + 1)


def reverse_sample(
    spec: DiffusionSpec,
    score,
    init: GaussianMixture,
    T: float,
    steps: int,
    n: int,
    seed: int = 0,
    t_min: float = T_MIN,
) -> PathBatch:
    """Euler-Maruyama for the reverse SDE from ``init`` at time ``T`` down to ``t_min``.

    The score is evaluated once per step, at the upper end of each step, so it
    is never queried below ``t_min + (T - t_min) / steps``.
    """
    if steps < 1 or not T > t_min:
        raise ValueError("need steps >= 1 and T > t_min")
    grid = reverse_grid(T, steps, t_min)
    x = init.draw(n, seed, "reverse/init")
    tt = np.empty(n)
    for k in range(steps):
        t, h = grid[k], grid[k] - grid[k + 1]
        alpha, g = drift_diffusion(spec, t)
        tt.fill(t)
        drift = -alpha * x + g**2 * score(x, tt)
        z = rngs.normals(seed, "reverse/noise", k, n, x.shape[1])
        x = x + drift * h + g * np.sqrt(h) * z
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at reverse step {k} (t={t:.6g})")
    return PathBatch(x, steps, grid)


def flow_field(spec: DiffusionSpec, score, x: np.ndarray, t: float) -> np.ndarray:
    """Probability-flow velocity ``f(x, t) - g(t)^2 s(x, t) / 2``."""
    alpha, g = drift_diffusion(spec, t)
    return alpha * x - 0.5 * g**2 * score(x, np.full(x.shape[0], t))


def ode_solve(spec: DiffusionSpec, score, x_start: np.ndarray, t_from: float, t_to: float, steps: int):
    """Fixed-step RK4 on the probability-flow ODE, in either time direction.

    Returns ``(states, nfe)`` with ``nfe = 4 * steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x_start, dtype=np.float64, ndmin=2)
    h = (t_to - t_from) / steps
    for k in range(steps):
        t = t_from + k * h
        k1 = flow_field(spec, score, x, t)
        k2 = flow_field(spec, score, x + 0.5 * h * k1, t + 0.5 * h)
        k3 = flow_field(spec, score, x + 0.5 * h * k2, t + 0.5 * h)
        k4 = flow_field(spec, score, x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at ODE step {k} (t={t:.6g})")
    return x, 4 * steps
