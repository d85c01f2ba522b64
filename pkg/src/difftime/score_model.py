"""Small MLP score model ``s_theta(x, t)`` trained by denoising score matching.

Gradients are accumulated by hand (reverse mode through the dense layers),
and optimisation uses Adam on the flat parameter vector.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from difftime import rng as rngs
from difftime.mixture import GaussianMixture, marginal_score
from difftime.sde import DiffusionSpec, drift_diffusion, transition


class ScoreFunction(Protocol):
    def __call__(self, x: np.ndarray, t) -> np.ndarray: ...


class TrainingDiverged(RuntimeError):
    pass


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    sig = _sigmoid(z)
    return sig * (1.0 + z * (1.0 - sig))


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}
# max |activation'|, used for Lipschitz bounds
ACTIVATION_SLOPE = {"silu": 1.0998, "tanh": 1.0}

CHECKPOINT_MAGIC = b"DIFFTIME-SCORENET\n"


def time_features(t: np.ndarray, n_freq: int) -> np.ndarray:
    """``[t, sin(2^k pi t), cos(2^k pi t)]`` for ``k < n_freq``."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    return np.concatenate([t, np.sin(t * freqs), np.cos(t * freqs)], axis=1)


@dataclass
class ScoreNet:
    layers: list
    dim: int
    time_embed: int = 4
    activation: str = "silu"

    def __post_init__(self):
        width = self.dim + 2 * self.time_embed + 1
        for W, b in self.layers:
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ValueError("layer shapes do not chain")
            width = W.shape[1]
        if width != self.dim:
            raise ValueError("output width must equal dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(
        cls,
        dim: int = 1,
        hidden: tuple = (64, 64, 64),
        time_embed: int = 4,
        activation: str = "silu",
        seed: int = 0,
        zero_output: bool = False,
    ) -> "ScoreNet":
        rng = rngs.stream(seed, "scorenet-init")
        widths = [dim + 2 * time_embed + 1, *hidden, dim]
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_output:
                W = np.zeros((a, b))
            else:
                W = rng.standard_normal((a, b)) * np.sqrt((1.0 if last else 2.0) / a)
            layers.append((W, np.zeros(b)))
        return cls(layers, dim, time_embed, activation)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    @property
    def params_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_params(self, flat: np.ndarray) -> "ScoreNet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        layers, i = [], 0
        for W, b in self.layers:
            Wn = flat[i : i + W.size].reshape(W.shape)
            i += W.size
            bn = flat[i : i + b.size].copy()
            i += b.size
            layers.append((Wn.copy(), bn))
        return replace(self, layers=layers)

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected inputs of width {self.dim}, got {x.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return np.concatenate([x, time_features(t, self.time_embed)], axis=1)

    def __call__(self, x, t) -> np.ndarray:
        act, _ = ACTIVATIONS[self.activation]
        h = self._inputs(x, t)
        for W, b in self.layers[:-1]:
            h = act(h @ W + b)
        W, b = self.layers[-1]
        return h @ W + b

    def forward_backward(self, x, t, grad_out: Callable[[np.ndarray], tuple]):
        """Evaluate, then backpropagate ``dL/d out`` returned by ``grad_out(out)``.

        ``grad_out`` maps the output to ``(loss, dloss_dout)``.
        Returns ``(loss, flat_gradient)``.
        """
        act, dact = ACTIVATIONS[self.activation]
        h = self._inputs(x, t)
        hs, zs = [h], []
        for W, b in self.layers[:-1]:
            z = h @ W + b
            h = act(z)
            zs.append(z)
            hs.append(h)
        W, b = self.layers[-1]
        out = h @ W + b
        loss, delta = grad_out(out)

        grads = []
        for li in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[li]
            grads.append((hs[li].T @ delta, delta.sum(0)))
            if li:
                delta = (delta @ W.T) * dact(zs[li - 1])
        grads.reverse()
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
        return loss, flat

    def lipschitz_bound(self) -> float:
        """Upper bound on the Lipschitz constant w.r.t. the state input."""
        slope = ACTIVATION_SLOPE[self.activation]
        W0 = self.layers[0][0][: self.dim]
        L = np.linalg.norm(W0, 2)
        for W, _ in self.layers[1:]:
            L *= slope * np.linalg.norm(W, 2)
        return float(L)


@dataclass(frozen=True)
class TrainConfig:
    T: float = 1.0
    t_min: float = 1e-5
    batch: int = 512
    iters: int = 20000
    lr: float = 1e-3
    adam: tuple = (0.9, 0.999, 1e-8)
    lambda_mode: str = "g_squared"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.t_min < self.T:
            raise ValueError("need 0 < t_min < T")
        if self.batch < 1 or self.iters < 0 or not self.lr > 0:
            raise ValueError("invalid batch/iters/lr")
        if self.lambda_mode not in ("g_squared", "unit"):
            raise ValueError("lambda_mode must be 'g_squared' or 'unit'")


@dataclass
class DsmBatch:
    t: np.ndarray
    x0: np.ndarray
    eps: np.ndarray
    xt: np.ndarray
    target: np.ndarray
    weight: np.ndarray


def dsm_batch(spec: DiffusionSpec, gm: GaussianMixture, cfg: TrainConfig, rng: np.random.Generator) -> DsmBatch:
    """Draw ``t ~ U(t_min, T)``, ``x0 ~ gm``, ``eps ~ N(0, I)`` and form ``x_t`` and its target."""
    n = cfg.batch
    t = rng.uniform(cfg.t_min, cfg.T, size=n)
    x0 = gm.sample(n, rng)
    eps = rng.standard_normal((n, gm.dim))
    m, s = transition(spec, t)
    sd = np.sqrt(s)[:, None]
    xt = m[:, None] * x0 + sd * eps
    if cfg.lambda_mode == "g_squared":
        weight = drift_diffusion(spec, t)[1] ** 2
    else:
        weight = np.ones(n)
    return DsmBatch(t, x0, eps, xt, -eps / sd, weight)


def dsm_value(score: ScoreFunction, batch: DsmBatch, T: float) -> float:
    r = score(batch.xt, batch.t) - batch.target
    return float(T * np.mean(batch.weight * (r**2).sum(1)))


def dsm_loss(net: ScoreNet, spec: DiffusionSpec, gm: GaussianMixture, cfg: TrainConfig, rng: np.random.Generator):
    """``T * mean(lambda(t) |s(x_t, t) - grad log p(x_t | x0)|^2)`` and its gradient."""
    batch = dsm_batch(spec, gm, cfg, rng)
    return dsm_loss_on_batch(net, batch, cfg.T)


def dsm_loss_on_batch(net: ScoreNet, batch: DsmBatch, T: float):
    n = batch.t.shape[0]

    def grad_out(out):
        r = out - batch.target
        loss = T * np.mean(batch.weight * (r**2).sum(1))
        return loss, (2.0 * T / n) * batch.weight[:, None] * r

    return net.forward_backward(batch.xt, batch.t, grad_out)


class Adam:
    def __init__(self, n: int, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainedScore:
    net: ScoreNet
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __call__(self, x, t):
        return self.net(x, t)


def train(net: ScoreNet, spec: DiffusionSpec, gm: GaussianMixture, cfg: TrainConfig) -> TrainedScore:
    """Adam on the DSM loss for ``cfg.iters`` steps; deterministic given ``cfg.seed``."""
    params = net.params_flat
    opt = Adam(params.size, cfg.lr, *cfg.adam)
    losses = np.empty(cfg.iters)
    for it in range(cfg.iters):
        batch = dsm_batch(spec, gm, cfg, rngs.stream(cfg.seed, "train", it))
        loss, grad = dsm_loss_on_batch(net, batch, cfg.T)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: loss={loss}, grad norm={np.linalg.norm(grad)}"
            )
        losses[it] = loss
        params = opt.step(params, grad)
        net = net.with_params(params)
    return TrainedScore(net, losses)


def smoothed(losses: np.ndarray, window: int = 200) -> np.ndarray:
    """Running mean over a trailing window."""
    c = np.cumsum(np.insert(losses, 0, 0.0))
    w = min(window, len(losses))
    return (c[w:] - c[:-w]) / w


@dataclass(frozen=True)
class OracleScore:
    """Exact score of the diffused analytic target, usable wherever a net is."""

    gm: GaussianMixture
    spec: DiffusionSpec

    def __call__(self, x, t):
        t = np.asarray(t, dtype=np.float64)
        if np.all(t == 0):
            return self.gm.score(np.atleast_2d(x))
        return marginal_score(self.gm, self.spec, x, t)


def oracle_score(gm: GaussianMixture, spec: DiffusionSpec) -> OracleScore:
    return OracleScore(gm, spec)


class ZeroScore:
    def __init__(self, dim: int = 1):
        self.dim = dim

    def __call__(self, x, t):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def save_checkpoint(net: ScoreNet, path) -> None:
    """Shape header (one JSON line) followed by little-endian float64 parameters."""
    header = {
        "dim": net.dim,
        "time_embed": net.time_embed,
        "activation": net.activation,
        "shapes": [list(W.shape) for W, _ in net.layers],
        "n_params": net.n_params,
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(net.params_flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ScoreNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a score-net checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    header = json.loads(raw[off + 4 : off + 4 + hlen])
    flat = np.frombuffer(raw[off + 4 + hlen :], dtype="<f8").astype(np.float64)
    if flat.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    layers = [(np.zeros(s), np.zeros(s[1])) for s in header["shapes"]]
    skeleton = ScoreNet(layers, header["dim"], header["time_embed"], header["activation"])
    return skeleton.with_params(flat)
