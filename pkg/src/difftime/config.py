"""Run manifests: one TOML file fully describing one experiment."""
from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from difftime import rng as rngs
from difftime.mixture import GaussianMixture, toy_mixture
from difftime.sde import DiffusionSpec

DEFAULT_BUDGETS = {
    "n_mc": 4096,
    "n_time": 64,
    "steps_per_unit": 1000,
    "train_iters": 20000,
    "batch": 512,
    "lr": 1e-3,
    "lambda_mode": "g_squared",
    "hidden": [64, 64, 64],
    "time_embed": 4,
    "t_min": 1e-5,
    "n_fit": 10000,
    "k_max": 8,
    "em_iters": 300,
    "em_restarts": 3,
    "n_samples": 1024,
    "sample_seeds": 8,
    "n_eval": 256,
}

# keys that do not influence any output byte
_NON_SEMANTIC = ("out_dir", "workers")


class ManifestError(ValueError):
    pass


class EmpiricalTarget:
    """A finite sample standing in for ``p_data``; draws rows with replacement."""

    def __init__(self, data: np.ndarray, path: str = ""):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if self.data.shape[0] < 1 or not np.all(np.isfinite(self.data)):
            raise ManifestError("dataset must be a non-empty finite array")
        self.path = path

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.data[rng.integers(len(self.data), size=n)]

    def draw(self, n: int, seed: int, purpose: str, counter: int = 0) -> np.ndarray:
        u = rngs.uniforms(seed, purpose + "/index", counter, n)
        return self.data[np.minimum((u * len(self.data)).astype(int), len(self.data) - 1)]


def load_dataset(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


@dataclass
class RunManifest:
    seed: int
    spec: DiffusionSpec
    target: GaussianMixture | EmpiricalTarget
    T_grid: list
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    out_dir: Path = Path("runs/default")
    tool_version: str = ""
    workers: int = 1
    base_dir: Path = Path(".")

    @property
    def analytic(self) -> bool:
        return isinstance(self.target, GaussianMixture)

    def budget(self, key):
        return self.budgets[key]

    def steps_for(self, T: float) -> int:
        return max(1, int(round(self.budgets["steps_per_unit"] * T)))

    def to_dict(self) -> dict:
        if self.analytic:
            target = self.target.to_dict()
        else:
            target = {"path": self.target.path}
        return {
            "seed": self.seed,
            "tool_version": self.tool_version,
            "out_dir": str(self.out_dir),
            "workers": self.workers,
            "T_grid": [float(t) for t in self.T_grid],
            "spec": self.spec.to_dict(),
            "target": target,
            "budgets": dict(self.budgets),
        }

    def semantic_dict(self) -> dict:
        d = self.to_dict()
        for k in _NON_SEMANTIC:
            d.pop(k, None)
        if not self.analytic:
            # hash the data itself, not where it lives
            d["target"] = {"sha256": hashlib.sha256(self.target.data.tobytes()).hexdigest()}
        return d

    def hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self) -> str:
        return f"manifest-hash {self.hash()}"

    def artifact_paths(self) -> dict:
        o = Path(self.out_dir)
        return {
            "scores": o / "scores",
            "aux": o / "aux",
            "elbo_sweep": o / "elbo_sweep.csv",
            "elbo_sweep_bridged": o / "elbo_sweep_bridged.csv",
            "elbo_svg": o / "elbo_sweep.svg",
            "aux_summary": o / "aux_fits.csv",
            "aux_svg": o / "aux_complexity.svg",
            "samples": o / "samples",
            "sample_summary": o / "sample_summary.csv",
            "sample_svg": o / "sample_loglik.svg",
            "bpd": o / "bpd",
            "bpd_summary": o / "bpd_summary.csv",
            "klbounds": o / "klbounds.csv",
            "manifest": o / "manifest.toml",
        }

    def with_overrides(self, seed=None, out_dir=None, workers=None) -> "RunManifest":
        m = replace(self, budgets=copy.deepcopy(self.budgets))
        if seed is not None:
            m.seed = int(seed)
        if out_dir is not None:
            m.out_dir = Path(out_dir)
        if workers is not None:
            if workers < 1:
                raise ManifestError("workers must be >= 1")
            m.workers = int(workers)
        return m

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            tomli_w.dump(self.to_dict(), fh)


def _target_from(d: dict, base: Path):
    if d is None or d == "toy":
        return toy_mixture()
    if "path" in d:
        p = Path(d["path"])
        p = p if p.is_absolute() else base / p
        return EmpiricalTarget(load_dataset(p), d["path"])
    if "pi" in d and len(d) == 1:
        return toy_mixture(float(d["pi"]))
    try:
        return GaussianMixture.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"bad target: {exc}") from exc


def manifest_from_dict(d: dict, base_dir=".") -> RunManifest:
    from difftime import __version__

    base = Path(base_dir)
    unknown = set(d) - {"seed", "tool_version", "out_dir", "workers", "T_grid", "spec", "target", "budgets"}
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    budgets = dict(DEFAULT_BUDGETS)
    extra = set(d.get("budgets", {})) - set(DEFAULT_BUDGETS)
    if extra:
        raise ManifestError(f"unknown budget keys: {sorted(extra)}")
    budgets.update(d.get("budgets", {}))
    try:
        spec = DiffusionSpec.from_dict(d["spec"]) if "spec" in d else DiffusionSpec.ve_toy()
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"bad spec: {exc}") from exc
    T_grid = [float(t) for t in d.get("T_grid", [1.0])]
    if not T_grid or any(not t > budgets["t_min"] for t in T_grid):
        raise ManifestError("T_grid must be non-empty with every T > t_min")
    version = d.get("tool_version", __version__)
    if version != __version__:
        warnings.warn(f"manifest written for difftime {version}, running {__version__}")
    target = _target_from(d.get("target"), base)
    if target.dim != spec.dim:
        raise ManifestError(f"target dim {target.dim} != spec dim {spec.dim}")
    out = Path(d.get("out_dir", "runs/default"))
    return RunManifest(
        seed=int(d.get("seed", 0)),
        spec=spec,
        target=target,
        T_grid=T_grid,
        budgets=budgets,
        out_dir=out if out.is_absolute() else base / out,
        tool_version=version,
        workers=int(d.get("workers", 1)),
        base_dir=base,
    )


def load_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            d = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_dict(d, path.parent)
