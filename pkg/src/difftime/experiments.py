"""Experiment runners behind the command-line subcommands.

Each runner walks the manifest's T grid, runs one independent job per T
(optionally in worker processes), merges results in grid order and writes
CSV artifacts whose first line is ``# manifest-hash <hash>``.
"""
from __future__ import annotations

import csv
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from difftime import rng as rngs
from difftime.aux import AuxFitResult, fit_aux
from difftime.config import RunManifest
from difftime.elbo import ElboReport, elbo_report, kl_bound_check, mean_se
from difftime.likelihood import logdensity_ode, sequential_refit, write_bpd_csv
from difftime.mixture import GaussianMixture, diffuse
from difftime.score_model import (
    ScoreNet,
    TrainConfig,
    TrainedScore,
    load_checkpoint,
    oracle_score,
    save_checkpoint,
    train,
)
from difftime.sde import Family, integrated_beta, pnoise, transition
from difftime.simulator import reverse_sample
from difftime.svg import line_plot

SAMPLE_MODES = ("baseline", "bridged", "exact")
BPD_MODES = ("baseline", "bridged-concurrent", "bridged-sequential", "exact")


class MissingArtifact(RuntimeError):
    pass


@dataclass
class JobResult:
    T: float
    ok: bool
    note: str = ""
    payload: dict = field(default_factory=dict)


@dataclass
class RunResult:
    jobs: list
    paths: list = field(default_factory=list)
    lines: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return any(not j.ok for j in self.jobs)


def tag(T: float) -> str:
    return f"T{T:.4f}"


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path, manifest: RunManifest, columns, rows, comments=()) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {manifest.header()}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _guard(fn, manifest, T):
    try:
        return fn(manifest, T)
    except MissingArtifact as exc:
        return JobResult(T, False, f"skipped: {exc}")
    except Exception as exc:  # per-T failure; the rest of the grid continues
        return JobResult(T, False, f"failed: {type(exc).__name__}: {exc}", {"trace": traceback.format_exc()})


def _run_jobs(fn, manifest: RunManifest, grid) -> list:
    grid = list(grid)
    if manifest.workers <= 1 or len(grid) <= 1:
        return [_guard(fn, manifest, T) for T in grid]
    with ProcessPoolExecutor(max_workers=manifest.workers) as pool:
        return list(pool.map(_guard, [fn] * len(grid), [manifest] * len(grid), grid))


def _prepare(manifest: RunManifest) -> None:
    Path(manifest.out_dir).mkdir(parents=True, exist_ok=True)
    d = manifest.to_dict()
    d.pop("out_dir")
    d.pop("workers")
    with open(manifest.artifact_paths()["manifest"], "wb") as fh:
        tomli_w.dump(d, fh)


def _require_analytic(manifest: RunManifest, what: str) -> GaussianMixture:
    if not manifest.analytic:
        raise ValueError(f"{what} needs an analytic mixture target, not a dataset")
    return manifest.target


def _data_array(manifest: RunManifest):
    return manifest.target if manifest.analytic else manifest.target.data


# ---------------------------------------------------------------- artifacts


def checkpoint_path(manifest: RunManifest, T: float) -> Path:
    return manifest.artifact_paths()["scores"] / f"score_{tag(T)}.ckpt"


def aux_path(manifest: RunManifest, T: float) -> Path:
    return manifest.artifact_paths()["aux"] / f"aux_{tag(T)}.toml"


def load_score(manifest: RunManifest, T: float) -> TrainedScore:
    p = checkpoint_path(manifest, T)
    if not p.exists():
        raise MissingArtifact(f"no checkpoint at {p}")
    return TrainedScore(load_checkpoint(p))


def save_aux(path, fit: AuxFitResult) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(fit.to_dict(), fh)


def load_aux(path) -> tuple[GaussianMixture, dict]:
    with open(path, "rb") as fh:
        d = tomli.load(fh)
    return GaussianMixture.from_dict(d["mixture"]), d["fit"]


def _fit_aux(manifest: RunManifest, T: float) -> AuxFitResult:
    b = manifest.budgets
    return fit_aux(
        manifest.spec, _data_array(manifest), T, b["n_fit"], range(1, b["k_max"] + 1),
        b["em_iters"], manifest.seed, b["em_restarts"],
    )


def aux_model(manifest: RunManifest, T: float) -> tuple[GaussianMixture, str]:
    """Stored bridge for T, or a fresh fit when none exists (noted)."""
    p = aux_path(manifest, T)
    if p.exists():
        return load_aux(p)[0], ""
    return _fit_aux(manifest, T).model, "aux fitted inline"


def train_config(manifest: RunManifest, T: float) -> TrainConfig:
    b = manifest.budgets
    return TrainConfig(
        T=T, t_min=b["t_min"], batch=b["batch"], iters=b["train_iters"], lr=b["lr"],
        lambda_mode=b["lambda_mode"], seed=manifest.seed,
    )


def init_net(manifest: RunManifest) -> ScoreNet:
    b = manifest.budgets
    return ScoreNet.init(manifest.spec.dim, tuple(b["hidden"]), b["time_embed"], seed=manifest.seed)


# ---------------------------------------------------------------- train-scores


def _train_job(manifest: RunManifest, T: float) -> JobResult:
    trained = train(init_net(manifest), manifest.spec, manifest.target, train_config(manifest, T))
    ck = checkpoint_path(manifest, T)
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained.net, ck)
    _write_csv(ck.with_name(f"loss_{tag(T)}.csv"), manifest, ["iter", "loss"], enumerate(trained.losses))
    final = float(trained.losses[-200:].mean()) if trained.losses.size else float("nan")
    return JobResult(T, True, payload={"final_loss": final})


def cmd_train_scores(manifest: RunManifest) -> RunResult:
    _prepare(manifest)
    jobs = _run_jobs(_train_job, manifest, manifest.T_grid)
    lines = [f"T={j.T:g} " + (f"final loss {j.payload['final_loss']:.5g}" if j.ok else j.note) for j in jobs]
    return RunResult(jobs, [checkpoint_path(manifest, j.T) for j in jobs if j.ok], lines)


# ---------------------------------------------------------------- fit-aux


def _aux_job(manifest: RunManifest, T: float) -> JobResult:
    fit = _fit_aux(manifest, T)
    save_aux(aux_path(manifest, T), fit)
    return JobResult(T, True, payload=fit.metadata())


def cmd_fit_aux(manifest: RunManifest) -> RunResult:
    _prepare(manifest)
    jobs = _run_jobs(_aux_job, manifest, manifest.T_grid)
    done = [j for j in jobs if j.ok]
    ap = manifest.artifact_paths()
    _write_csv(
        ap["aux_summary"], manifest, ["T", "k", "bic", "iterations", "fit_samples"],
        [[j.T, j.payload["k"], j.payload["bic"], j.payload["iterations"], j.payload["fit_samples"]] for j in done],
    )
    if done:
        line_plot(ap["aux_svg"], [j.T for j in done], {"components": [j.payload["k"] for j in done]},
                  title="Bridge complexity", ylabel="BIC-selected k")
    lines = [f"T={j.T:g} " + (f"k={j.payload['k']} bic={j.payload['bic']:.6g}" if j.ok else j.note) for j in jobs]
    return RunResult(jobs, [ap["aux_summary"], ap["aux_svg"]], lines)


# ---------------------------------------------------------------- elbo-sweep


def _elbo_job(manifest: RunManifest, T: float) -> JobResult:
    gm = manifest.target
    b = manifest.budgets
    score = load_score(manifest, T)
    aux, note = aux_model(manifest, T)
    args = dict(n_mc=b["n_mc"], n_time=b["n_time"], seed=manifest.seed, t_min=b["t_min"])
    base = elbo_report(manifest.spec, gm, score, pnoise(manifest.spec, T), T, **args)
    bridged = elbo_report(manifest.spec, gm, score, aux, T, **args)
    return JobResult(T, True, note, {"baseline": base, "bridged": bridged})


def cmd_elbo_sweep(manifest: RunManifest) -> RunResult:
    _require_analytic(manifest, "elbo-sweep")
    _prepare(manifest)
    jobs = _run_jobs(_elbo_job, manifest, manifest.T_grid)
    done = [j for j in jobs if j.ok]
    ap = manifest.artifact_paths()
    for key, mode in (("elbo_sweep", "baseline"), ("elbo_sweep_bridged", "bridged")):
        _write_csv(ap[key], manifest, ElboReport.CSV_COLUMNS, [j.payload[mode].csv_row() for j in done],
                   comments=[f"init={mode}"])
    if done:
        Ts = [j.T for j in done]
        line_plot(
            ap["elbo_svg"], Ts,
            {
                "gap G": [j.payload["baseline"].G.value for j in done],
                "KL": [j.payload["baseline"].kl.value for j in done],
                "ELBO": [j.payload["baseline"].elbo.value for j in done],
                "ELBO bridged": [j.payload["bridged"].elbo.value for j in done],
            },
            title="ELBO decomposition", ylabel="nats",
        )
    lines = []
    for j in jobs:
        if j.ok:
            r, q = j.payload["baseline"], j.payload["bridged"]
            lines.append(f"T={j.T:g} G={r.G.value:.4f} KL={r.kl.value:.4f} ELBO={r.elbo.value:.4f} "
                         f"bridged={q.elbo.value:.4f}" + (f" ({j.note})" if j.note else ""))
        else:
            lines.append(f"T={j.T:g} {j.note}")
    return RunResult(jobs, [ap["elbo_sweep"], ap["elbo_sweep_bridged"], ap["elbo_svg"]], lines)


# ---------------------------------------------------------------- sample


def _score_for(manifest: RunManifest, T: float, mode: str):
    if mode == "exact":
        return oracle_score(_require_analytic(manifest, "exact mode"), manifest.spec)
    return load_score(manifest, T)


def _sample_job(manifest: RunManifest, item) -> JobResult:
    T, mode = item
    gm = _require_analytic(manifest, "sample")
    b = manifest.budgets
    score = _score_for(manifest, T, mode)
    note = ""
    if mode == "baseline":
        init = pnoise(manifest.spec, T)
    elif mode == "bridged":
        init, note = aux_model(manifest, T)
    else:
        init = diffuse(gm, manifest.spec, T)
    steps = manifest.steps_for(T)
    per_seed = []
    for s in range(b["sample_seeds"]):
        batch = reverse_sample(manifest.spec, score, init, T, steps, b["n_samples"],
                               rngs.derive_seed(manifest.seed, "sample", s), b["t_min"])
        if s == 0:
            out = manifest.artifact_paths()["samples"] / f"{mode}_{tag(T)}.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            batch.to_csv(out, manifest.header())
        per_seed.append(gm.log_density(batch.states).mean())
    per_seed = np.array(per_seed)
    est = mean_se(per_seed)
    return JobResult(T, True, note, {
        "steps": steps, "nfe": batch.nfe, "median": float(np.median(per_seed)),
        "q05": float(np.quantile(per_seed, 0.05)), "q95": float(np.quantile(per_seed, 0.95)),
        "mean": est.value, "se": est.se,
    })


def cmd_sample(manifest: RunManifest, mode: str = "baseline", Ts=None) -> RunResult:
    if mode not in SAMPLE_MODES:
        raise ValueError(f"mode must be one of {SAMPLE_MODES}")
    _require_analytic(manifest, "sample")
    _prepare(manifest)
    grid = list(Ts) if Ts else list(manifest.T_grid)
    jobs = _run_jobs(_sample_job, manifest, [(T, mode) for T in grid])
    for j, T in zip(jobs, grid):
        j.T = T
    done = [j for j in jobs if j.ok]
    ap = manifest.artifact_paths()
    summary = ap["sample_summary"].with_name(f"sample_summary_{mode}.csv")
    cols = ["T", "steps", "nfe", "median_logp", "q05_logp", "q95_logp", "mean_logp", "mean_logp_se"]
    _write_csv(summary, manifest, cols, [[j.T] + [j.payload[c] for c in
               ("steps", "nfe", "median", "q05", "q95", "mean", "se")] for j in done],
               comments=[f"mode={mode} seeds={manifest.budgets['sample_seeds']} n={manifest.budgets['n_samples']}"])
    svg = ap["sample_svg"].with_name(f"sample_loglik_{mode}.svg")
    if done:
        line_plot(svg, [j.T for j in done], {k: [j.payload[k] for j in done] for k in ("median", "q05", "q95")},
                  title=f"log p_data of samples ({mode})", ylabel="nats")
    lines = [f"T={j.T:g} " + (f"median={j.payload['median']:.4f} q95={j.payload['q95']:.4f} nfe={j.payload['nfe']}"
                              if j.ok else j.note) for j in jobs]
    return RunResult(jobs, [summary, svg], lines)


# ---------------------------------------------------------------- bpd


def heldout_points(manifest: RunManifest) -> np.ndarray:
    n = manifest.budgets["n_eval"]
    if manifest.analytic:
        return manifest.target.draw(n, manifest.seed, "bpd/heldout")
    return manifest.target.data[:n]


def _bpd_job(manifest: RunManifest, item) -> JobResult:
    T, mode = item
    b = manifest.budgets
    score = _score_for(manifest, T, mode)
    steps = manifest.steps_for(T)
    k = ""
    if mode == "baseline":
        init = pnoise(manifest.spec, T)
    elif mode == "bridged-concurrent":
        init, _ = aux_model(manifest, T)
        k = init.n_components
    elif mode == "bridged-sequential":
        fit_x = manifest.target.draw(b["n_fit"], manifest.seed, "bpd/fit")
        fit = sequential_refit(manifest.spec, score, fit_x, T, steps, range(1, b["k_max"] + 1),
                               b["em_iters"], manifest.seed, b["t_min"])
        init, k = fit.model, fit.n_components
    else:
        init = diffuse(manifest.target, manifest.spec, T)
    x = heldout_points(manifest)
    res = logdensity_ode(manifest.spec, score, init, x, T, steps, b["t_min"])
    out = manifest.artifact_paths()["bpd"] / f"{mode}_{tag(T)}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bpd_csv(out, res, init, steps, b["t_min"], manifest.header())
    ok = ~res.failed
    est = mean_se(res.bpd[ok]) if ok.any() else mean_se(np.array([np.nan]))
    return JobResult(T, True, payload={
        "steps": steps, "nfe": res.nfe, "mean_logp": float(np.mean(res.logp[ok])) if ok.any() else float("nan"),
        "bpd": est.value, "se": est.se, "n_failed": int(res.failed.sum()), "k": k,
    })


def cmd_bpd(manifest: RunManifest, mode: str = "baseline", Ts=None) -> RunResult:
    if mode not in BPD_MODES:
        raise ValueError(f"mode must be one of {BPD_MODES}")
    _prepare(manifest)
    grid = list(Ts) if Ts else list(manifest.T_grid)
    jobs = _run_jobs(_bpd_job, manifest, [(T, mode) for T in grid])
    for j, T in zip(jobs, grid):
        j.T = T
        if j.ok and j.payload["n_failed"]:
            j.ok = False
            j.note = f"{j.payload['n_failed']} points failed"
    done = [j for j in jobs if "bpd" in j.payload]
    summary = manifest.artifact_paths()["bpd_summary"].with_name(f"bpd_summary_{mode}.csv")
    cols = ["T", "steps", "nfe", "mean_logp", "mean_bpd", "bpd_se", "n_failed", "aux_k"]
    _write_csv(summary, manifest, cols, [[j.T] + [j.payload[c] for c in
               ("steps", "nfe", "mean_logp", "bpd", "se", "n_failed", "k")] for j in done],
               comments=[f"mode={mode} t_min={manifest.budgets['t_min']!r} n_eval={manifest.budgets['n_eval']}"])
    lines = [f"T={j.T:g} " + (f"bpd={j.payload['bpd']:.4f}+-{j.payload['se']:.4f} nfe={j.payload['nfe']}"
                              if "bpd" in j.payload else j.note) for j in jobs]
    return RunResult(jobs, [summary], lines)


# ---------------------------------------------------------------- kl-bounds


def cmd_kl_bounds(manifest: RunManifest) -> RunResult:
    gm = _require_analytic(manifest, "kl-bounds")
    _prepare(manifest)
    spec = manifest.spec
    grid = np.asarray(manifest.T_grid)
    rep = kl_bound_check(spec, gm, grid, manifest.budgets["n_mc"], manifest.seed)
    if spec.family is Family.VP:
        bound = np.exp(-integrated_beta(spec, grid))
    else:
        bound = 1.0 / np.asarray(transition(spec, grid).var)
    rows = [[T, k, s, bt, k / bt] for T, k, s, bt in zip(grid, rep.kl_values, rep.kl_se, bound)]
    summary = (f"family={spec.family.value} rate_ok={str(rep.fitted_rate_ok).lower()} rate={rep.rate!r} "
               f"fitted_constant={rep.fitted_constant!r} inconclusive={str(rep.inconclusive).lower()} "
               f"clipped={str(rep.clipped).lower()}")
    path = manifest.artifact_paths()["klbounds"]
    _write_csv(path, manifest, ["T", "kl", "kl_se", "bound_term", "kl_over_bound"], rows, comments=[summary])
    return RunResult([JobResult(float(T), True) for T in grid], [path], [summary])
