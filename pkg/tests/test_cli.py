import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from difftime.cli import EXIT_FATAL, EXIT_OK, EXIT_PARTIAL, main
from difftime.config import load_manifest
from difftime.mixture import diffuse, toy_mixture
from difftime.sde import DiffusionSpec

TINY = """\
seed = 3
out_dir = "out"
T_grid = [0.2, 0.4, 0.6, 0.8]

[spec]
family = "VE_TOY"
params = {{ sigma_base = 10.0 }}

[target]
weights = [0.3, 0.7]
means = [[1.0], [3.0]]
vars = [0.01, 0.25]

[budgets]
train_iters = 40
batch = 64
hidden = [16, 16]
n_mc = 128
n_time = 4
steps_per_unit = {spu}
n_fit = 400
k_max = 3
em_iters = 40
n_samples = 64
sample_seeds = 3
n_eval = 16
"""

PIPELINE = [
    ["train-scores"],
    ["fit-aux"],
    ["elbo-sweep"],
    ["kl-bounds"],
    ["sample", "--mode", "baseline"],
    ["sample", "--mode", "bridged", "--T", "0.4"],
    ["bpd", "--mode", "baseline"],
    ["bpd", "--mode", "bridged-concurrent", "--T", "0.2"],
    ["bpd", "--mode", "bridged-sequential", "--T", "0.2"],
]


def write_manifest(path: Path, spu: int = 20) -> Path:
    path.write_text(TINY.format(spu=spu))
    return path


def run_all(manifest, out_dir, extra=()):
    codes = [main(cmd + ["--manifest", str(manifest), "--out-dir", str(out_dir), *extra]) for cmd in PIPELINE]
    return codes


def read_table(path) -> dict:
    lines = [line for line in Path(path).read_text().splitlines() if not line.startswith("#")]
    rows = list(csv.reader(lines))
    return {c: np.array([float(r[i]) if r[i] else np.nan for r in rows[1:]]) for i, c in enumerate(rows[0])}


def outputs(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    m = write_manifest(d / "m.toml")
    a = run_all(m, d / "a")
    b = run_all(m, d / "b", ["--workers", "2"])
    return m, d / "a", d / "b", a, b


def test_pipeline_succeeds(two_runs):
    _, _, _, a, b = two_runs
    assert a == [EXIT_OK] * len(PIPELINE)
    assert b == [EXIT_OK] * len(PIPELINE)


def test_reruns_are_byte_identical(two_runs):
    _, a, b, _, _ = two_runs
    oa, ob = outputs(a), outputs(b)
    assert set(oa) == set(ob)
    assert any(k.endswith(".ckpt") for k in oa) and len(oa) > 20
    diff = [k for k in oa if oa[k] != ob[k]]
    assert diff == []


def test_csvs_carry_hash_and_header(two_runs):
    m, a, _, _, _ = two_runs
    h = load_manifest(m).hash()
    csvs = sorted(a.rglob("*.csv"))
    assert len(csvs) >= 10
    for p in csvs:
        lines = p.read_text().splitlines()
        assert lines[0] == f"# manifest-hash {h}", p
        header = next(line for line in lines if not line.startswith("#"))
        assert all(c and not c[0].isdigit() and c[0] != "-" for c in header.split(",")), p


def test_seed_override_changes_hash(tmp_path):
    m = load_manifest(write_manifest(tmp_path / "m.toml"))
    assert m.with_overrides(seed=4).hash() != m.hash()
    assert m.with_overrides(out_dir="elsewhere", workers=3).hash() == m.hash()


def test_nfe_linear_in_T(two_runs):
    _, a, _, _, _ = two_runs
    for name in ("sample_summary_baseline.csv", "bpd_summary_baseline.csv"):
        rows = read_table(a / name)
        ratio = rows["nfe"] / rows["T"]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_bad_manifest_is_fatal(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY.format(spu=20) + "\nbogus_key = 1\n")
    assert main(["kl-bounds", "--manifest", str(p)]) == EXIT_FATAL
    assert "bogus_key" in capsys.readouterr().err
    assert main(["kl-bounds", "--manifest", str(tmp_path / "missing.toml")]) == EXIT_FATAL


def test_missing_checkpoints_are_partial(tmp_path, capsys):
    m = write_manifest(tmp_path / "m.toml")
    assert main(["elbo-sweep", "--manifest", str(m), "--out-dir", str(tmp_path / "empty")]) == EXIT_PARTIAL
    assert "no checkpoint" in capsys.readouterr().out


def test_exact_bpd_matches_analytic_density(tmp_path):
    m = write_manifest(tmp_path / "m.toml", spu=250)
    assert main(["bpd", "--mode", "exact", "--T", "0.8", "--manifest", str(m)]) == EXIT_OK
    man = load_manifest(m)
    rows = read_table(tmp_path / "out" / "bpd" / "exact_T0.8000.csv")
    from difftime.experiments import heldout_points

    x = heldout_points(man)
    truth = diffuse(toy_mixture(), DiffusionSpec.ve_toy(), 1e-5).log_density(x)
    assert np.abs(rows["logp"] - truth).max() < 0.02
    assert np.abs(rows["bpd"] - (-truth / np.log(2))).max() < 0.02


def test_exact_sampling_moments_vp_large_T(tmp_path):
    text = TINY.format(spu=200).replace('family = "VE_TOY"', 'family = "VP"').replace(
        "params = { sigma_base = 10.0 }", "params = { beta0 = 0.1, beta1 = 20.0 }")
    text = text.replace("n_samples = 64", "n_samples = 4000").replace("sample_seeds = 3", "sample_seeds = 1")
    m = tmp_path / "vp.toml"
    m.write_text(text)
    assert main(["sample", "--mode", "exact", "--T", "1.6", "--manifest", str(m)]) == EXIT_OK
    x = read_table(tmp_path / "out" / "samples" / "exact_T1.6000.csv")["x0"]
    gm = toy_mixture()
    mean, var = gm.mean()[0], gm.variance()[0]
    assert abs(x.mean() - mean) <= 4 * x.std(ddof=1) / np.sqrt(x.size)
    assert abs(x.var(ddof=1) - var) <= 4 * np.sqrt(np.var((x - x.mean()) ** 2) / x.size)


def test_module_entry_point(tmp_path):
    m = write_manifest(tmp_path / "m.toml")
    r = subprocess.run([sys.executable, "-m", "difftime", "kl-bounds", "--manifest", str(m)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "family=VE_TOY" in r.stdout
    assert (tmp_path / "out" / "klbounds.csv").exists()
    r = subprocess.run([sys.executable, "-m", "difftime", "nope"], capture_output=True, text=True)
    assert r.returncode != 0
