"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line that is
repeated in the terminal summary; thresholds are fixed, never tuned."""

import time

import numpy as np
import pytest

from cora_lab.adapter import trainable_parameter_count
from cora_lab.checkpoint import read_checkpoint
from cora_lab.cli import main
from cora_lab.extraction import extract_common_basis_svd, merge_ensemble
from cora_lab.fixture import FixtureConfig, build_ensemble_fixture, pretrained_base
from cora_lab.linalg import svd
from cora_lab.reporting import read_csv
from cora_lab.train import TrainConfig, run_training

from conftest import ACCEPTANCE_LINES
from test_model import _fd_check, tiny

pytestmark = pytest.mark.slow


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    path = tmp_path_factory.mktemp("fixture-cache")
    build_ensemble_fixture(5, 0, FixtureConfig(), path)
    return path


@pytest.fixture(scope="session")
def ensemble_dir(cache, tmp_path_factory):
    out = tmp_path_factory.mktemp("ensemble")
    assert main(["--cache-dir", str(cache), "fixture", "--out", str(out)]) == 0
    return out


def cli(cache, *args):
    return main(["--cache-dir", str(cache), *map(str, args)])


def test_criterion_1_svd_correctness():
    rng = np.random.default_rng(2024)
    worst = {"recon": 0.0, "ortho": 0.0, "gram": 0.0}
    t0 = time.perf_counter()
    for _ in range(200):
        rows, cols = rng.integers(1, 97, size=2)
        m = rng.normal(size=(rows, cols)) * 10.0 ** rng.uniform(-3, 3)
        f = svd(m)
        k = min(rows, cols)
        worst["recon"] = max(worst["recon"], np.linalg.norm(f.reconstruct() - m) / np.linalg.norm(m))
        worst["ortho"] = max(worst["ortho"], np.max(np.abs(f.u.T @ f.u - np.eye(k))),
                             np.max(np.abs(f.vt @ f.vt.T - np.eye(k))))
        gram = m.T @ m if rows >= cols else m @ m.T
        oracle = np.sort(np.linalg.eigvalsh(gram))[::-1]
        worst["gram"] = max(worst["gram"], np.max(np.abs(f.singular_values**2 - oracle)) / oracle[0])
    elapsed = time.perf_counter() - t0
    ok = worst["recon"] <= 1e-6 and worst["ortho"] <= 1e-8 and worst["gram"] <= 1e-8 and elapsed <= 30
    report(1, ok, f"recon {worst['recon']:.1e}, ortho {worst['ortho']:.1e}, "
                  f"gram {worst['gram']:.1e} (rel. to largest), {elapsed:.1f}s")


def test_criterion_2_variance_counts(cache, ensemble_dir, tmp_path):
    assert cli(cache, "extract", "--ensemble", ensemble_dir, "--rank", 8, "--out", tmp_path / "b.ck",
               "--w0-out", tmp_path / "w0.ck") == 0
    t0 = time.perf_counter()
    assert cli(cache, "variance-report", "--checkpoint", tmp_path / "w0.ck", "--thresholds", "0.999",
               "--out", tmp_path / "var.csv", "--curves", tmp_path / "curves.csv") == 0
    elapsed = time.perf_counter() - t0
    counts = {r["method"]: int(r["count"]) for r in read_csv(tmp_path / "var.csv")}
    curves = read_csv(tmp_path / "curves.csv")
    w0 = read_checkpoint(tmp_path / "w0.ck").blocks["w0"]
    ok = (counts["svd"] <= counts["pca"] and len(curves) == 2 * w0.shape[1] and elapsed <= 10)
    report(2, ok, f"99.9% counts svd={counts['svd']} pca={counts['pca']} on W0 {w0.shape}, {elapsed:.1f}s")


def test_criterion_3_gradient_fidelity():
    from cora_lab.model import BASE_BLOCKS
    t0 = time.perf_counter()
    worst = max(_fd_check(tiny(seed, "cora_common_basis"), BASE_BLOCKS + ("adapter_a", "adapter_b"), seed)
                for seed in (0, 1, 2))
    elapsed = time.perf_counter() - t0
    report(3, worst <= 1e-4 and elapsed <= 10, f"max relative error {worst:.2e} over 3 seeds, {elapsed:.1f}s")


def test_criterion_4_freeze_contracts(cache):
    base = pretrained_base(0, FixtureConfig(), cache)
    basis = extract_common_basis_svd(merge_ensemble(build_ensemble_fixture(5, 0, FixtureConfig(), cache)), 8)
    t0 = time.perf_counter()
    fb = run_training(TrainConfig(regime="cora_fb", rank=8, seed=1), basis, base=base)
    b_same = np.array_equal(fb.model.adapter.b, basis.b) and fb.config.steps == 2000
    zeros = run_training(TrainConfig(regime="ablate_zeros_frozen", rank=8, seed=1), base=base)
    losses = [r["eval_loss"] for r in zeros.metrics.rows]
    constant = len(set(losses)) == 1 and len(losses) == 21
    elapsed = time.perf_counter() - t0
    report(4, b_same and constant and elapsed <= 60,
           f"B bit-identical after 2000 steps: {b_same}; zero-B eval loss constant over {len(losses)} evals: "
           f"{constant}; {elapsed:.1f}s")


def _by_regime(rows):
    out = {}
    for r in rows:
        out.setdefault(r["regime"], {})[int(r["seed"])] = float(r["final_eval_loss"])
    return out


def test_criterion_5_ablation_ordering(cache, tmp_path):
    t0 = time.perf_counter()
    assert cli(cache, "ablate", "--task", "copy", "--rank", 8, "--seeds", "1..5", "--out", tmp_path / "abl.csv",
               "--plot", tmp_path / "abl.png") == 0
    elapsed = time.perf_counter() - t0
    rows = read_csv(tmp_path / "abl.csv")
    loss = _by_regime(rows)
    rnd, ones, zeros, fb = (loss[k] for k in ("ablate_random_frozen", "ablate_ones_frozen",
                                              "ablate_zeros_frozen", "cora_fb"))
    per_seed = all(rnd[s] < ones[s] and rnd[s] < zeros[s] for s in rnd)
    mean_fb, mean_rnd = np.mean(list(fb.values())), np.mean(list(rnd.values()))
    ok = len(rows) == 30 and per_seed and mean_fb <= mean_rnd and elapsed <= 300
    report(5, ok, f"random<ones and random<zeros every seed: {per_seed}; mean cora_fb {mean_fb:.4f} "
                  f"vs random {mean_rnd:.4f} (ones {np.mean(list(ones.values())):.3f}, "
                  f"zeros {np.mean(list(zeros.values())):.3f}); {elapsed:.0f}s")


def test_criterion_6_parameter_accounting(cache, capsys):
    base = pretrained_base(0, FixtureConfig(), cache)
    d_model, d_k = base.dims.d_model, base.dims.d_k
    ok = True
    for regime, frozen in (("cora_fb", True), ("cora_tb", False), ("lora", False)):
        for r in (8, 16, 32):
            basis = extract_common_basis_svd(base.w_qkv, r) if regime != "lora" else None
            res = run_training(TrainConfig(regime=regime, rank=r, steps=0), basis, base=base)
            want = 3 * d_model * r + (0 if frozen else r * d_k)
            got = res.metrics.summary["trainable_params"]
            ok &= got == want == trainable_parameter_count(res.model.adapter).trainable
    assert main(["params", "--d-model", str(d_model), "--d-k", str(d_k), "--rank", "8"]) == 0
    printed = capsys.readouterr().out
    ratio = 8 * d_k / (3 * d_model * 8 + 8 * d_k)
    ok &= f"{ratio:.4f}" in printed
    report(6, ok, f"FB=3*d_model*r, TB/LoRA=+r*d_k exact for r in 8,16,32; printed B share {ratio:.4f} "
                  f"(0.5 only when 3*d_model == d_k)")


def test_criterion_7_regime_comparison(cache, tmp_path):
    t0 = time.perf_counter()
    assert cli(cache, "sweep", "--ranks", "8,16,32", "--regimes", "lora,cora_fb,cora_tb", "--seeds", "1..5",
               "--out", tmp_path / "sweep.csv", "--summary", tmp_path / "summary.csv",
               "--plot", tmp_path / "sweep.png") == 0
    elapsed = time.perf_counter() - t0
    table = read_csv(tmp_path / "sweep.csv")
    overall = {r["regime"]: float(r["mean_final_eval_loss"])
               for r in read_csv(tmp_path / "summary.csv") if r["rank"] == "all"}
    complete = len(table) == 45 and all(r["status"] == "ok" for r in table) and set(overall) == {
        "lora", "cora_fb", "cora_tb"}
    gap = overall["cora_tb"] - overall["lora"]
    ok = complete and gap <= 0.02 and elapsed <= 900
    report(7, ok, f"{len(table)} rows; mean final eval loss lora {overall['lora']:.4f}, "
                  f"cora_fb {overall['cora_fb']:.4f}, cora_tb {overall['cora_tb']:.4f} "
                  f"(cora_tb - lora = {gap:+.4f}, limit +0.02); {elapsed:.0f}s")


def test_criterion_8_pipeline_determinism(cache, ensemble_dir, tmp_path):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert cli(cache, "extract", "--ensemble", ensemble_dir, "--rank", 8, "--out", d / "basis.ck",
                   "--variance-csv", d / "var.csv", "--curves-csv", d / "curves.csv") == 0
        assert cli(cache, "train", "--regime", "cora_tb", "--basis", d / "basis.ck", "--ensemble", ensemble_dir,
                   "--out-dir", d / "train", "--export-csv", d / "blocks") == 0
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append({p.relative_to(d): p.read_bytes() for p in files})
    same = outputs[0] == outputs[1] and len(outputs[0]) > 4
    report(8, same, f"{len(outputs[0])} output files byte-identical across two extract+train runs: {same}")
