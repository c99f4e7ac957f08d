"""Acceptance gate: every release criterion, each printing one PASS/FAIL line.

The heavy criteria (5, 6, 8) train desk-scale surrogates on the default
benchmark; one full run takes on the order of an hour of CPU. Set
AUXBO_ACCEPT_CACHE=<dir> to reuse artifacts across invocations while
iterating (stage wall times are recorded at build time and re-checked).

Run with ``pytest -m acceptance -v -rA`` to see the per-criterion lines.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

from auxbo import autodiff as ad
from auxbo.autodiff import Tensor
from auxbo.data import TargetInputs
from auxbo.engine import (
    DgpSurrogate,
    StgpSurrogate,
    TnpSurrogate,
    bayesopt_run,
    evaluate_prediction,
    evaluate_prediction_per_task,
)
from auxbo.gp import KernelConfig, gp_posterior, kernel_eval, load_dgp
from auxbo.gp import DeepKernelModel, _dgp_validation_ll, _draw_task_sample
from auxbo.gp import _kernel_tensor, _lml_from_kernel, _r2_from_const
from auxbo.model import load_model
from auxbo.tasks import Theta, generate_benchmark, load_tasks, simulate_trial

from oracles import dense_gp_posterior, finite_difference_check, reference_trial
from properties import check_architecture_invariants

pytestmark = pytest.mark.acceptance

SEED = 0
GEN = dict(n_train=200, n_val=25, n_test=50, pool_size=256)
BO = dict(init_size=5, trials=30, acquisition="pi")
RUNS_PER_TASK = 5


def report(criterion: str, ok: bool, elapsed: float, detail: str = "") -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s)"
    if detail:
        line += f" {detail}"
    print(line, flush=True)


# ---------------------------------------------------------------------------
# shared artifacts (benchmark + trained surrogates)
# ---------------------------------------------------------------------------


def _cli(args, env_seed=None):
    env = dict(os.environ)
    env.pop("AUXBO_SEED", None)
    if env_seed is not None:
        env["AUXBO_SEED"] = str(env_seed)
    proc = subprocess.run([sys.executable, "-m", "auxbo.cli"] + args,
                          capture_output=True, text=True, env=env)
    return proc


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    cache = os.environ.get("AUXBO_ACCEPT_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("accept")
    root.mkdir(parents=True, exist_ok=True)
    timings_path = root / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}

    def stage(name, output: Path, build):
        if not output.exists():
            t0 = time.time()
            build()
            timings[name] = time.time() - t0
            timings_path.write_text(json.dumps(timings, indent=2))
        return output

    data_dir = root / "data"
    stage("gen", data_dir / "test.jsonl",
          lambda: generate_benchmark(seed=SEED, out_dir=str(data_dir), **GEN))

    def train_variant(variant, out):
        proc = _cli(["train", "--data", str(data_dir), "--out", str(out),
                     "--variant", variant, "--seed", str(SEED)])
        assert proc.returncode == 0, proc.stderr

    aux_path = stage("train_aux", root / "aux.bin",
                     lambda: train_variant("aux", root / "aux.bin"))
    ro_path = stage("train_reward_only", root / "ro.bin",
                    lambda: train_variant("reward_only", root / "ro.bin"))

    def train_dgp_ckpt():
        proc = _cli(["train", "--data", str(data_dir), "--out", str(root / "dgp.bin"),
                     "--surrogate", "dgp", "--seed", str(SEED)])
        assert proc.returncode == 0, proc.stderr

    dgp_path = stage("train_dgp", root / "dgp.bin", train_dgp_ckpt)

    return {
        "root": root,
        "data": data_dir,
        "aux": aux_path,
        "ro": ro_path,
        "dgp": dgp_path,
        "timings": timings,
    }


@pytest.fixture(scope="session")
def test_tasks(artifacts):
    return load_tasks(str(artifacts["data"] / "test.jsonl"))


@pytest.fixture(scope="session")
def bo_results(artifacts, test_tasks):
    """Optimization traces for aux, reward_only, and STGP (criterion 6 phase)."""
    cache_path = artifacts["root"] / "bo_results.json"
    if cache_path.exists():
        return json.loads(cache_path.read_text())
    aux = TnpSurrogate(load_model(str(artifacts["aux"])))
    ro = TnpSurrogate(load_model(str(artifacts["ro"])))
    stgp = StgpSurrogate(seed=SEED)
    t0 = time.time()
    out = {"final_regret": {}, "frac_solved": {}, "mean_regret_curve": {}}
    for surrogate in (aux, ro, stgp):
        per_task_final = {}
        solved = 0
        pairs = 0
        for t_idx, task in enumerate(test_tasks):
            finals = []
            for run in range(RUNS_PER_TASK):
                run_seed = int(np.random.SeedSequence([SEED, t_idx, run]).generate_state(1)[0])
                trace = bayesopt_run(surrogate, task, seed=run_seed, **BO)
                finals.append(trace.regret[-1])
                pairs += 1
                solved += int(trace.regret[-1] <= 0.5)
            per_task_final[task.task_id] = float(np.mean(finals))
        out["final_regret"][surrogate.name] = float(np.mean(list(per_task_final.values())))
        out["frac_solved"][surrogate.name] = solved / pairs
    out["elapsed"] = time.time() - t0
    cache_path.write_text(json.dumps(out, indent=2))
    return out


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(1000)

    def p(*shape, name="p"):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    # every differentiable primitive, one focused check each
    a, b = p(3, 4, name="a"), p(3, 4, name="b")
    bias = p(5, name="bias")
    finite_difference_check(lambda: ((a + b) * b).sum(), [a, b])
    finite_difference_check(lambda: ((a - b) * a).sum(), [a, b])
    finite_difference_check(lambda: (a * b).sum(), [a, b])
    finite_difference_check(lambda: (a / (b * b + Tensor(1.0))).sum(), [a, b])
    finite_difference_check(lambda: ad.pow_(b * b + Tensor(0.5), 1.7).sum(), [b])
    finite_difference_check(lambda: ad.exp(a * Tensor(0.3)).sum(), [a])
    finite_difference_check(lambda: ad.log(a * a + Tensor(0.5)).sum(), [a])
    finite_difference_check(lambda: ad.sqrt(a * a + Tensor(0.3)).sum(), [a])
    finite_difference_check(lambda: ad.tanh(a).sum(), [a])
    finite_difference_check(lambda: ad.gelu(a).sum(), [a])
    finite_difference_check(lambda: ad.softplus(a).sum(), [a])
    finite_difference_check(lambda: ad.softmax(a).mean(), [a])
    finite_difference_check(lambda: ad.layer_norm(a).sum(), [a])
    w = p(4, 5, name="w")
    finite_difference_check(lambda: (ad.matmul(a, w) + bias).sum(), [a, w, bias])
    b3 = p(2, 3, 4, name="b3")
    finite_difference_check(lambda: ad.matmul(b3, w).sum(), [b3, w])
    finite_difference_check(lambda: ad.concat([a, b], axis=0).reshape(4, 6).transpose().mean(), [a, b])
    finite_difference_check(lambda: ad.take(a, (slice(1, 3), slice(0, 2))).sum(), [a])
    finite_difference_check(lambda: (ad.dropout(a, 0.4, np.random.default_rng(7)) * b).sum(), [a, b])
    mu, raw = p(5, name="mu"), p(5, name="raw")
    y = rng.standard_normal(5)
    finite_difference_check(lambda: ad.gaussian_nll(y, mu, ad.softplus(raw) + Tensor(1e-3)).sum(), [mu, raw])
    q, k, v = p(3, 8, name="q"), p(5, 8, name="k"), p(5, 8, name="v")
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    finite_difference_check(lambda: ad.masked_multihead_attention(q, k, v, mask, 2).sum(), [q, k, v])
    spd = rng.standard_normal((4, 4))
    amat = Tensor(spd @ spd.T + 4 * np.eye(4), requires_grad=True, name="amat")
    yv = p(4, 1, name="yv")

    def chol_loss():
        sym = (amat + ad.transpose(amat)) * Tensor(0.5)
        low = ad.cholesky(sym)
        alpha = ad.solve_triangular(low, ad.solve_triangular(low, yv), trans=True)
        return (yv * alpha).sum() + ad.log(ad.diagonal(low)).sum()

    finite_difference_check(chol_loss, [amat, yv])

    # 20 random composite graphs
    from test_autodiff import _random_composite_graph
    g = np.random.default_rng(2024)
    for _ in range(20):
        build, params = _random_composite_graph(g)
        finite_difference_check(build, params)

    elapsed = time.time() - t0
    report("1 gradient-suite", elapsed < 60.0, elapsed, "(all primitives + 20 composites, rel err <= 1e-4)")
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 2: GP oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_2_gp_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2000)
    worst = 0.0
    for trial in range(50):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(2, 9))
        cfg = KernelConfig(
            family="rbf" if trial % 2 == 0 else "matern52",
            lengthscales=rng.uniform(0.3, 2.0, d),
            signal_variance=float(rng.uniform(0.5, 3.0)),
            noise_variance=float(rng.uniform(0.05, 0.5)),
            jitter=1e-12)
        x = rng.uniform(-2, 2, (n, d))
        y = rng.standard_normal(n)
        xq = rng.uniform(-2, 2, (4, d))
        preds = gp_posterior(cfg, (x, y), xq)
        mu_o, sd_o = dense_gp_posterior(lambda p, q: kernel_eval(cfg, p, q), x, y, xq, cfg.noise_variance)
        for p, m, s in zip(preds, mu_o, sd_o):
            worst = max(worst, abs(p.mu - m), abs(p.sigma - s))
    assert worst < 1e-8, worst

    for trial in range(10):
        d = int(rng.integers(1, 3))
        n = int(rng.integers(3, 7))
        x = rng.uniform(-1, 1, (n, d))
        y = rng.standard_normal(n)
        diff2 = (x[:, None, :] - x[None, :, :]) ** 2
        log_ls = Tensor(rng.uniform(-0.3, 0.3, d), requires_grad=True, name="log_ls")
        log_sf = Tensor(rng.uniform(-0.3, 0.3), requires_grad=True, name="log_sf")
        log_sn = Tensor(np.log(0.3), requires_grad=True, name="log_sn")
        family = "rbf" if trial % 2 == 0 else "matern52"

        def build():
            r2 = _r2_from_const(diff2, log_ls)
            return _lml_from_kernel(_kernel_tensor(family, r2, log_sf), Tensor(y), log_sn, 1e-10)

        finite_difference_check(build, [log_ls, log_sf, log_sn], rel_tol=1e-4)

    elapsed = time.time() - t0
    report("2 gp-oracle", elapsed < 60.0, elapsed,
           f"(50 dense-inverse instances, worst |err|={worst:.2e}; 10 LML FD checks)")
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 3: architecture invariants
# ---------------------------------------------------------------------------


def test_criterion_3_architecture_invariants():
    t0 = time.time()
    for seed in range(100):
        check_architecture_invariants(seed, tol=1e-9)
    elapsed = time.time() - t0
    report("3 architecture-invariants", elapsed < 120.0, elapsed,
           "(100 random configs: permutation <= 1e-9, target independence <= 1e-9, "
           "reward_only h-blind bitwise, sigma >= floor)")
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criterion 4: simulator oracle + reproducible generation
# ---------------------------------------------------------------------------


def test_criterion_4_simulator_oracle(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(4000)
    for _ in range(100):
        theta = Theta(k=float(rng.uniform(0.5, 2.0)), c=float(rng.uniform(0.05, 0.6)),
                      m=float(rng.uniform(0.5, 1.5)), g0=float(rng.uniform(-0.3, 0.3)))
        x = rng.uniform(-1, 1, 4)
        rec = simulate_trial(theta, x)
        f_ref, h_ref = reference_trial(theta.k, theta.c, theta.m, theta.g0, x)
        assert rec.f == f_ref
        assert np.array_equal(rec.h.steps, h_ref)

    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    for d in (a_dir, b_dir):
        generate_benchmark(seed=99, n_train=4, n_val=2, n_test=2, pool_size=48, out_dir=str(d))
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "summary.json"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    elapsed = time.time() - t0
    report("4 simulator-oracle", elapsed < 120.0, elapsed,
           "(100 trials bit-for-bit vs reference; generation byte-reproducible)")
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criterion 5: prediction quality (aux beats reward_only; more context helps)
# ---------------------------------------------------------------------------


def test_criterion_5_prediction_quality(artifacts, test_tasks):
    t0 = time.time()
    for key in ("train_aux", "train_reward_only"):
        build_time = artifacts["timings"].get(key)
        assert build_time is not None and build_time <= 45 * 60, (key, build_time)

    aux_model = load_model(str(artifacts["aux"]))
    ro_model = load_model(str(artifacts["ro"]))
    norm = aux_model.normalizer
    aux = TnpSurrogate(aux_model)
    ro = TnpSurrogate(ro_model)

    per_task_aux = evaluate_prediction_per_task(aux, test_tasks, size=5, repeats=10,
                                                target_size=100, seed=SEED, normalizer=norm)
    per_task_ro = evaluate_prediction_per_task(ro, test_tasks, size=5, repeats=10,
                                               target_size=100, seed=SEED, normalizer=norm)
    diffs = [(per_task_aux[tid], per_task_ro[tid]) for tid in per_task_aux]
    wins = sum(1 for a, r in diffs if a < r)
    ties = sum(1 for a, r in diffs if a == r)
    n_eff = len(diffs) - ties
    pvalue = binomtest(wins, n_eff, 0.5, alternative="greater").pvalue
    mean_aux5 = float(np.mean([a for a, _ in diffs]))
    mean_ro5 = float(np.mean([r for _, r in diffs]))

    rows_aux = evaluate_prediction(aux, test_tasks, sizes=[5, 30], repeats=10,
                                   target_size=100, seed=SEED, normalizer=norm)
    rows_ro = evaluate_prediction(ro, test_tasks, sizes=[5, 30], repeats=10,
                                  target_size=100, seed=SEED, normalizer=norm)
    aux5, aux30 = rows_aux[0]["mse_sum"], rows_aux[1]["mse_sum"]
    ro5, ro30 = rows_ro[0]["mse_sum"], rows_ro[1]["mse_sum"]

    ok = (mean_aux5 < mean_ro5) and (pvalue < 0.05) and (aux30 < aux5) and (ro30 < ro5)
    elapsed = time.time() - t0
    report("5 prediction-quality", ok, elapsed,
           f"(MSE@5 aux={mean_aux5:.1f} vs ro={mean_ro5:.1f}, sign test {wins}/{n_eff} p={pvalue:.2e}; "
           f"aux@30={aux30:.1f}<@5={aux5:.1f}, ro@30={ro30:.1f}<@5={ro5:.1f}; "
           f"train times {artifacts['timings'].get('train_aux', 0):.0f}s/"
           f"{artifacts['timings'].get('train_reward_only', 0):.0f}s)")
    assert mean_aux5 < mean_ro5
    assert pvalue < 0.05
    assert aux30 < aux5 and ro30 < ro5


# ---------------------------------------------------------------------------
# criterion 6: optimization ordering
# ---------------------------------------------------------------------------


def test_criterion_6_optimization_ordering(bo_results):
    regret = bo_results["final_regret"]
    solved = bo_results["frac_solved"]
    elapsed = bo_results["elapsed"]
    ok = (regret["tnp-aux"] < regret["tnp-reward_only"] < regret["stgp"]
          and solved["tnp-aux"] == max(solved.values())
          and elapsed <= 30 * 60)
    report("6 optimization-ordering", ok, elapsed,
           f"(final mean regret aux={regret['tnp-aux']:.3f} < ro={regret['tnp-reward_only']:.3f} "
           f"< stgp={regret['stgp']:.3f}; solved aux={solved['tnp-aux']:.2f}, "
           f"ro={solved['tnp-reward_only']:.2f}, stgp={solved['stgp']:.2f})")
    assert regret["tnp-aux"] < regret["tnp-reward_only"]
    assert regret["tnp-reward_only"] < regret["stgp"]
    assert solved["tnp-aux"] >= max(solved.values())
    assert elapsed <= 30 * 60


# ---------------------------------------------------------------------------
# criterion 7: end-to-end CLI determinism
# ---------------------------------------------------------------------------


def test_criterion_7_cli_determinism(tmp_path):
    t0 = time.time()
    cfg = {
        "model": {"model_dim": 32, "predictor_layers": 2, "sequence_encoder_layers": 1,
                  "heads": 2},
        "sampler": {"context_min": 3, "context_max": 8, "target_size": 20},
        "train": {"batch_tasks": 4, "max_epochs": 5, "patience": 10},
        "gen": {"train": 8, "val": 2, "test": 2, "pool": 64},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    def pipeline(root: Path):
        root.mkdir()
        data = root / "data"
        steps = [
            ["gen", "--out", str(data), "--config", str(cfg_path), "--seed", "3"],
            ["train", "--data", str(data), "--config", str(cfg_path),
             "--out", str(root / "model.bin"), "--seed", "3"],
            ["optimize", "--model", str(root / "model.bin"), "--data", str(data),
             "--trials", "6", "--runs", "2", "--init", "3",
             "--out", str(root / "opt.csv"), "--config", str(cfg_path), "--seed", "3"],
            ["report", "--in", str(root / "opt.csv"), "--out", str(root / "report")],
        ]
        for step in steps:
            proc = _cli(step)
            assert proc.returncode == 0, (step, proc.stderr)

    pipeline(tmp_path / "r1")
    pipeline(tmp_path / "r2")

    compared = []
    for rel in ("data/train.jsonl", "data/summary.json", "model.bin", "train_log.csv",
                "opt.csv", "report/aggregate.csv", "report/mean_norm_best.svg",
                "report/mean_regret.svg", "report/frac_solved.svg"):
        a = (tmp_path / "r1" / rel).read_bytes()
        b = (tmp_path / "r2" / rel).read_bytes()
        assert a == b, f"{rel} differs between reruns"
        compared.append(rel)

    # exact schema spot checks
    opt_header = (tmp_path / "r1" / "opt.csv").read_text().splitlines()[0]
    assert opt_header == "surrogate,acq,task_id,run,trial,selected_index,observed_f,best_f,regret"
    agg_header = (tmp_path / "r1" / "report" / "aggregate.csv").read_text().splitlines()[0]
    assert agg_header == "trial,surrogate,mean_norm_best,mean_regret,frac_solved"
    log_header = (tmp_path / "r1" / "train_log.csv").read_text().splitlines()[0]
    assert log_header == "epoch,train_nll,val_nll,best_flag"

    elapsed = time.time() - t0
    report("7 cli-determinism", elapsed < 600.0, elapsed,
           f"({len(compared)} files byte-identical across reruns; schemas exact)")
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# criterion 8: deep-kernel GP sanity
# ---------------------------------------------------------------------------


def test_criterion_8_dgp_sanity(artifacts, test_tasks, bo_results):
    t0 = time.time()
    dgp_model, dgp_norm = load_dgp(str(artifacts["dgp"]))

    # validation joint-LL of the trained model vs the same architecture at init
    val_tasks = load_tasks(str(artifacts["data"] / "val.jsonl"))
    val_rng = np.random.default_rng(np.random.SeedSequence([SEED, 0x7A1]))
    val_samples = [_draw_task_sample(t, dgp_norm, 50, val_rng) for t in val_tasks]
    trained_ll = _dgp_validation_ll(dgp_model, val_samples)
    fresh = DeepKernelModel(input_dim=dgp_model.input_dim,
                            embedding_dim=dgp_model.embedding_dim,
                            family=dgp_model.family, hidden=dgp_model.hidden, seed=SEED)
    init_ll = _dgp_validation_ll(fresh, val_samples)

    surrogate = DgpSurrogate(dgp_model, dgp_norm)
    finals = []
    solved = 0
    pairs = 0
    for t_idx, task in enumerate(test_tasks):
        per_run = []
        for run in range(RUNS_PER_TASK):
            run_seed = int(np.random.SeedSequence([SEED, t_idx, run]).generate_state(1)[0])
            trace = bayesopt_run(surrogate, task, seed=run_seed, **BO)
            per_run.append(trace.regret[-1])
            solved += int(trace.regret[-1] <= 0.5)
            pairs += 1
        finals.append(float(np.mean(per_run)))
    dgp_regret = float(np.mean(finals))
    stgp_regret = bo_results["final_regret"]["stgp"]

    elapsed = time.time() - t0
    train_time = artifacts["timings"].get("train_dgp", 0.0)
    ok = (trained_ll > init_ll) and (dgp_regret < stgp_regret) and (elapsed + train_time <= 30 * 60)
    report("8 dgp-sanity", ok, elapsed + train_time,
           f"(val LL {init_ll:.1f} -> {trained_ll:.1f}; final regret dgp={dgp_regret:.3f} "
           f"< stgp={stgp_regret:.3f}; solved={solved / pairs:.2f}; train {train_time:.0f}s)")
    assert trained_ll > init_ll
    assert dgp_regret < stgp_regret
    assert elapsed + train_time <= 30 * 60
