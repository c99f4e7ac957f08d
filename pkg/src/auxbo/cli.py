"""Command-line entry point: gen / train / eval-pred / optimize / report.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numeric failure. Every command echoes its effective configuration into the
output directory and is a pure function of (arguments, config, inputs, seed).
"""

import os

# Pin BLAS to one thread before numpy loads: keeps runs bit-reproducible and
# avoids oversubscription; honored only if the user has not set these already.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402

import numpy as np  # noqa: E402

from .autodiff import ContractViolationError, NumericFailureError  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint  # noqa: E402
from .config import ConfigError, echo_config, load_config, resolve_seed  # noqa: E402
from .engine import (  # noqa: E402
    DgpSurrogate,
    StgpSurrogate,
    TnpSurrogate,
    TrainConfig,
    bayesopt_run,
    evaluate_prediction,
    train,
)
from .gp import load_dgp, train_dgp  # noqa: E402
from .model import FewShotSurrogate, ModelConfig, Normalizer, load_model  # noqa: E402
from .report import ReportInputError, build_report, write_optimize_csv  # noqa: E402
from .tasks import DatasetFormatError, SamplerConfig, generate_benchmark, load_tasks  # noqa: E402

EVAL_COLUMNS = ["surrogate", "context_size", "mse_sum", "nll_mean", "n_tasks", "n_repeats", "seed"]
TRAIN_LOG_COLUMNS = ["epoch", "train_nll", "val_nll", "best_flag"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _split_paths(data_dir: str) -> dict:
    return {split: os.path.join(data_dir, f"{split}.jsonl") for split in ("train", "val", "test")}


def _load_split(data_dir: str, split: str):
    tasks = load_tasks(_split_paths(data_dir)[split])
    if not tasks:
        raise DatasetFormatError(f"{data_dir}: {split} split is empty")
    return tasks


def _sampler_from(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**cfg["sampler"])


def _build_surrogate(model_path: str | None, use_stgp: bool, stgp_cfg: dict,
                     seed: int, expect_variant: str | None = None):
    """Surrogate adapter plus its normalizer (None while unknown)."""
    if use_stgp:
        return StgpSurrogate(seed=seed, restarts=stgp_cfg["restarts"],
                             iters=stgp_cfg["iters"]), None
    kind, _, _, _ = load_checkpoint(model_path)
    if kind == "dgp":
        if expect_variant is not None:
            raise ConfigError("--variant applies only to tnp checkpoints")
        dgp, norm = load_dgp(model_path)
        return DgpSurrogate(dgp, norm), norm
    model = load_model(model_path, expect_variant=expect_variant)
    return TnpSurrogate(model), model.normalizer


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    for key, flag in (("train", args.train), ("val", args.val),
                      ("test", args.test), ("pool", args.pool)):
        if flag is not None:
            cfg["gen"][key] = int(flag)
    cfg["seed"] = seed
    summary = generate_benchmark(
        seed=seed, n_train=cfg["gen"]["train"], n_val=cfg["gen"]["val"],
        n_test=cfg["gen"]["test"], pool_size=cfg["gen"]["pool"], out_dir=args.out)
    echo_config(cfg, args.out, "gen")
    print(f"generated {summary['n_tasks']} tasks (pool {summary['pool_size']}) into {args.out}")
    return 0


def _write_train_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_LOG_COLUMNS)
        for i, row in enumerate(rows):
            epoch = row.get("epoch", i) if "family" not in row else i
            writer.writerow([epoch, _fmt(float(row["train_nll"])),
                             _fmt(float(row["val_nll"])), int(row["best_flag"])])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    cfg["seed"] = seed
    if args.variant is not None:
        cfg["model"]["variant"] = args.variant
    train_tasks = _load_split(args.data, "train")
    val_tasks = _load_split(args.data, "val")
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)

    if args.surrogate == "dgp":
        dgp_cfg = cfg["dgp"]
        model, norm, log_rows = train_dgp(
            train_tasks, val_tasks,
            epochs=dgp_cfg["epochs"], sample_size=dgp_cfg["sample_size"],
            batch_tasks=dgp_cfg["batch_tasks"], lr=dgp_cfg["learning_rate"],
            weight_decay=dgp_cfg["weight_decay"], patience=dgp_cfg["patience"],
            seed=seed, families=tuple(dgp_cfg["families"]),
            embedding_dims=tuple(dgp_cfg["embedding_dims"]), hidden=dgp_cfg["hidden"])
        model.save(args.out, norm)
    else:
        norm = Normalizer.from_tasks(train_tasks)
        model_cfg = ModelConfig(
            input_dim=train_tasks[0].input_dim,
            aux_channels=max(t.aux_channels for t in train_tasks),
            **cfg["model"])
        model = FewShotSurrogate(model_cfg, seed=seed, normalizer=norm)
        train_cfg = TrainConfig(seed=seed, **cfg["train"])
        model, log_rows = train(model, train_tasks, val_tasks, _sampler_from(cfg), train_cfg)
        model.save(args.out)
    _write_train_log(os.path.join(out_dir, "train_log.csv"), log_rows)
    echo_config(cfg, out_dir, "train")
    print(f"saved {args.surrogate} checkpoint to {args.out} ({len(log_rows)} epochs logged)")
    return 0


def cmd_eval_pred(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    cfg["seed"] = seed
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes:
        raise ConfigError("--sizes must name at least one context size")
    test_tasks = _load_split(args.data, "test")
    target_size = cfg["sampler"]["target_size"]
    pool = len(test_tasks[0].records)
    for s in sizes:
        if not 1 <= s < pool - target_size:
            raise ConfigError(
                f"context size {s} outside sampler bounds [1, {pool - target_size})")
    surrogate, norm = _build_surrogate(args.model, args.stgp, cfg["stgp"], seed,
                                       expect_variant=args.variant)
    if norm is None:
        norm = Normalizer.from_tasks(_load_split(args.data, "train"))
    rows = evaluate_prediction(
        surrogate, test_tasks, sizes=sizes, repeats=args.repeats,
        target_size=target_size, seed=seed, normalizer=norm,
        balanced=cfg["sampler"]["balanced"], high_quantile=cfg["sampler"]["high_quantile"])
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow([row["surrogate"], row["context_size"], _fmt(row["mse_sum"]),
                             _fmt(row["nll_mean"]), row["n_tasks"], row["n_repeats"], row["seed"]])
    echo_config(cfg, out_dir, "eval_pred")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


_WORKER: dict = {}


def _optimize_init(model_path, use_stgp, stgp_cfg, data_path, seed):
    _WORKER["tasks"] = load_tasks(data_path)
    _WORKER["surrogate"], _ = _build_surrogate(model_path, use_stgp, stgp_cfg, seed)


def _optimize_one(job):
    t_idx, run, run_seed, init_size, trials, acq = job
    trace = bayesopt_run(_WORKER["surrogate"], _WORKER["tasks"][t_idx],
                         init_size=init_size, trials=trials, acquisition=acq,
                         seed=run_seed)
    trace.seed = run  # the run index is what lands in the CSV
    return trace


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    cfg["seed"] = seed
    proto = cfg["protocol"]
    init_size = args.init if args.init is not None else proto["init_size"]
    trials = args.trials if args.trials is not None else proto["trials"]
    runs = args.runs if args.runs is not None else proto["runs"]
    acq = args.acq if args.acq is not None else proto["acquisition"]
    test_tasks = _load_split(args.data, "test")
    pool = len(test_tasks[0].records)
    if pool < init_size + trials:
        raise ConfigError(f"pool of {pool} cannot support init {init_size} + trials {trials}")

    jobs = []
    for t_idx in range(len(test_tasks)):
        for run in range(runs):
            run_seed = int(np.random.SeedSequence([seed, t_idx, run]).generate_state(1)[0])
            jobs.append((t_idx, run, run_seed, init_size, trials, acq))

    if args.jobs > 1:
        with ProcessPoolExecutor(
                max_workers=args.jobs, initializer=_optimize_init,
                initargs=(args.model, args.stgp, cfg["stgp"],
                          _split_paths(args.data)["test"], seed)) as pool_exec:
            traces = list(pool_exec.map(_optimize_one, jobs))
    else:
        _optimize_init(args.model, args.stgp, cfg["stgp"], _split_paths(args.data)["test"], seed)
        if args.variant is not None:  # surface variant conflicts in-process
            _build_surrogate(args.model, args.stgp, cfg["stgp"], seed, expect_variant=args.variant)
        traces = [_optimize_one(job) for job in jobs]

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_optimize_csv(args.out, traces)
    echo_config(cfg, out_dir, "optimize")
    n_fallback = sum(t.init_fallback for t in traces)
    print(f"wrote {len(traces)} runs x {init_size + trials} rows to {args.out}"
          + (f" ({n_fallback} runs used the lowest-f init fallback)" if n_fallback else ""))
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    cfg["seed"] = resolve_seed(args.seed, cfg)
    cfg["protocol"]["solved_threshold"] = args.solved_threshold
    result = build_report(args.inputs, args.out, solved_threshold=args.solved_threshold)
    echo_config(cfg, args.out, "report")
    print(f"aggregated {len(result['surrogates'])} surrogate(s) into {result['aggregate_csv']}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auxbo",
        description="Few-shot surrogate training and discrete Bayesian optimization "
                    "on pre-evaluated design pools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config (strict keys)")
        p.add_argument("--seed", type=int, default=None,
                       help="seed (flag > AUXBO_SEED > config > default)")

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--pool", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a surrogate on a benchmark")
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", choices=["aux", "reward_only"], default=None)
    p.add_argument("--surrogate", choices=["tnp", "dgp"], default="tnp")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-pred", help="few-shot prediction metrics on test tasks")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", default=None, help="surrogate checkpoint")
    group.add_argument("--stgp", action="store_true", help="online single-task GP baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", default="5,10,20,30")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--variant", choices=["aux", "reward_only"], default=None,
                   help="require the checkpoint to have this variant")
    p.add_argument("--out", required=True, help="output CSV")
    common(p)
    p.set_defaults(func=cmd_eval_pred)

    p = sub.add_parser("optimize", help="run discrete optimization on test tasks")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", default=None)
    group.add_argument("--stgp", action="store_true")
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--init", type=int, default=None)
    p.add_argument("--acq", choices=["pi", "greedy"], default=None)
    p.add_argument("--variant", choices=["aux", "reward_only"], default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers over (task, run) pairs")
    p.add_argument("--out", required=True, help="output CSV")
    common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("report", help="aggregate optimization CSVs into tables and figures")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="optimize CSVs")
    p.add_argument("--solved-threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointError, ReportInputError,
            ContractViolationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericFailureError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
