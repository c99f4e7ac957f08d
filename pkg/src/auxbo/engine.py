"""Training, prediction evaluation, acquisition, and the optimization loop.

The optimization loop is surrogate-agnostic: adapters wrap the few-shot
transformer, the online single-task GP, and the frozen deep-kernel GP behind
one interface (observe a trial, score a batch of candidate designs in raw
reward units). Model surrogates receive the full trial record including the
auxiliary sequence; GP surrogates see (x, f) only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolationError, NumericFailureError, Tensor
from .data import (
    ContextSet,
    GaussianPrediction,
    OptimizationTrace,
    TargetInputs,
    TaskDataset,
    TrialRecord,
)
from .gp import DeepKernelModel, KernelConfig, fit_stgp, gp_posterior
from .model import FewShotSurrogate, Normalizer
from .optim import AdamW
from .tasks import SamplerConfig, sample_context_target


@dataclass(frozen=True)
class TrainConfig:
    batch_tasks: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    dropout: float | None = None  # None: use the model's configured rate
    max_epochs: int = 60
    patience: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.batch_tasks < 1 or self.learning_rate <= 0 or self.max_epochs < 1:
            raise ValueError("batch_tasks, learning_rate, max_epochs must be positive")
        if self.patience < 0 or self.weight_decay < 0:
            raise ValueError("patience and weight_decay must be nonnegative")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _fixed_validation_draws(val_tasks, sampler: SamplerConfig, seed: int, draws_per_task: int = 2):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFA11D]))
    out = []
    for task in val_tasks:
        for _ in range(draws_per_task):
            out.append(sample_context_target(task, sampler, rng))
    return out


def _validation_nll(model: FewShotSurrogate, draws) -> float:
    total = 0.0
    count = 0
    for ctx, xs, fs in draws:
        total += model.nll_loss(ctx, xs, fs).item()
        count += len(fs)
    return total / count


def train(model: FewShotSurrogate, train_tasks: list[TaskDataset],
          val_tasks: list[TaskDataset], sampler: SamplerConfig,
          cfg: TrainConfig):
    """Optimize the surrogate on fresh context/target draws (one pass per epoch).

    Keeps the weights from the epoch with the best validation NLL and stops
    once validation has not improved for more than ``patience`` epochs.
    Returns (model, log rows); the model holds the best-validation weights.
    """
    if not train_tasks or not val_tasks:
        raise ValueError("train needs at least one training and one validation task")
    params = model.params()
    plist = list(params.values())
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0DE5]))
    draw_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD3A5]))
    val_draws = _fixed_validation_draws(val_tasks, sampler, cfg.seed)

    best_val = math.inf
    best_weights = None
    stale = 0
    step = 0
    log_rows = []
    for epoch in range(cfg.max_epochs):
        order = order_rng.permutation(len(train_tasks))
        epoch_nll = 0.0
        epoch_targets = 0
        for start in range(0, len(order), cfg.batch_tasks):
            chunk = order[start:start + cfg.batch_tasks]
            step += 1
            drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD0, step]))
            loss = None
            for ti in chunk:
                ctx, xs, fs = sample_context_target(train_tasks[ti], sampler, draw_rng)
                nll = model.nll_loss(ctx, xs, fs, rng=drop_rng, drop=cfg.dropout)
                epoch_nll += nll.item()
                epoch_targets += len(fs)
                scaled = nll * Tensor(1.0 / len(chunk))
                loss = scaled if loss is None else loss + scaled
            try:
                grads = ad.backward(loss, params=plist)
            except NumericFailureError as e:
                raise NumericFailureError(f"training loss became NaN at step {step}") from e
            opt.step(grads)
        val_nll = _validation_nll(model, val_draws)
        improved = val_nll < best_val
        if improved:
            best_val = val_nll
            best_weights = {n: t.data.copy() for n, t in params.items()}
            stale = 0
        else:
            stale += 1
        log_rows.append({
            "epoch": epoch,
            "train_nll": epoch_nll / max(epoch_targets, 1),
            "val_nll": val_nll,
            "best_flag": int(improved),
        })
        if stale > cfg.patience:
            break
    if best_weights is not None:
        for n, t in params.items():
            t.data = best_weights[n]
    return model, log_rows


# ---------------------------------------------------------------------------
# surrogate adapters (raw reward units)
# ---------------------------------------------------------------------------


class TnpSurrogate:
    """Few-shot transformer behind the optimization-loop interface."""

    def __init__(self, model: FewShotSurrogate, name: str | None = None):
        self.model = model
        self.name = name or ("tnp-" + model.config.variant)
        self._records: list[TrialRecord] = []

    def reset(self, records: list[TrialRecord]) -> None:
        self._records = list(records)

    def observe(self, record: TrialRecord) -> None:
        self._records.append(record)

    def predict_raw(self, xs: np.ndarray) -> list[GaussianPrediction]:
        ctx = ContextSet.from_records(self._records)
        preds = self.model.predict(ctx, TargetInputs(xs=xs))
        norm = self.model.normalizer
        return [GaussianPrediction(mu=norm.denorm_mu(p.mu), sigma=norm.denorm_sigma(p.sigma))
                for p in preds]


class StgpSurrogate:
    """Single-task GP refit from scratch on the current context each trial."""

    def __init__(self, seed: int = 0, restarts: int = 4, iters: int = 100):
        self.name = "stgp"
        self.seed = seed
        self.restarts = restarts
        self.iters = iters
        self._x: list[np.ndarray] = []
        self._y: list[float] = []

    def reset(self, records: list[TrialRecord]) -> None:
        self._x = [r.x for r in records]
        self._y = [r.f for r in records]

    def observe(self, record: TrialRecord) -> None:
        self._x.append(record.x)
        self._y.append(record.f)

    def predict_raw(self, xs: np.ndarray) -> list[GaussianPrediction]:
        x = np.stack(self._x)
        y = np.array(self._y)
        mean = float(y.mean())
        std = float(y.std())
        if std < 1e-12:
            std = 1.0
        z = (y - mean) / std
        if len(self._y) >= 2:
            cfg = fit_stgp(x, z, seed=self.seed, restarts=self.restarts, iters=self.iters)
        else:
            cfg = KernelConfig(family="rbf", lengthscales=np.full(x.shape[1], math.sqrt(x.shape[1])))
        preds = gp_posterior(cfg, (x, z), xs)
        return [GaussianPrediction(mu=p.mu * std + mean, sigma=p.sigma * std) for p in preds]


class DgpSurrogate:
    """Frozen deep-kernel GP re-conditioned on (x, f) as the context grows."""

    def __init__(self, model: DeepKernelModel, normalizer: Normalizer):
        self.name = "dgp"
        self.model = model
        self.normalizer = normalizer
        self._x: list[np.ndarray] = []
        self._y: list[float] = []

    def reset(self, records: list[TrialRecord]) -> None:
        self._x = [r.x for r in records]
        self._y = [r.f for r in records]

    def observe(self, record: TrialRecord) -> None:
        self._x.append(record.x)
        self._y.append(record.f)

    def predict_raw(self, xs: np.ndarray) -> list[GaussianPrediction]:
        x = np.stack(self._x)
        y = self.normalizer.norm_f(np.array(self._y))
        preds = self.model.posterior(x, y, xs)
        n = self.normalizer
        return [GaussianPrediction(mu=n.denorm_mu(p.mu), sigma=n.denorm_sigma(p.sigma)) for p in preds]


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

ACQUISITIONS = ("pi", "greedy")


def acquisition_score(kind: str, prediction: GaussianPrediction, f_best: float) -> float:
    """Probability of improvement over f_best, or the plain predicted mean."""
    if kind == "greedy":
        return prediction.mu
    if kind != "pi":
        raise ValueError(f"unknown acquisition {kind!r}")
    if f_best == -math.inf:
        return 1.0
    z = (prediction.mu - f_best) / prediction.sigma
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------


def _initial_context_indices(task: TaskDataset, init_size: int,
                             rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Uniform draw among designs with f <= 0.3*max_f; lowest-f fallback."""
    fs = task.rewards()
    eligible = np.flatnonzero(fs <= 0.3 * task.max_f)
    if eligible.size >= init_size:
        return rng.choice(eligible, size=init_size, replace=False), False
    order = np.lexsort((np.arange(fs.size), fs))
    return order[:init_size], True


def bayesopt_run(surrogate, task: TaskDataset, init_size: int = 5, trials: int = 30,
                 acquisition: str = "pi", seed: int = 0) -> OptimizationTrace:
    """Discrete optimization over the task's pre-evaluated design pool.

    The trace includes the initial context observations followed by one row
    per optimization trial; candidates already observed are never rescored.
    """
    pool = len(task.records)
    if pool < init_size + trials:
        raise ContractViolationError(
            f"pool of {pool} cannot support init_size={init_size} plus trials={trials}")
    if acquisition not in ACQUISITIONS:
        raise ValueError(f"acquisition must be one of {ACQUISITIONS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    init_idx, fallback = _initial_context_indices(task, init_size, rng)

    trace = OptimizationTrace(
        task_id=task.task_id, seed=seed, surrogate=surrogate.name,
        acquisition=acquisition, max_f=task.max_f, init_fallback=fallback)
    surrogate.reset([task.records[i] for i in init_idx])
    observed = set()
    for i in init_idx:
        trace.append(int(i), task.records[i].f)
        observed.add(int(i))

    for _ in range(trials):
        candidates = np.array(sorted(set(range(pool)) - observed), dtype=np.int64)
        xs = np.stack([task.records[i].x for i in candidates])
        preds = surrogate.predict_raw(xs)
        f_best = max(trace.observed_f)
        scores = np.array([acquisition_score(acquisition, p, f_best) for p in preds])
        pick = int(candidates[int(np.argmax(scores))])  # argmax takes the lowest index on ties
        record = task.records[pick]
        trace.append(pick, record.f)
        observed.add(pick)
        surrogate.observe(record)
    return trace


# ---------------------------------------------------------------------------
# prediction evaluation protocol
# ---------------------------------------------------------------------------


def evaluate_prediction(surrogate, tasks: list[TaskDataset], sizes,
                        repeats: int = 10, target_size: int = 100, seed: int = 0,
                        normalizer: Normalizer | None = None,
                        balanced: bool = True, high_quantile: float = 0.8):
    """Few-shot prediction metrics per context size, in standardized units.

    For every context size and task, ``repeats`` independent context/target
    pairs are drawn; the squared error is summed over each target set and
    averaged over pairs and tasks, alongside the mean per-target Gaussian NLL.
    """
    norm = normalizer if normalizer is not None else Normalizer()
    rows = []
    for size in sizes:
        sampler = SamplerConfig(context_min=size, context_max=size,
                                target_size=target_size, balanced=balanced,
                                high_quantile=high_quantile)
        mse_sums = []
        nll_terms = []
        for t_idx, task in enumerate(tasks):
            rng = np.random.default_rng(np.random.SeedSequence([seed, size, t_idx]))
            for _ in range(repeats):
                ctx, xs, fs = sample_context_target(task, sampler, rng)
                surrogate.reset([TrialRecord(x=ctx.xs[i], f=ctx.fs[i], h=ctx.hs[i])
                                 for i in range(ctx.size)])
                preds = surrogate.predict_raw(xs)
                f_norm = norm.norm_f(fs)
                mu = norm.norm_f(np.array([p.mu for p in preds]))
                sigma = np.array([p.sigma for p in preds]) / norm.f_std
                sq = (mu - f_norm) ** 2
                mse_sums.append(float(sq.sum()))
                nll_terms.append(float(np.mean(
                    0.5 * np.log(2.0 * np.pi * sigma ** 2) + sq / (2.0 * sigma ** 2))))
        rows.append({
            "surrogate": surrogate.name,
            "context_size": int(size),
            "mse_sum": float(np.mean(mse_sums)),
            "nll_mean": float(np.mean(nll_terms)),
            "n_tasks": len(tasks),
            "n_repeats": int(repeats),
            "seed": int(seed),
        })
    return rows


def evaluate_prediction_per_task(surrogate, tasks, size: int, repeats: int = 10,
                                 target_size: int = 100, seed: int = 0,
                                 normalizer: Normalizer | None = None):
    """Per-task mean summed-MSE at one context size (for paired comparisons)."""
    norm = normalizer if normalizer is not None else Normalizer()
    sampler = SamplerConfig(context_min=size, context_max=size, target_size=target_size)
    out = {}
    for t_idx, task in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, size, t_idx]))
        vals = []
        for _ in range(repeats):
            ctx, xs, fs = sample_context_target(task, sampler, rng)
            surrogate.reset([TrialRecord(x=ctx.xs[i], f=ctx.fs[i], h=ctx.hs[i])
                             for i in range(ctx.size)])
            preds = surrogate.predict_raw(xs)
            diff = norm.norm_f(np.array([p.mu for p in preds])) - norm.norm_f(fs)
            vals.append(float((diff ** 2).sum()))
        out[task.task_id] = float(np.mean(vals))
    return out


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregate_runs(traces: list[OptimizationTrace], thresholds=(0.5,)):
    """Per-trial summary: runs averaged within task first, then across tasks.

    Tasks with max_f == 0 are excluded from all metrics and counted in the
    returned summary. The solved fraction is over all (task, run) pairs.
    """
    if not traces:
        raise ValueError("aggregate_runs needs at least one trace")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ValueError(f"traces disagree on length: {sorted(lengths)}")
    n_trials = lengths.pop()

    excluded = sorted({t.task_id for t in traces if t.max_f == 0.0})
    kept = [t for t in traces if t.max_f != 0.0]
    if not kept:
        raise ValueError("all traces belong to max_f == 0 tasks")
    by_task: dict[str, list[OptimizationTrace]] = {}
    for t in kept:
        by_task.setdefault(t.task_id, []).append(t)

    rows = []
    for trial in range(n_trials):
        per_task_norm = []
        per_task_regret = []
        solved = {thr: 0 for thr in thresholds}
        n_pairs = 0
        for runs in by_task.values():
            per_task_norm.append(np.mean([r.best_f[trial] / r.max_f for r in runs]))
            per_task_regret.append(np.mean([r.regret[trial] for r in runs]))
            for r in runs:
                n_pairs += 1
                for thr in thresholds:
                    solved[thr] += int(r.regret[trial] <= thr)
        rows.append({
            "trial": trial,
            "mean_norm_best": float(np.mean(per_task_norm)),
            "mean_regret": float(np.mean(per_task_regret)),
            "frac_solved": {thr: solved[thr] / n_pairs for thr in thresholds},
        })
    summary = {"n_tasks": len(by_task), "n_excluded_max_f_zero": len(excluded),
               "excluded_task_ids": excluded, "runs_per_task":
               {tid: len(runs) for tid, runs in by_task.items()}}
    return rows, summary
