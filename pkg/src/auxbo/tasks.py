"""Synthetic task family, dataset persistence, and context/target sampling.

A task is a one-dimensional spring-damper rig with hidden parameters: the
design vector gains a feedback controller that must hold the load near its
grip offset while a stepped disturbance ramp pushes it away. The reward is
the last disturbance level fully survived; the auxiliary sequence is the
subsampled state trajectory, which reveals far more about the hidden rig than
the scalar reward does.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .autodiff import ContractViolationError
from .data import AuxSequence, ContextSet, TaskDataset, TrialRecord

THETA_RANGES = {
    "k": (0.5, 2.0),
    "c": (0.05, 0.6),
    "m": (0.5, 1.5),
    "g0": (-0.3, 0.3),
}

DESIGN_DIM = 4
N_LEVELS = 56
STEPS_PER_LEVEL = 20
DT = 0.05
AUX_CHANNELS = 4  # position, velocity, disturbance level, termination flag


class DatasetFormatError(ValueError):
    """A dataset file failed to parse; the message names line and field."""


@dataclass(frozen=True)
class Theta:
    """Hidden rig parameters; stored with generated tasks for analysis only."""

    k: float
    c: float
    m: float
    g0: float

    def __post_init__(self):
        for name, (lo, hi) in THETA_RANGES.items():
            val = getattr(self, name)
            if not lo <= val <= hi:
                raise ValueError(f"theta.{name}={val} outside [{lo}, {hi}]")

    def as_dict(self) -> dict:
        return {"k": self.k, "c": self.c, "m": self.m, "g0": self.g0}


@dataclass(frozen=True)
class SamplerConfig:
    """Context/target sampling rule for training and evaluation draws."""

    context_min: int = 5
    context_max: int = 30
    target_size: int = 100
    balanced: bool = True
    high_quantile: float = 0.8

    def __post_init__(self):
        if not (1 <= self.context_min <= self.context_max):
            raise ValueError("need 1 <= context_min <= context_max")
        if self.target_size < 1:
            raise ValueError("target_size must be positive")
        if not 0.0 < self.high_quantile < 1.0:
            raise ValueError("high_quantile must lie in (0, 1)")


def simulate_trial(theta: Theta, x, n_levels: int = N_LEVELS) -> TrialRecord:
    """Run one deterministic trial of design ``x`` on the rig ``theta``.

    The load starts at rest at the origin. Each raw step applies the control
    u = 2*tanh(x1 + x2*(s - g0) + x3*v + x4*sin(pi*s)) and integrates
    s' = s + dt*v, v' = v + (dt/m)*(-k*(s - g0) - c*v + u + F). The
    disturbance F starts at 0.5 and rises by 0.1 every 20 steps. The trial
    fails once |s - g0| > 1; the reward is the last level survived in full.
    The state is sampled every 20th raw step, plus the failure step.
    """
    xv = np.asarray(x, dtype=np.float64)
    x1, x2, x3, x4 = float(xv[0]), float(xv[1]), float(xv[2]), float(xv[3])
    k, c, m, g0 = theta.k, theta.c, theta.m, theta.g0
    dt = DT
    tanh_, sin_, pi = math.tanh, math.sin, math.pi

    s = 0.0
    v = 0.0
    rows: list[tuple[float, float, float, float]] = []
    survived = -1
    t = 0
    total = n_levels * STEPS_PER_LEVEL
    while t < total:
        level = 0.5 + 0.1 * (t // STEPS_PER_LEVEL)
        u = 2.0 * tanh_(x1 + x2 * (s - g0) + x3 * v + x4 * sin_(pi * s))
        s_next = s + dt * v
        v_next = v + (dt / m) * (-k * (s - g0) - c * v + u + level)
        s, v = s_next, v_next
        t += 1
        if abs(s - g0) > 1.0:
            rows.append((s, v, level, 1.0))
            break
        if t % STEPS_PER_LEVEL == 0:
            rows.append((s, v, level, 0.0))
            survived = t // STEPS_PER_LEVEL - 1
    f = 0.0 if survived < 0 else 0.5 + 0.1 * survived
    h = AuxSequence.from_rows(np.array(rows, dtype=np.float64).reshape(len(rows), AUX_CHANNELS))
    return TrialRecord(x=xv, f=f, h=h)


def _sample_theta(rng: np.random.Generator) -> Theta:
    vals = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in THETA_RANGES.items()}
    return Theta(**vals)


def _sample_pool(rng: np.random.Generator, pool_size: int) -> np.ndarray:
    xs = rng.uniform(-1.0, 1.0, size=(pool_size, DESIGN_DIM))
    # duplicates are measure-zero but the pool must be unique by contract
    while len({tuple(row) for row in xs}) < pool_size:
        xs = rng.uniform(-1.0, 1.0, size=(pool_size, DESIGN_DIM))
    return xs


def generate_tasks(seed: int, n_train: int, n_val: int, n_test: int,
                   pool_size: int) -> dict[str, list[TaskDataset]]:
    """Generate the benchmark as a pure function of (seed, counts, pool_size)."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, n in counts.items():
        if n < 1:
            raise ValueError(f"{split} task count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(sum(counts.values()))
    out: dict[str, list[TaskDataset]] = {}
    idx = 0
    for split, n in counts.items():
        tasks = []
        for i in range(n):
            rng = np.random.default_rng(children[idx])
            idx += 1
            theta = _sample_theta(rng)
            xs = _sample_pool(rng, pool_size)
            records = [simulate_trial(theta, xs[j]) for j in range(pool_size)]
            max_f = max(r.f for r in records)
            tasks.append(TaskDataset(
                task_id=f"{split}-{i:03d}", split=split, theta=theta,
                records=records, max_f=max_f,
            ))
        out[split] = tasks
    return out


def generation_summary(tasks_by_split: dict[str, list[TaskDataset]]) -> dict:
    """Counts and reward-distribution statistics for a generated benchmark."""
    all_f = np.concatenate([
        t.rewards() for split in ("train", "val", "test") for t in tasks_by_split[split]
    ])
    test_tasks = tasks_by_split["test"]
    qs = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0]
    return {
        "n_tasks": {s: len(tasks_by_split[s]) for s in ("train", "val", "test")},
        "pool_size": len(tasks_by_split["train"][0].records),
        "reward_quantiles": {str(q): float(np.quantile(all_f, q)) for q in qs},
        "zero_reward_fraction": float(np.mean(all_f == 0.0)),
        "test_fraction_max_f_ge_4": float(np.mean([t.max_f >= 4.0 for t in test_tasks])),
    }


def generate_benchmark(seed: int, n_train: int, n_val: int, n_test: int,
                       pool_size: int, out_dir: str) -> dict:
    """Generate and persist train/val/test files plus a summary; returns the summary."""
    tasks = generate_tasks(seed, n_train, n_val, n_test, pool_size)
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "val", "test"):
        write_tasks(os.path.join(out_dir, f"{split}.jsonl"), tasks[split])
    summary = generation_summary(tasks)
    summary["seed"] = seed
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _record_to_obj(r: TrialRecord) -> dict:
    return {"x": list(r.x), "f": r.f, "h": [list(row) for row in r.h.steps]}


def write_tasks(path: str, tasks: list[TaskDataset]) -> None:
    """One task per line; floats use shortest round-trip decimal form."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            obj = {
                "task_id": t.task_id,
                "split": t.split,
                "theta": t.theta.as_dict() if t.theta is not None else None,
                "max_f": t.max_f,
                "designs": [_record_to_obj(r) for r in t.records],
            }
            fh.write(json.dumps(obj) + "\n")


def load_tasks(path: str) -> list[TaskDataset]:
    """Parse a task file; malformed lines raise with the line number and field."""
    tasks: list[TaskDataset] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({e})") from e
            tasks.append(_parse_task(obj, lineno))
    return tasks


def _parse_task(obj: dict, lineno: int) -> TaskDataset:
    def need(field, typ):
        if field not in obj:
            raise DatasetFormatError(f"line {lineno}: missing field {field!r}")
        val = obj[field]
        if typ is not None and not isinstance(val, typ):
            raise DatasetFormatError(f"line {lineno}: field {field!r} has wrong type")
        return val

    task_id = need("task_id", str)
    split = need("split", str)
    if split not in ("train", "val", "test"):
        raise DatasetFormatError(f"line {lineno}: field 'split' must be train, val, or test")
    theta_obj = obj.get("theta")
    theta = None
    if theta_obj is not None:
        try:
            theta = Theta(**{k: float(theta_obj[k]) for k in ("k", "c", "m", "g0")})
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"line {lineno}: field 'theta' malformed ({e})") from e
    max_f = float(need("max_f", (int, float)))
    designs = need("designs", list)
    records = []
    dim = None
    channels = None
    seen = set()
    for j, d in enumerate(designs):
        try:
            x = np.asarray(d["x"], dtype=np.float64)
            f = float(d["f"])
            h = AuxSequence.from_rows(d["h"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"line {lineno}: field 'designs[{j}]' malformed ({e})") from e
        if dim is None:
            dim = x.shape[0]
        elif x.shape[0] != dim:
            raise DatasetFormatError(f"line {lineno}: field 'designs[{j}].x' has inconsistent dimension")
        if h.length:
            if channels is None:
                channels = h.channels
            elif h.channels != channels:
                raise DatasetFormatError(f"line {lineno}: field 'designs[{j}].h' has inconsistent channels")
        key = tuple(x)
        if key in seen:
            raise DatasetFormatError(f"line {lineno}: field 'designs[{j}].x' duplicates an earlier design")
        seen.add(key)
        records.append(TrialRecord(x=x, f=f, h=h))
    if records and abs(max_f - max(r.f for r in records)) > 0.0:
        raise DatasetFormatError(f"line {lineno}: field 'max_f' disagrees with records")
    return TaskDataset(task_id=task_id, split=split, theta=theta, records=records, max_f=max_f)


# ---------------------------------------------------------------------------
# context/target sampling
# ---------------------------------------------------------------------------


def split_strata(fs: np.ndarray, high_quantile: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the high-reward stratum (f >= quantile) and its complement."""
    thr = np.quantile(fs, high_quantile)
    high = np.flatnonzero(fs >= thr)
    low = np.flatnonzero(fs < thr)
    return high, low


def draw_balanced(fs: np.ndarray, n: int, rng: np.random.Generator,
                  high_quantile: float = 0.8, replace: bool = False) -> np.ndarray:
    """Draw n indices, each from the high stratum with probability 1/2.

    Without replacement, an exhausted stratum falls back to the other one.
    """
    high, low = split_strata(fs, high_quantile)
    if replace:
        picks = []
        for _ in range(n):
            use_high = rng.random() < 0.5
            pool = high if (use_high and high.size) or not low.size else low
            picks.append(int(pool[rng.integers(pool.size)]))
        return np.array(picks, dtype=np.int64)
    if n > fs.size:
        raise ContractViolationError(f"cannot draw {n} of {fs.size} records without replacement")
    hi = list(rng.permutation(high))
    lo = list(rng.permutation(low))
    picks = []
    for _ in range(n):
        use_high = rng.random() < 0.5
        if use_high and hi:
            picks.append(hi.pop())
        elif not use_high and lo:
            picks.append(lo.pop())
        elif hi:
            picks.append(hi.pop())
        else:
            picks.append(lo.pop())
    return np.array(picks, dtype=np.int64)


def sample_context_target(task: TaskDataset, cfg: SamplerConfig,
                          rng: np.random.Generator):
    """Draw a disjoint (context, target) pair from the task's record pool.

    Returns (ContextSet, target_xs, target_fs). The context size is uniform
    in [context_min, context_max]; the target size is fixed.
    """
    pool = len(task.records)
    if not cfg.context_max < pool - cfg.target_size:
        raise ContractViolationError(
            f"pool of {pool} too small for context_max={cfg.context_max}, target_size={cfg.target_size}")
    n_c = int(rng.integers(cfg.context_min, cfg.context_max + 1))
    n = n_c + cfg.target_size
    if cfg.balanced:
        idx = draw_balanced(task.rewards(), n, rng, cfg.high_quantile)
    else:
        idx = rng.permutation(pool)[:n]
    ctx_idx, tgt_idx = idx[:n_c], idx[n_c:]
    ctx = ContextSet.from_records([task.records[i] for i in ctx_idx])
    tgt_xs = np.stack([task.records[i].x for i in tgt_idx])
    tgt_fs = np.array([task.records[i].f for i in tgt_idx])
    return ctx, tgt_xs, tgt_fs


# ---------------------------------------------------------------------------
# benchmark health: hidden-parameter recovery from a single trajectory
# ---------------------------------------------------------------------------


def estimate_theta(x, h: AuxSequence, n_starts: int = 12, n_scan: int = 2048,
                   seed: int = 0) -> Theta:
    """Fit the hidden rig parameters to one observed trajectory.

    Nonlinear least squares against the trial dynamics: candidate parameters
    are simulated forward (only as far as the observation covers) and their
    sampled trajectory is compared to the observed one. A coarse random scan
    seeds the descent starts so short trajectories land in the right basin.
    """
    obs = h.steps
    n_obs = obs.shape[0]
    cap_levels = min(N_LEVELS, n_obs + 1)

    def residuals(p):
        theta = Theta(
            k=float(np.clip(p[0], *THETA_RANGES["k"])),
            c=float(np.clip(p[1], *THETA_RANGES["c"])),
            m=float(np.clip(p[2], *THETA_RANGES["m"])),
            g0=float(np.clip(p[3], *THETA_RANGES["g0"])),
        )
        sim = simulate_trial(theta, x, n_levels=cap_levels).h.steps
        if sim.shape[0] < n_obs:  # pad so the residual length stays fixed
            pad = np.repeat(sim[-1:], n_obs - sim.shape[0], axis=0)
            sim = np.vstack([sim, pad])
        res = (sim[:n_obs, :3] - obs[:, :3]).reshape(-1)
        miss = abs(sim.shape[0] - n_obs)
        return np.concatenate([res, [2.0 * miss]])

    rng = np.random.default_rng(seed)
    lo = np.array([THETA_RANGES[k][0] for k in ("k", "c", "m", "g0")])
    hi = np.array([THETA_RANGES[k][1] for k in ("k", "c", "m", "g0")])
    candidates = lo + (hi - lo) * rng.random((n_scan, 4))
    candidates[0] = 0.5 * (lo + hi)
    costs = [float(np.sum(residuals(p) ** 2)) for p in candidates]
    order = np.argsort(costs)[:n_starts]

    best = None
    best_cost = np.inf
    for idx in order:
        sol = least_squares(residuals, candidates[idx], bounds=(lo, hi), method="trf",
                            diff_step=1e-4, xtol=1e-12, ftol=1e-12, max_nfev=300)
        if sol.cost < best_cost:
            best_cost = sol.cost
            best = sol.x
        if best_cost < 1e-16:
            break
    return Theta(k=float(best[0]), c=float(best[1]), m=float(best[2]), g0=float(best[3]))
