"""Plain data containers shared by the surrogate, baselines, and engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AuxSequence:
    """Variable-length per-trial observation sequence, one channel vector per step.

    The last channel is the termination flag: 0 until the trial ends early,
    1 from that step on. ``terminated_at`` is the index of the first flagged
    step, or None for sequences that ran to completion.
    """

    steps: np.ndarray  # [length, channels]
    terminated_at: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.steps, dtype=np.float64)
        if arr.ndim != 2:
            arr = arr.reshape(0, 0) if arr.size == 0 else np.atleast_2d(arr)
        object.__setattr__(self, "steps", arr)

    @property
    def length(self) -> int:
        return self.steps.shape[0]

    @property
    def channels(self) -> int:
        return self.steps.shape[1]

    @classmethod
    def from_rows(cls, rows) -> "AuxSequence":
        arr = np.asarray(rows, dtype=np.float64)
        if arr.size == 0:
            return cls(steps=np.zeros((0, 0)), terminated_at=None)
        flags = arr[:, -1]
        hit = np.flatnonzero(flags >= 0.5)
        return cls(steps=arr, terminated_at=int(hit[0]) if hit.size else None)


@dataclass(frozen=True)
class TrialRecord:
    """One evaluated design: input vector, scalar reward, auxiliary sequence."""

    x: np.ndarray
    f: float
    h: AuxSequence

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "f", float(self.f))


@dataclass
class TaskDataset:
    """All pre-evaluated trials for one task plus generator metadata."""

    task_id: str
    split: str
    theta: "object | None"
    records: list[TrialRecord]
    max_f: float

    @property
    def input_dim(self) -> int:
        return int(self.records[0].x.shape[0])

    @property
    def aux_channels(self) -> int:
        for r in self.records:
            if r.h.length:
                return r.h.channels
        return 0

    def rewards(self) -> np.ndarray:
        return np.array([r.f for r in self.records])

    def designs(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])


@dataclass(frozen=True)
class ContextSet:
    """Ordered few-shot conditioning set of (x, f, h) observations."""

    xs: np.ndarray          # [n, input_dim]
    fs: np.ndarray          # [n]
    hs: tuple[AuxSequence, ...]

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        fs = np.asarray(self.fs, dtype=np.float64).reshape(-1)
        if xs.shape[0] != fs.shape[0] or xs.shape[0] != len(self.hs):
            raise ValueError("context arrays disagree on size")
        if xs.shape[0] < 1:
            raise ValueError("context set must contain at least one observation")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)
        object.__setattr__(self, "hs", tuple(self.hs))

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    @classmethod
    def from_records(cls, records) -> "ContextSet":
        records = list(records)
        return cls(
            xs=np.stack([r.x for r in records]),
            fs=np.array([r.f for r in records]),
            hs=tuple(r.h for r in records),
        )

    def appended(self, record: TrialRecord) -> "ContextSet":
        return ContextSet(
            xs=np.vstack([self.xs, record.x[None, :]]),
            fs=np.append(self.fs, record.f),
            hs=self.hs + (record.h,),
        )


@dataclass(frozen=True)
class TargetInputs:
    """Ordered query designs whose rewards are to be predicted."""

    xs: np.ndarray  # [n, input_dim]

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        if xs.shape[0] < 1:
            raise ValueError("target set must contain at least one design")
        object.__setattr__(self, "xs", xs)

    @property
    def size(self) -> int:
        return self.xs.shape[0]


@dataclass(frozen=True)
class GaussianPrediction:
    """Predicted reward distribution N(mu, sigma^2) for a single design."""

    mu: float
    sigma: float


@dataclass
class OptimizationTrace:
    """Per-trial history of one optimization run on one task."""

    task_id: str
    seed: int
    surrogate: str
    acquisition: str
    max_f: float
    selected_index: list[int] = field(default_factory=list)
    observed_f: list[float] = field(default_factory=list)
    best_f: list[float] = field(default_factory=list)
    regret: list[float] = field(default_factory=list)
    init_fallback: bool = False

    def append(self, index: int, f: float) -> None:
        best = f if not self.best_f else max(self.best_f[-1], f)
        self.selected_index.append(int(index))
        self.observed_f.append(float(f))
        self.best_f.append(float(best))
        self.regret.append(float(self.max_f - best))

    def __len__(self) -> int:
        return len(self.selected_index)
