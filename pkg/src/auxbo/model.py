"""Few-shot reward surrogate: a set transformer over evaluated designs.

Context observations are (x, f, h) triples. In the ``aux`` variant each h
sequence passes through a small temporal transformer whose leading readout
token is added to an embedding of (x, f) to form the context token; the
``reward_only`` variant embeds (x, f) alone. Context tokens and target
tokens then enter a predictor transformer with no positional encodings,
whose attention lets context tokens see each other while target tokens see
only context. Each target's final representation maps to a Gaussian over
the (standardized) reward.

All predictions are in standardized reward units; the standardization
statistics are computed once from the training split and stored with the
model checkpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolationError, Tensor
from .checkpoint import (
    CheckpointConfigError,
    load_checkpoint,
    save_checkpoint,
)
from .data import AuxSequence, ContextSet, GaussianPrediction, TargetInputs, TaskDataset
from .nn import Linear, MLP, Module, TransformerStack

VARIANTS = ("aux", "reward_only")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    aux_channels: int
    model_dim: int = 64
    predictor_layers: int = 4
    sequence_encoder_layers: int = 2
    heads: int = 4
    dropout_rate: float = 0.1
    sigma_floor: float = 1e-3
    variant: str = "aux"

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass
class Normalizer:
    """Per-benchmark standardization of rewards and aux channels."""

    f_mean: float = 0.0
    f_std: float = 1.0
    h_mean: np.ndarray | None = None
    h_std: np.ndarray | None = None

    @classmethod
    def from_tasks(cls, tasks: list[TaskDataset]) -> "Normalizer":
        fs = np.concatenate([t.rewards() for t in tasks])
        rows = [r.h.steps for t in tasks for r in t.records if r.h.length]
        if rows:
            allh = np.concatenate(rows, axis=0)
            h_mean = allh.mean(axis=0)
            h_std = allh.std(axis=0)
            h_std[h_std < 1e-12] = 1.0
        else:
            h_mean = h_std = None
        f_std = float(fs.std())
        return cls(f_mean=float(fs.mean()), f_std=f_std if f_std > 1e-12 else 1.0,
                   h_mean=h_mean, h_std=h_std)

    def norm_f(self, f: np.ndarray) -> np.ndarray:
        return (np.asarray(f, dtype=np.float64) - self.f_mean) / self.f_std

    def denorm_mu(self, mu: float) -> float:
        return mu * self.f_std + self.f_mean

    def denorm_sigma(self, sigma: float) -> float:
        return sigma * self.f_std

    def norm_h(self, steps: np.ndarray) -> np.ndarray:
        if self.h_mean is None or steps.size == 0:
            return steps
        return (steps - self.h_mean) / self.h_std

    def as_dict(self) -> dict:
        return {
            "f_mean": self.f_mean,
            "f_std": self.f_std,
            "h_mean": None if self.h_mean is None else list(self.h_mean),
            "h_std": None if self.h_std is None else list(self.h_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            f_mean=float(d["f_mean"]),
            f_std=float(d["f_std"]),
            h_mean=None if d.get("h_mean") is None else np.asarray(d["h_mean"], dtype=np.float64),
            h_std=None if d.get("h_std") is None else np.asarray(d["h_std"], dtype=np.float64),
        )


class FewShotSurrogate(Module):
    """The trainable surrogate; see the module docstring for the layout."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 normalizer: Normalizer | None = None):
        super().__init__()
        self.config = config
        self.normalizer = normalizer if normalizer is not None else Normalizer()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0B0]))
        d = config.model_dim
        xf_dim = config.input_dim + 1
        if config.variant == "aux":
            self.h_embed = self.child(Linear(rng, "seq.h_embed", config.aux_channels, d))
            self.seq_xf_token = self.child(Linear(rng, "seq.xf_token", xf_dim, d))
            self.cls = self.register("seq.cls", rng.normal(0.0, 0.02, size=d))
            self.seq_encoder = self.child(TransformerStack(
                rng, "seq.encoder", d, config.heads, config.sequence_encoder_layers))
            self.ctx_xf_embed = self.child(Linear(rng, "ctx.xf_embed", xf_dim, d))
        else:
            self.ctx_xf_embed = self.child(Linear(rng, "ctx.xf_embed", xf_dim, d))
        self.tgt_encoder = self.child(Linear(rng, "tgt.encoder", config.input_dim, d))
        self.predictor = self.child(TransformerStack(
            rng, "predictor", d, config.heads, config.predictor_layers))
        self.head = self.child(MLP(rng, "head", d, d, 2))
        self._pe_cache: np.ndarray = ad.sinusoidal_table(64, d)

    # -- encoding ----------------------------------------------------------

    def _pe(self, length: int) -> np.ndarray:
        if self._pe_cache.shape[0] < length:
            self._pe_cache = ad.sinusoidal_table(length, self.config.model_dim)
        return self._pe_cache[:length]

    def _pad_sequences(self, hs) -> tuple[np.ndarray, np.ndarray]:
        """Stack normalized variable-length sequences; returns (batch, valid mask).

        An empty sequence stands in as a single all-zero step with the
        termination flag set (degenerate-trial convention).
        """
        ch = self.config.aux_channels
        degenerate = np.zeros(ch)
        degenerate[-1] = 1.0
        rows = []
        for h in hs:
            if h.length == 0:
                rows.append(degenerate[None, :])
            else:
                if h.channels != ch:
                    raise ContractViolationError(
                        f"aux sequence has {h.channels} channels, model expects {ch}")
                rows.append(h.steps)
        maxlen = max(r.shape[0] for r in rows)
        batch = np.zeros((len(rows), maxlen, ch))
        valid = np.zeros((len(rows), maxlen), dtype=bool)
        for i, r in enumerate(rows):
            batch[i, :r.shape[0]] = self.normalizer.norm_h(r)
            valid[i, :r.shape[0]] = True
        return batch, valid

    def _encode_contexts(self, ctx: ContextSet, drop: float,
                         rng: np.random.Generator | None) -> Tensor:
        if ctx.xs.shape[1] != self.config.input_dim:
            raise ContractViolationError(
                f"context design dim {ctx.xs.shape[1]} != model input_dim {self.config.input_dim}")
        xf = np.concatenate([ctx.xs, self.normalizer.norm_f(ctx.fs)[:, None]], axis=1)
        xf_t = Tensor(xf)
        if self.config.variant == "reward_only":
            return self.ctx_xf_embed(xf_t)
        n = ctx.size
        d = self.config.model_dim
        batch, valid = self._pad_sequences(ctx.hs)
        length = batch.shape[1]
        h_tok = self.h_embed(Tensor(batch)) + Tensor(self._pe(length))
        special = ad.reshape(self.seq_xf_token(xf_t), (n, 1, d))
        cls = ad.reshape(self.cls, (1, 1, d)) + Tensor(np.zeros((n, 1, d)))
        seq = ad.concat([cls, special, h_tok], axis=1)
        keys_valid = np.concatenate([np.ones((n, 2), dtype=bool), valid], axis=1)
        mask = np.broadcast_to(keys_valid[:, None, :], (n, length + 2, length + 2))
        enc = self.seq_encoder(seq, mask, drop, rng)
        e_seq = ad.take(enc, (slice(None), 0, slice(None)))
        return e_seq + self.ctx_xf_embed(xf_t)

    def encode_context_point(self, x, f: float, h: AuxSequence) -> np.ndarray:
        """Deterministic embedding of a single context observation (eval mode)."""
        ctx = ContextSet(xs=np.asarray(x, dtype=np.float64)[None, :],
                         fs=np.array([f]), hs=(h,))
        with ad.no_grad():
            return self._encode_contexts(ctx, 0.0, None).data[0].copy()

    # -- prediction --------------------------------------------------------

    def _forward(self, ctx: ContextSet, tgt_xs: np.ndarray, drop: float,
                 rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        tgt_xs = np.atleast_2d(np.asarray(tgt_xs, dtype=np.float64))
        if tgt_xs.shape[1] != self.config.input_dim:
            raise ContractViolationError(
                f"target design dim {tgt_xs.shape[1]} != model input_dim {self.config.input_dim}")
        n_c = ctx.size
        n_t = tgt_xs.shape[0]
        e_ctx = self._encode_contexts(ctx, drop, rng)
        e_tgt = self.tgt_encoder(Tensor(tgt_xs))
        tokens = ad.concat([e_ctx, e_tgt], axis=0)
        mask = np.zeros((n_c + n_t, n_c + n_t), dtype=bool)
        mask[:, :n_c] = True
        out = self.predictor(tokens, mask, drop, rng)
        reps = ad.take(out, (slice(n_c, None), slice(None)))
        head = self.head(reps)
        mu = ad.take(head, (slice(None), 0))
        sigma = ad.softplus(ad.take(head, (slice(None), 1))) + Tensor(self.config.sigma_floor)
        return mu, sigma

    def predict(self, ctx: ContextSet, targets: TargetInputs) -> list[GaussianPrediction]:
        """Gaussian reward predictions (standardized units) for each target design."""
        with ad.no_grad():
            mu, sigma = self._forward(ctx, targets.xs, 0.0, None)
        return [GaussianPrediction(mu=float(m), sigma=float(s))
                for m, s in zip(mu.data, sigma.data)]

    def nll_loss(self, ctx: ContextSet, tgt_xs: np.ndarray, tgt_fs: np.ndarray,
                 rng: np.random.Generator | None = None,
                 drop: float | None = None) -> Tensor:
        """Summed Gaussian negative log likelihood of the targets' rewards."""
        drop = self.config.dropout_rate if drop is None else drop
        if rng is None:
            drop = 0.0
        mu, sigma = self._forward(ctx, tgt_xs, drop, rng)
        f_norm = self.normalizer.norm_f(np.asarray(tgt_fs, dtype=np.float64).reshape(-1))
        return ad.gaussian_nll(Tensor(f_norm), mu, sigma).sum()

    # -- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        save_checkpoint(
            path, kind="tnp", config=asdict(self.config),
            extra={"normalizer": self.normalizer.as_dict()},
            params={name: t.data for name, t in self.params().items()},
        )


def load_model(path: str, expect_variant: str | None = None) -> FewShotSurrogate:
    """Load a surrogate checkpoint; parameters round-trip bit-exactly."""
    kind, config, extra, params = load_checkpoint(path, expect_kind="tnp")
    try:
        cfg = ModelConfig(**config)
    except (TypeError, ValueError) as e:
        raise CheckpointConfigError(f"{path}: invalid model config ({e})") from e
    if expect_variant is not None and cfg.variant != expect_variant:
        raise CheckpointConfigError(
            f"{path}: checkpoint variant {cfg.variant!r} conflicts with requested {expect_variant!r}")
    model = FewShotSurrogate(cfg, seed=0, normalizer=Normalizer.from_dict(extra["normalizer"]))
    own = model.params()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointConfigError(f"{path}: parameter set mismatch near {missing[:3]}")
    for name, tensor in own.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointConfigError(
                f"{path}: parameter {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr)
    return model
