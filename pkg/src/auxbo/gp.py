"""Gaussian-process baselines.

Two surrogates live here: a single-task GP refit from scratch on whatever
context is available at test time (MAP fit with a dimension-scaled
log-normal lengthscale prior), and a deep-kernel GP whose neural encoder,
linear mean, and kernel hyperparameters are trained jointly across the task
history and then frozen.

Posteriors are exact (Cholesky); hyperparameters are optimized in log space
by gradient ascent with the marginal likelihood differentiated through the
Cholesky factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFailureError, Tensor
from .checkpoint import CheckpointConfigError, load_checkpoint, save_checkpoint
from .data import GaussianPrediction, TaskDataset
from .model import Normalizer
from .nn import Linear, Module
from .optim import AdamW
from .tasks import draw_balanced

KERNEL_FAMILIES = ("rbf", "matern52")
LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelConfig:
    family: str = "rbf"
    lengthscales: np.ndarray = field(default_factory=lambda: np.ones(1))
    signal_variance: float = 1.0
    noise_variance: float = 0.1
    jitter: float = 1e-6

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"kernel family must be one of {KERNEL_FAMILIES}")
        ls = np.asarray(self.lengthscales, dtype=np.float64)
        if np.any(ls <= 0) or self.signal_variance <= 0 or self.noise_variance <= 0 or self.jitter <= 0:
            raise ValueError("kernel hyperparameters must be strictly positive")
        object.__setattr__(self, "lengthscales", ls)


def kernel_eval(cfg: KernelConfig, x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Dense cross-covariance matrix under an ARD kernel."""
    x = np.atleast_2d(x)
    x2 = np.atleast_2d(x2)
    if x.shape[1] != cfg.lengthscales.shape[0] or x2.shape[1] != cfg.lengthscales.shape[0]:
        raise ValueError("input dimension does not match the ARD lengthscale vector")
    diff = (x[:, None, :] - x2[None, :, :]) / cfg.lengthscales
    r2 = np.sum(diff * diff, axis=2)
    if cfg.family == "rbf":
        return cfg.signal_variance * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    s5 = math.sqrt(5.0)
    return cfg.signal_variance * (1.0 + s5 * r + (5.0 / 3.0) * r2) * np.exp(-s5 * r)


def _chol_with_escalation(k_noisy: np.ndarray, jitter: float):
    """Cholesky with jitter escalation (x10, at most 3 retries)."""
    if not np.all(np.isfinite(k_noisy)):
        raise NumericFailureError("Gram matrix contains non-finite entries")
    n = k_noisy.shape[0]
    last = None
    for attempt in range(4):
        try:
            return np.linalg.cholesky(k_noisy + (jitter * 10.0 ** attempt) * np.eye(n))
        except np.linalg.LinAlgError as e:
            last = e
    raise NumericFailureError(f"Cholesky failed after jitter escalation: {last}")


def gp_posterior(cfg: KernelConfig, train: tuple[np.ndarray, np.ndarray],
                 query: np.ndarray, mean_train: np.ndarray | None = None,
                 mean_query: np.ndarray | None = None) -> list[GaussianPrediction]:
    """Exact GP posterior at the query designs (zero mean unless given)."""
    x, y = train
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    query = np.atleast_2d(query)
    m_t = np.zeros(y.shape[0]) if mean_train is None else mean_train
    m_q = np.zeros(query.shape[0]) if mean_query is None else mean_query

    k_tt = kernel_eval(cfg, x, x) + cfg.noise_variance * np.eye(x.shape[0])
    chol = _chol_with_escalation(k_tt, cfg.jitter)
    resid = y - m_t
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
    k_qt = kernel_eval(cfg, query, x)
    mu = m_q + k_qt @ alpha
    v = np.linalg.solve(chol, k_qt.T)
    var = cfg.signal_variance - np.sum(v * v, axis=0) + cfg.noise_variance
    var = np.maximum(var, 1e-12)
    return [GaussianPrediction(mu=float(m), sigma=float(s)) for m, s in zip(mu, np.sqrt(var))]


# ---------------------------------------------------------------------------
# marginal likelihood graphs (autodiff through the Cholesky)
# ---------------------------------------------------------------------------


def _r2_from_const(diff2: np.ndarray, log_ls: Tensor) -> Tensor:
    n, _, d = diff2.shape
    inv = ad.exp(log_ls * Tensor(-2.0))
    flat = Tensor(np.ascontiguousarray(diff2.reshape(n * n, d)))
    return ad.reshape(ad.matmul(flat, ad.reshape(inv, (d, 1))), (n, n))


def _kernel_tensor(family: str, r2: Tensor, log_sf: Tensor) -> Tensor:
    sf2 = ad.exp(log_sf * Tensor(2.0))
    if family == "rbf":
        return sf2 * ad.exp(r2 * Tensor(-0.5))
    s5 = math.sqrt(5.0)
    r = ad.sqrt(r2 + Tensor(1e-24))  # eps keeps the diagonal differentiable
    poly = Tensor(1.0) + r * Tensor(s5) + r2 * Tensor(5.0 / 3.0)
    return sf2 * poly * ad.exp(r * Tensor(-s5))


def _lml_from_kernel(k: Tensor, resid: Tensor, log_sn: Tensor, jitter: float) -> Tensor:
    """log p(y | X, theta) for a centered GP with noisy observations."""
    n = k.shape[0]
    noise = ad.exp(log_sn * Tensor(2.0)) + Tensor(jitter)
    k_noisy = k + Tensor(np.eye(n)) * noise
    chol = ad.cholesky(k_noisy)
    y_col = ad.reshape(resid, (n, 1))
    alpha = ad.solve_triangular(chol, ad.solve_triangular(chol, y_col), trans=True)
    quad = (y_col * alpha).sum()
    logdet = ad.log(ad.diagonal(chol)).sum()
    return quad * Tensor(-0.5) - logdet - Tensor(0.5 * n * LOG2PI)


def log_marginal_likelihood(cfg: KernelConfig, x: np.ndarray, y: np.ndarray) -> float:
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    diff = x[:, None, :] - x[None, :, :]
    with ad.no_grad():
        r2 = _r2_from_const(diff * diff, Tensor(np.log(cfg.lengthscales)))
        k = _kernel_tensor(cfg.family, r2, Tensor(0.5 * math.log(cfg.signal_variance)))
        lml = _lml_from_kernel(k, Tensor(y), Tensor(0.5 * math.log(cfg.noise_variance)), cfg.jitter)
    return lml.item()


# ---------------------------------------------------------------------------
# single-task GP fitting
# ---------------------------------------------------------------------------


def fit_stgp(x: np.ndarray, y: np.ndarray, family: str = "rbf", restarts: int = 4,
             iters: int = 100, lr: float = 0.08, seed: int = 0,
             jitter: float = 1e-6, prior_scale: float = 1.0) -> KernelConfig:
    """MAP-fit kernel hyperparameters to a single context by gradient ascent.

    The lengthscales carry a log-normal prior with median sqrt(d) and the
    given log-scale; signal and noise variances are unpenalized. Each seeded
    restart ascends the penalized objective with Adam and keeps its best
    iterate; the best restart wins.
    """
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = x.shape
    if n < 2:
        raise ValueError("fit_stgp needs at least 2 observations")
    diff = x[:, None, :] - x[None, :, :]
    diff2 = diff * diff
    y_std = float(y.std())
    y_scale = y_std if y_std > 1e-8 else 1.0
    log_median = 0.5 * math.log(d)

    rng = np.random.default_rng(seed)
    best_obj = -np.inf
    best_params = None
    last_failure = None
    for restart in range(restarts):
        if restart == 0:
            init_ls = np.full(d, log_median)
        else:
            init_ls = log_median + rng.uniform(-1.0, 1.0, size=d)
        log_ls = Tensor(init_ls, requires_grad=True, name="log_ls")
        log_sf = Tensor(np.log(y_scale) + (0.0 if restart == 0 else rng.uniform(-0.5, 0.5)),
                        requires_grad=True, name="log_sf")
        log_sn = Tensor(np.log(0.1 * y_scale + 1e-4) + (0.0 if restart == 0 else rng.uniform(-0.5, 0.5)),
                        requires_grad=True, name="log_sn")
        params = {"log_ls": log_ls, "log_sf": log_sf, "log_sn": log_sn}
        opt = AdamW(params, lr=lr, weight_decay=0.0)

        def objective():
            r2 = _r2_from_const(diff2, log_ls)
            k = _kernel_tensor(family, r2, log_sf)
            lml = _lml_from_kernel(k, Tensor(y), log_sn, jitter)
            pen = ((log_ls - Tensor(log_median)) * (log_ls - Tensor(log_median))).sum()
            return lml - pen * Tensor(0.5 / (prior_scale * prior_scale))

        try:
            restart_best = -np.inf
            stale = 0
            for _ in range(iters + 1):
                obj = objective()
                val = obj.item()
                if np.isfinite(val) and val > best_obj:
                    best_obj = val
                    best_params = (log_ls.data.copy(), float(log_sf.data), float(log_sn.data))
                if np.isfinite(val) and val > restart_best + 1e-6:
                    restart_best = val
                    stale = 0
                else:
                    stale += 1
                    if stale >= 12:  # ascent has flattened out
                        break
                grads = ad.backward(obj * Tensor(-1.0), params=list(params.values()))
                opt.step(grads)
        except NumericFailureError as e:
            last_failure = e
            continue
    if best_params is None:
        raise NumericFailureError(f"all fit restarts failed: {last_failure}")
    log_ls_v, log_sf_v, log_sn_v = best_params
    return KernelConfig(
        family=family,
        lengthscales=np.exp(log_ls_v),
        signal_variance=float(np.exp(2.0 * log_sf_v)),
        noise_variance=float(np.exp(2.0 * log_sn_v)),
        jitter=jitter,
    )


def stgp_objective(cfg: KernelConfig, x: np.ndarray, y: np.ndarray,
                   prior_scale: float = 1.0) -> float:
    """The penalized objective fit_stgp ascends, for a given hyperparameter set."""
    d = np.atleast_2d(x).shape[1]
    log_median = 0.5 * math.log(d)
    pen = float(np.sum((np.log(cfg.lengthscales) - log_median) ** 2))
    return log_marginal_likelihood(cfg, x, y) - 0.5 * pen / (prior_scale * prior_scale)


# ---------------------------------------------------------------------------
# deep-kernel GP trained across tasks
# ---------------------------------------------------------------------------


class DeepKernelModel(Module):
    """GP with a learned MLP embedding, linear mean, and ARD kernel on embeddings."""

    def __init__(self, input_dim: int, embedding_dim: int, family: str = "rbf",
                 hidden: int = 64, seed: int = 0):
        super().__init__()
        if family not in KERNEL_FAMILIES:
            raise ValueError(f"kernel family must be one of {KERNEL_FAMILIES}")
        self.input_dim = input_dim
        self.embedding_dim = embedding_dim
        self.family = family
        self.hidden = hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD6B]))
        self.enc1 = self.child(Linear(rng, "enc.l1", input_dim, hidden))
        self.enc2 = self.child(Linear(rng, "enc.l2", hidden, hidden))
        self.enc3 = self.child(Linear(rng, "enc.l3", hidden, hidden))
        self.enc_out = self.child(Linear(rng, "enc.out", hidden, embedding_dim))
        self.mean_w = self.register("mean.w", rng.normal(0.0, 0.1, size=(embedding_dim, 1)))
        self.log_ls = self.register("kernel.log_ls", np.zeros(embedding_dim))
        self.log_sf = self.register("kernel.log_sf", np.zeros(()))
        self.log_sn = self.register("kernel.log_sn", np.array(math.log(0.3)))
        self.jitter = 1e-6

    def encode(self, x: Tensor) -> Tensor:
        h = ad.gelu(self.enc1(x))
        h = ad.gelu(self.enc2(h))
        h = ad.gelu(self.enc3(h))
        return self.enc_out(h)

    def mean_value(self, emb: Tensor) -> Tensor:
        return ad.matmul(emb, self.mean_w)

    def joint_lml(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        """Differentiable joint log marginal likelihood of one sampled batch."""
        n = x.shape[0]
        emb = self.encode(Tensor(x))
        e1 = ad.reshape(emb, (n, 1, self.embedding_dim))
        e2 = ad.reshape(emb, (1, n, self.embedding_dim))
        diff = e1 - e2
        inv = ad.exp(self.log_ls * Tensor(-2.0))
        r2 = (diff * diff * inv).sum(axis=2)
        k = _kernel_tensor(self.family, r2, self.log_sf)
        resid = Tensor(y) - ad.reshape(self.mean_value(emb), (n,))
        return _lml_from_kernel(k, resid, self.log_sn, self.jitter)

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(
            family=self.family,
            lengthscales=np.exp(self.log_ls.data),
            signal_variance=float(np.exp(2.0 * self.log_sf.data)),
            noise_variance=float(np.exp(2.0 * self.log_sn.data)),
            jitter=self.jitter,
        )

    def posterior(self, x_ctx: np.ndarray, y_ctx: np.ndarray,
                  x_query: np.ndarray) -> list[GaussianPrediction]:
        """Condition the frozen learned prior on (x, f) context only."""
        with ad.no_grad():
            e_ctx = self.encode(Tensor(np.atleast_2d(x_ctx)))
            e_qry = self.encode(Tensor(np.atleast_2d(x_query)))
            m_ctx = self.mean_value(e_ctx).data.reshape(-1)
            m_qry = self.mean_value(e_qry).data.reshape(-1)
        return gp_posterior(self.kernel_config(), (e_ctx.data, y_ctx), e_qry.data,
                            mean_train=m_ctx, mean_query=m_qry)

    def save(self, path: str, normalizer: Normalizer | None = None) -> None:
        save_checkpoint(
            path, kind="dgp",
            config={"input_dim": self.input_dim, "embedding_dim": self.embedding_dim,
                    "family": self.family, "hidden": self.hidden},
            extra={"normalizer": (normalizer or Normalizer()).as_dict()},
            params={name: t.data for name, t in self.params().items()},
        )


def load_dgp(path: str) -> tuple[DeepKernelModel, Normalizer]:
    kind, config, extra, params = load_checkpoint(path, expect_kind="dgp")
    model = DeepKernelModel(**config)
    own = model.params()
    if set(own) != set(params):
        raise CheckpointConfigError(f"{path}: parameter set mismatch")
    for name, tensor in own.items():
        if params[name].shape != tensor.data.shape:
            raise CheckpointConfigError(f"{path}: parameter {name!r} shape mismatch")
        tensor.data = np.ascontiguousarray(params[name])
    return model, Normalizer.from_dict(extra["normalizer"])


def _dgp_validation_ll(model: DeepKernelModel, samples: list[tuple[np.ndarray, np.ndarray]]) -> float:
    total = 0.0
    with ad.no_grad():
        for x, y in samples:
            total += model.joint_lml(x, y).item()
    return total / len(samples)


def _draw_task_sample(task: TaskDataset, normalizer: Normalizer, size: int,
                      rng: np.random.Generator, quantile: float = 0.8):
    fs = task.rewards()
    replace = len(task.records) < size
    idx = draw_balanced(fs, size, rng, high_quantile=quantile, replace=replace)
    x = task.designs()[idx]
    y = normalizer.norm_f(fs[idx])
    return x, y


def train_dgp(train_tasks: list[TaskDataset], val_tasks: list[TaskDataset],
              epochs: int = 40, sample_size: int = 50, batch_tasks: int = 8,
              lr: float = 1e-4, weight_decay: float = 0.01, patience: int = 8,
              seed: int = 0, families=KERNEL_FAMILIES,
              embedding_dims=(8, 16, 32), hidden: int = 64,
              normalizer: Normalizer | None = None):
    """Fit the shared deep-kernel GP, grid-searching family and embedding size.

    Every grid cell trains with the same budget (balanced 50-point task
    samples, one optimizer step per task batch, early stopping on held-out
    joint log-likelihood); the cell with the best validation score wins.
    Returns (model, normalizer, log rows).
    """
    if not train_tasks:
        raise ValueError("train_dgp needs at least one training task")
    norm = normalizer if normalizer is not None else Normalizer.from_tasks(train_tasks)
    input_dim = train_tasks[0].input_dim

    val_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    val_samples = [_draw_task_sample(t, norm, sample_size, val_rng) for t in val_tasks]

    best_model = None
    best_val = -np.inf
    log_rows = []
    for family in families:
        for emb in embedding_dims:
            model = DeepKernelModel(input_dim, emb, family=family, hidden=hidden, seed=seed)
            params = model.params()
            plist = list(params.values())
            opt = AdamW(params, lr=lr, weight_decay=weight_decay)
            order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A2]))
            draw_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
            cell_best_val = -np.inf
            cell_best = None
            stale = 0
            for epoch in range(epochs):
                order = order_rng.permutation(len(train_tasks))
                epoch_nll = 0.0
                n_batches = 0
                for start in range(0, len(order), batch_tasks):
                    chunk = order[start:start + batch_tasks]
                    loss = None
                    for ti in chunk:
                        x, y = _draw_task_sample(train_tasks[ti], norm, sample_size, draw_rng)
                        nll = model.joint_lml(x, y) * Tensor(-1.0 / len(chunk))
                        loss = nll if loss is None else loss + nll
                    epoch_nll += loss.item()
                    n_batches += 1
                    opt.step(ad.backward(loss, params=plist))
                val_ll = _dgp_validation_ll(model, val_samples)
                improved_globally = val_ll > best_val and val_ll > cell_best_val
                log_rows.append({"family": family, "embedding_dim": emb, "epoch": epoch,
                                 "train_nll": epoch_nll / max(n_batches, 1),
                                 "val_nll": -val_ll, "best_flag": int(improved_globally)})
                if val_ll > cell_best_val:
                    cell_best_val = val_ll
                    cell_best = {n: t.data.copy() for n, t in params.items()}
                    stale = 0
                else:
                    stale += 1
                    if stale > patience:
                        break
            if cell_best is not None:
                for n, t in params.items():
                    t.data = cell_best[n]
            if cell_best_val > best_val:
                best_val = cell_best_val
                best_model = model
    return best_model, norm, log_rows
