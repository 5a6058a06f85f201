"""Composite evidential loss, gradient checks, the training loop and the two-phase sweep.

Gradients come from torch autograd in float64; :mod:`prescribe.math_niw` is the
numpy reference the differentiable closed forms are tested against.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import _torch_niw as tn
from .data import PerturbationDataset, split_key
from .edistance import BandMap
from .errors import DivergenceError, DomainError, NumericalError
from .math_niw import Mode, NIWParams, niw_entropy, niw_expected_loglik
from .network import DTYPE, ModelConfig, PrescribeModel, build_model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch: int = 4096
    grad_accum: int = 4
    epochs: int = 50
    patience: int = 3
    warmup_epochs: int = 5
    warmup_lr: float = 1e-3
    plateau_factor: float = 0.99
    plateau_patience: int = 1
    plateau_threshold: float = 1e-4
    lambda1: float = 1e-7
    lambda2: float = 0.1
    lambda3: float = 1e-5
    rank_loss: str = "printed"
    mode: str = "auto"
    pca_dim: int = 10
    latent_dim: int = 64
    hidden_dim: int = 64
    flow_layers: int = 10
    density_bound: float = 30.0
    nu_prior: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch", "grad_accum", "epochs", "pca_dim", "latent_dim", "hidden_dim", "nu_prior"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        # lr = 0 is allowed: a frozen run is how early stopping is exercised
        for name in ("lr", "warmup_lr", "lambda1", "lambda2", "lambda3", "weight_decay", "warmup_epochs", "patience",
                     "flow_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rank_loss not in ("printed", "listmle"):
            raise ValueError(f"unknown rank_loss {self.rank_loss!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_dim=self.pca_dim, latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
                           flow_layers=self.flow_layers, density_bound=self.density_bound,
                           nu_prior=self.nu_prior, mode=self.mode, seed=self.seed)


# Settings used for the synthetic benchmark: a few thousand cells give one
# optimizer step per epoch at the default batch size, so batches are smaller,
# the step larger and the network narrower.
DESK_CONFIG = dict(lr=3e-3, warmup_lr=3e-3, batch=200, grad_accum=1, epochs=250, patience=60, latent_dim=8,
                   hidden_dim=32, flow_layers=4)


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    l4: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss terms (single-sample reference versions)

def loss_l1(y, posterior: NIWParams, mode: Mode = "auto") -> float:
    """Expected log-likelihood; the composite loss negates it."""
    return niw_expected_loglik(y, posterior, mode)


def loss_l2(y, posterior: NIWParams, mode: Mode = "auto") -> float:
    """``||y - mu0||_1`` times the Inverse-Wishart entropy."""
    err = float(np.sum(np.abs(np.asarray(y, dtype=float) - posterior.mu0)))
    return err * niw_entropy(posterior, mode) if err else 0.0


def _rank_order(reference) -> np.ndarray:
    ref = np.asarray(reference, dtype=float)
    if not np.all(np.isfinite(ref)):
        raise DomainError("reference E values must be finite")
    return np.argsort(-ref, kind="stable")


def rank_term(pseudo_e: torch.Tensor, reference, variant: str = "printed") -> torch.Tensor:
    """Differentiable ranking term for one batch of categories."""
    if pseudo_e.shape[0] < 2:
        raise DomainError("ranking term needs at least two categories")
    s = pseudo_e[torch.as_tensor(_rank_order(reference))]
    if variant == "printed":
        return (s - torch.logsumexp(s, 0)).mean()
    if variant == "listmle":
        suffix = torch.logcumsumexp(s.flip(0), 0).flip(0)
        return (s - suffix).mean()
    raise ValueError(f"unknown ranking variant {variant!r}")


def loss_l3(pseudo_e_batch, reference_e_batch, variant: str = "printed"):
    """Mean log-softmax of predicted pseudo-E sorted by descending reference E."""
    if isinstance(pseudo_e_batch, torch.Tensor):
        return rank_term(pseudo_e_batch, reference_e_batch, variant)
    pe = torch.as_tensor(np.asarray(pseudo_e_batch, dtype=float), dtype=DTYPE)
    return float(rank_term(pe, reference_e_batch, variant))


def loss_l4(y, mu0, nu_tilde, n_dim: int):
    """``||y - mu0||_1 ln(N / (2N - nu~) - 1)`` with ``nu~`` clamped into ``[N+eps, 2N-eps]``."""
    eps = 1e-6 * n_dim
    torch_in = isinstance(nu_tilde, torch.Tensor)
    nu = nu_tilde if torch_in else torch.as_tensor(float(nu_tilde), dtype=DTYPE)
    lo, hi = n_dim + eps, 2 * n_dim - eps
    if bool(((nu < lo) | (nu > hi)).any()):
        logger.info("nu_tilde clamped into [%g, %g]", lo, hi)
        nu = torch.clamp(nu, lo, hi)
    y_t = torch.as_tensor(np.asarray(y, dtype=float), dtype=DTYPE) if not isinstance(y, torch.Tensor) else y
    m_t = torch.as_tensor(np.asarray(mu0, dtype=float), dtype=DTYPE) if not isinstance(mu0, torch.Tensor) else mu0
    err = (y_t - m_t).abs().sum(-1)
    val = err * torch.log(n_dim / (2 * n_dim - nu) - 1.0)
    return val if torch_in or isinstance(y, torch.Tensor) else float(val)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    """Whole perturbation categories: their cells (PCA space) and reference E."""

    keys: list[tuple[str, ...]]
    cells: list[torch.Tensor]
    reference_e: np.ndarray

    @property
    def n_cells(self) -> int:
        return sum(c.shape[0] for c in self.cells)


def make_batches(dataset: PerturbationDataset, split: str, max_cells: int,
                 rng: np.random.Generator | None = None, projected: dict | None = None) -> list[Batch]:
    """Group whole categories into micro-batches of at most ``max_cells`` cells (at least one category)."""
    keys = dataset.perturbations(split)
    if rng is not None:
        keys = [keys[i] for i in rng.permutation(len(keys))]
    projected = projected if projected is not None else project_split(dataset, split)
    batches, cur = [], []
    size = 0
    for k in keys:
        n = projected[k].shape[0]
        if cur and size + n > max_cells:
            batches.append(cur)
            cur, size = [], 0
        cur.append(k)
        size += n
    if cur:
        batches.append(cur)
    out = []
    for group in batches:
        ref = np.array([dataset.reference_e[k].e if k in dataset.reference_e else math.nan for k in group])
        out.append(Batch([split_key(k) for k in group], [projected[k] for k in group], ref))
    return out


def project_split(dataset: PerturbationDataset, split: str) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(dataset.project(dataset.cells(k)), dtype=DTYPE) for k in dataset.perturbations(split)}


def _expand(batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    y = torch.cat(batch.cells, 0)
    owner = torch.cat([torch.full((c.shape[0],), i, dtype=torch.long) for i, c in enumerate(batch.cells)])
    return y, owner


def loss_total(batch: Batch, model: PrescribeModel, config: TrainConfig,
               log_density_override: torch.Tensor | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    """Composite loss ``-l1 - lambda1 l2 - lambda2 l3 - lambda3 l4``.

    ``l1``, ``l2`` and ``l4`` are averaged over cells; ``l3`` ranks the batch's
    categories and is skipped (zero) when the batch holds fewer than two.
    """
    out = model(batch.keys, log_density_override)
    y, owner = _expand(batch)
    mu, nu, L, kappa = out.mu[owner], out.nu_tilde[owner], out.L[owner], out.kappa[owner]
    l1 = tn.expected_loglik(y, mu, kappa, nu, L, config.mode).mean()
    err = (y - mu).abs().sum(-1)
    zero = torch.zeros((), dtype=DTYPE)
    l2 = (err * tn.iw_entropy(out.nu_tilde, out.L, config.mode)[owner]).mean() if config.lambda1 else zero
    # ln(N/(2N - nu~) - 1) equals ln(nu) - ln(nu_prior) exactly; the log form avoids cancellation
    l4 = (err * (out.log_nu - math.log(model.config.nu_prior))[owner]).mean() if config.lambda3 else zero
    if config.lambda2 and len(batch.keys) >= 2 and np.all(np.isfinite(batch.reference_e)):
        l3 = rank_term(out.pseudo_e, batch.reference_e, config.rank_loss)
    else:
        l3 = zero
    total = -l1 - config.lambda1 * l2 - config.lambda2 * l3 - config.lambda3 * l4
    bd = LossBreakdown(float(l1.detach()), float(l2.detach()), float(l3.detach()), float(l4.detach()), float(total.detach()),
                       config.lambda1, config.lambda2, config.lambda3)
    return total, bd


# ---------------------------------------------------------------------------
# gradient engine

def grad(loss_fn: Callable[[], torch.Tensor], model: torch.nn.Module) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss_fn()`` for every trainable parameter."""
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    out = {}
    for name, p in params.items():
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        out[name] = g.detach().numpy().copy()
    model.zero_grad(set_to_none=True)
    return out


@dataclass
class GradCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def ok(self) -> bool:
        diff = abs(self.analytic - self.numeric)
        return diff <= 1e-7 or diff <= 1e-4 * max(abs(self.analytic), abs(self.numeric))


def check_gradients(loss_fn: Callable[[], torch.Tensor], model: torch.nn.Module, n_coords: int = 20,
                    step: float = 1e-4, seed: int = 0) -> list[GradCheck]:
    """Central finite differences on ``n_coords`` random coordinates of every parameter tensor.

    The step is relative: ``step * max(1, |theta|)``.
    """
    analytic = grad(loss_fn, model)
    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for i in np.sort(picks):
                old = float(flat[i])
                h = step * max(1.0, abs(old))
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
                idx = np.unravel_index(int(i), tuple(p.shape)) if p.dim() else ()
                results.append(GradCheck(name, tuple(int(v) for v in idx), float(analytic[name].reshape(-1)[i]),
                                         (up - down) / (2 * h)))
    return results


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: PrescribeModel
    log: list[dict]
    best_epoch: int
    best_val_l1: float


def fit_entropy_band(model: PrescribeModel, keys: Sequence[tuple[str, ...]]) -> BandMap | None:
    """Min-max band over the predictive entropies of ``keys`` (None when degenerate)."""
    with torch.no_grad():
        ent = model(keys).entropy.numpy()
    lo, hi = float(ent.min()), float(ent.max())
    return BandMap(lo, hi, model.config.n_dim) if hi > lo else None


def evaluate_l1(model: PrescribeModel, batches: Iterable[Batch], mode: str = "auto") -> float:
    """Cell-weighted mean expected log-likelihood."""
    total, count = 0.0, 0
    with torch.no_grad():
        for b in batches:
            out = model(b.keys)
            y, owner = _expand(b)
            ll = tn.expected_loglik(y, out.mu[owner], out.kappa[owner], out.nu_tilde[owner], out.L[owner], mode)
            total += float(ll.sum())
            count += y.shape[0]
    return total / count


def _calibration_snapshot(model, dataset, split) -> dict:
    from .evaluation import calibration_curve, make_records, summarize

    records = make_records(model, dataset, split)
    rep = calibration_curve(records, bins=min(5, len(records)))
    return {**{f"{split}_{k}": v for k, v in summarize(records).items()},
            **{f"{split}_{k}": v for k, v in rep.summary().items()},
            f"{split}_mean_nu_tilde": float(np.mean([r.nu_tilde for r in records]))}


def _round(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def train(dataset: PerturbationDataset, config: TrainConfig, model: PrescribeModel | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam with warmup, plateau decay and early stopping on validation ``l1``.

    Returns the best-validation model (its entropy band frozen at that epoch)
    and one log record per epoch.
    """
    if dataset.pca is None or not dataset.reference_e:
        raise ValueError("dataset must be prepared (PCA and reference E) before training")
    if not dataset.perturbations("train") or not dataset.perturbations("val"):
        raise ValueError("dataset needs train and val perturbations")
    torch.set_num_threads(1)
    model = model if model is not None else build_model(dataset, config.model_config())
    rng = np.random.default_rng(config.seed)
    train_cells = project_split(dataset, "train")
    val_batches = make_batches(dataset, "val", config.batch, projected=project_split(dataset, "val"))
    train_keys = [split_key(k) for k in dataset.perturbations("train")]

    opt = torch.optim.Adam(model.parameters(), lr=config.warmup_lr if config.warmup_epochs else config.lr,
                           weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=config.plateau_factor, patience=config.plateau_patience,
        threshold=config.plateau_threshold, threshold_mode="rel")

    best_state, best_val, best_epoch = copy.deepcopy(model.state_dict()), -math.inf, -1
    stale, bad_losses = 0, 0
    log: list[dict] = []
    for epoch in range(config.epochs):
        if epoch == config.warmup_epochs:
            for g in opt.param_groups:
                g["lr"] = config.lr
        model.train()
        batches = make_batches(dataset, "train", config.batch, rng, projected=train_cells)
        sums = {"l1": 0.0, "l2": 0.0, "l3": 0.0, "l4": 0.0, "total": 0.0}
        opt.zero_grad(set_to_none=True)
        pending = 0
        for i, b in enumerate(batches):
            total, bd = loss_total(b, model, config)
            if not math.isfinite(bd.total):
                bad_losses += 1
                logger.warning("non-finite loss at epoch %d batch %d", epoch, i)
                if bad_losses >= 2:
                    raise DivergenceError(f"loss non-finite twice in a row (epoch {epoch}, batch {i})")
                opt.zero_grad(set_to_none=True)
                pending = 0
                continue
            bad_losses = 0
            (total / config.grad_accum).backward()
            pending += 1
            for k in sums:
                sums[k] += getattr(bd, k) / len(batches)
            if pending == config.grad_accum or i == len(batches) - 1:
                opt.step()
                opt.zero_grad(set_to_none=True)
                pending = 0
        model.eval()
        model.set_entropy_band(fit_entropy_band(model, train_keys))
        val_l1 = evaluate_l1(model, val_batches, config.mode)
        if epoch >= config.warmup_epochs:
            sched.step(val_l1)
        improved = val_l1 > best_val + abs(best_val) * config.plateau_threshold if math.isfinite(best_val) else True
        if improved:
            best_val, best_epoch, stale = val_l1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        record = {"epoch": epoch, "lr": opt.param_groups[0]["lr"], **sums, "val_l1": val_l1,
                  **_calibration_snapshot(model, dataset, "val")}
        record = _round(record)
        log.append(record)
        logger.info("epoch %d total %.6g val_l1 %.6g", epoch, sums["total"], val_l1)
        if callback is not None:
            callback(record)
        if stale >= config.patience and epoch >= config.warmup_epochs:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_epoch, best_val)


# ---------------------------------------------------------------------------
# hyperparameter sweep

DEFAULT_GRID = {
    "lambda2": (0.01, 0.1, 1.0),
    "lambda3": (1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2),
    "lambda1": (1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4),
}
PHASE2_LAMBDA3 = 1e-5


def plan_phase1(grid: dict) -> list[dict]:
    return [{"phase": 1, "lambda2": l2, "lambda3": l3} for l2 in grid["lambda2"] for l3 in grid["lambda3"]]


def plan_phase2(grid: dict, best_lambda2: float) -> list[dict]:
    return [{"phase": 2, "lambda1": l1, "lambda2": best_lambda2, "lambda3": PHASE2_LAMBDA3} for l1 in grid["lambda1"]]


def trial_count(grid: dict) -> int:
    return len(grid["lambda2"]) * len(grid["lambda3"]) + len(grid["lambda1"])


def sweep(dataset: PerturbationDataset, grid: dict | None = None, base: TrainConfig | None = None,
          train_fn: Callable = train) -> list[dict]:
    """Two-phase search: ``lambda2 x lambda3``, then ``lambda1`` with ``lambda3`` fixed.

    ``lambda2`` is chosen by the mean over its phase-1 runs of validation
    ``pearson + spearman calibration``. One report row per trial.
    """
    from .evaluation import calibration_curve, make_records, summarize

    grid = {**DEFAULT_GRID, **(grid or {})}
    base = base or TrainConfig()
    rows = []

    def run(trial):
        cfg = replace(base, **{k: v for k, v in trial.items() if k != "phase"})
        result = train_fn(dataset, cfg)
        records = make_records(result.model, dataset, "val")
        acc = summarize(records)
        cal = calibration_curve(records, bins=min(5, len(records)))
        row = {**trial, "lambda1": cfg.lambda1, "r_pred_truth": acc["pearson"], "acc_pred_truth": acc["direction"],
               "spearman_cal": cal.rs_perf_conf, "best_epoch": result.best_epoch, "val_l1": result.best_val_l1}
        rows.append(row)
        return row

    scores: dict[float, list[float]] = {}
    for trial in plan_phase1(grid):
        row = run(trial)
        scores.setdefault(trial["lambda2"], []).append(row["r_pred_truth"] + row["spearman_cal"])
    best_l2 = max(grid["lambda2"], key=lambda l2: (float(np.mean(scores[l2])), -grid["lambda2"].index(l2)))
    for trial in plan_phase2(grid, best_l2):
        run(trial)
    return rows
