"""Accuracy and calibration metrics, confidence-guided filtering and difficulty reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _io
from .errors import DataFormatError, DomainError

METRICS = ("pearson", "pearson_deg", "direction", "direction_deg")


@dataclass
class PredictionRecord:
    """Population-level prediction for one perturbation, in gene-space logFC."""

    pert_id: str
    predicted: np.ndarray
    truth: np.ndarray
    confidence: float
    nu_tilde: float
    h_tilde: float
    degs: list[int]
    tier: int | None = None
    reference_e: float | None = None
    n_dim: int = 10

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.truth = np.asarray(self.truth, dtype=float)
        if self.predicted.shape != self.truth.shape:
            raise ValueError(f"{self.pert_id}: prediction and truth lengths differ")
        if not math.isfinite(self.confidence):
            raise ValueError(f"{self.pert_id}: non-finite confidence")

    def metrics(self) -> dict[str, float]:
        d = self.degs
        return {
            "pearson": safe_pearson(self.predicted, self.truth),
            "pearson_deg": safe_pearson(self.predicted[d], self.truth[d]),
            "direction": directional_accuracy(self.predicted, self.truth),
            "direction_deg": directional_accuracy(self.predicted[d], self.truth[d]),
        }


# ---------------------------------------------------------------------------
# basic metrics

def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValueError("inputs must have equal, nonzero length")
    return a, b


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DomainError("correlation undefined for constant input")
    return float(np.clip(stats.pearsonr(a, b)[0], -1.0, 1.0))


def spearman(a, b) -> float:
    a, b = _pair(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DomainError("correlation undefined for constant input")
    return float(np.clip(stats.spearmanr(a, b)[0], -1.0, 1.0))


def safe_pearson(a, b) -> float:
    """Pearson correlation, or 0 when either side is constant (e.g. a prior-mean prediction)."""
    try:
        return pearson(a, b)
    except DomainError:
        return 0.0


def directional_accuracy(pred, truth) -> float:
    """Fraction of entries whose signs agree; a zero matches only a zero."""
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.sign(pred) == np.sign(truth)))


def _buckets(values: np.ndarray, buckets: int) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=int)
    ranks[order] = np.arange(len(values))
    return ranks * buckets // len(values)


def percentile_bucket_accuracy(confidence, accuracy, buckets: int = 5) -> float:
    """Fraction of samples whose confidence quantile bucket equals their accuracy quantile bucket."""
    conf, acc = _pair(confidence, accuracy)
    if len(conf) < buckets:
        raise DomainError(f"need at least {buckets} samples, got {len(conf)}")
    return float(np.mean(_buckets(conf, buckets) == _buckets(acc, buckets)))


def ece(confidence, accuracy, bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on ``[0, 1]``; inputs already rescaled."""
    conf, acc = np.asarray(confidence, dtype=float).ravel(), np.asarray(accuracy, dtype=float).ravel()
    if conf.size == 0:
        raise DomainError("empty input")
    if conf.shape != acc.shape:
        raise ValueError("confidence and accuracy lengths differ")
    idx = np.clip((np.clip(conf, 0.0, 1.0) * bins).astype(int), 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.mean() * abs(conf[sel].mean() - acc[sel].mean())
    return float(total)


def rescale_confidence(pseudo_e, n_dim: int) -> np.ndarray:
    return np.asarray(pseudo_e, dtype=float) / (3.0 * n_dim)


def rescale_accuracy(r) -> np.ndarray:
    return (np.asarray(r, dtype=float) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# reports

@dataclass
class CalibrationReport:
    r_perf_conf: float
    rs_perf_conf: float
    acc_perf_conf: float
    ece: float
    bins: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("r_perf_conf", "rs_perf_conf", "acc_perf_conf", "ece")}


def summarize(records: Sequence[PredictionRecord]) -> dict[str, float]:
    """Mean of each accuracy metric over records."""
    if not records:
        raise DomainError("no records")
    rows = [r.metrics() for r in records]
    return {m: float(np.mean([row[m] for row in rows])) for m in METRICS}


def calibration_curve(records: Sequence[PredictionRecord], bins: int = 5, n_dim: int | None = None,
                      ece_bins: int = 10, metric: str = "pearson") -> CalibrationReport:
    """Equal-count confidence bins with mean accuracy, plus the four calibration metrics."""
    if len(records) < bins:
        raise DomainError(f"need at least {bins} records, got {len(records)}")
    conf = np.array([r.confidence for r in records])
    acc = np.array([r.metrics()[metric] for r in records])
    n_dim = n_dim if n_dim is not None else _infer_dim(records)
    table = []
    for b, idx in enumerate(np.array_split(np.argsort(conf, kind="stable"), bins)):
        table.append({
            "bin": b,
            "edge": float(conf[idx].min()),
            "mean_conf": float(conf[idx].mean()),
            "mean_acc": float(acc[idx].mean()),
            "count": int(len(idx)),
        })
    return CalibrationReport(
        r_perf_conf=_corr_or_zero(pearson, conf, acc),
        rs_perf_conf=_corr_or_zero(spearman, conf, acc),
        acc_perf_conf=percentile_bucket_accuracy(conf, acc, min(5, len(conf))),
        ece=ece(rescale_confidence(conf, n_dim), rescale_accuracy(acc), ece_bins),
        bins=table,
    )


def _corr_or_zero(fn: Callable, a, b) -> float:
    try:
        return fn(a, b)
    except DomainError:
        return 0.0


def _infer_dim(records) -> int:
    dims = {r.n_dim for r in records}
    if len(dims) != 1:
        raise ValueError(f"records disagree on the latent dimension: {sorted(dims)}")
    return dims.pop()


def _drop_count(n: int, fraction: float) -> int:
    if not 0.0 <= fraction <= 0.5:
        raise DomainError(f"fraction must lie in [0, 0.5], got {fraction}")
    return int(math.floor(fraction * n + 1e-9))


def filter_bottom(records: Sequence[PredictionRecord], fraction: float):
    """Drop the least-confident ``floor(fraction n)`` records.

    Returns the retained records (original order) and per-metric deltas against
    the unfiltered set.
    """
    k = _drop_count(len(records), fraction)
    order = np.argsort([r.confidence for r in records], kind="stable")
    dropped = set(order[:k].tolist())
    kept = [r for i, r in enumerate(records) if i not in dropped]
    before, after = summarize(records), summarize(kept)
    return kept, {m: after[m] - before[m] for m in METRICS}


def random_filter_baseline(records: Sequence[PredictionRecord], fraction: float, repeats: int = 10,
                           seed: int = 0) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation of metrics after dropping random records."""
    k = _drop_count(len(records), fraction)
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(repeats):
        drop = set(rng.choice(len(records), size=k, replace=False).tolist()) if k else set()
        runs.append(summarize([r for i, r in enumerate(records) if i not in drop]))
    out = {}
    for m in METRICS:
        vals = np.array([run[m] for run in runs])
        out[m] = (float(vals.mean()), float(vals.std(ddof=1)) if repeats > 1 else 0.0)
    return out


def difficulty_report(records: Sequence[PredictionRecord], tiers: Sequence[int] = (0, 1, 2)) -> list[dict]:
    """Mean evidence, pseudo-E and reference E per difficulty tier."""
    rows = []
    for t in tiers:
        sel = [r for r in records if r.tier == t]
        if not sel:
            raise DomainError(f"tier {t} has no records")
        ref = [r.reference_e for r in sel if r.reference_e is not None]
        rows.append({
            "tier": t,
            "count": len(sel),
            "mean_nu_tilde": float(np.mean([r.nu_tilde for r in sel])),
            "mean_pseudo_e": float(np.mean([r.confidence for r in sel])),
            "mean_reference_e": float(np.mean(ref)) if ref else math.nan,
            "mean_pearson": float(np.mean([r.metrics()["pearson"] for r in sel])),
        })
    return rows


# ---------------------------------------------------------------------------
# building records

def make_records(model, dataset, split: str, k_deg: int = 20, keys: Sequence[str] | None = None) -> list[PredictionRecord]:
    """Run ``model`` on every perturbation of ``split`` and compare against observed logFC."""
    from .data import PCAProjection, select_degs, split_key

    keys = list(keys) if keys is not None else dataset.perturbations(split)
    if not keys:
        raise DomainError(f"split {split!r} has no perturbations")
    pca = PCAProjection.from_dict(model.pca) if model.pca is not None else dataset.pca
    if pca.components.shape[1] != dataset.n_genes:
        raise ValueError(f"model expects {pca.components.shape[1]} genes, dataset has {dataset.n_genes}")
    out = model.predict([split_key(k) for k in keys])
    # measure against the reconstructed control so a prior-mean prediction is exactly zero logFC
    ctrl = pca.inverse(pca.transform(dataset.control_mean[None]))[0]
    pred = pca.inverse(out["mu"]) - ctrl
    records = []
    for i, k in enumerate(keys):
        ref = dataset.reference_e.get(k)
        records.append(PredictionRecord(
            k, pred[i], dataset.logfc(k), float(out["pseudo_e"][i]), float(out["nu_tilde"][i]),
            float(out["h_tilde"][i]), select_degs(dataset, k, k_deg), dataset.tier(k),
            None if ref is None else ref.e, model.config.n_dim,
        ))
    return records


RECORD_HEADER = ["perturbation", "tier", "n_dim", "pseudo_e", "nu_tilde", "h_tilde", "reference_e", "degs", "predicted", "truth"]


def write_records(path, records: Sequence[PredictionRecord], prov: dict | None = None) -> None:
    def row(r):
        return [r.pert_id, "" if r.tier is None else r.tier, r.n_dim, r.confidence, r.nu_tilde, r.h_tilde,
                "" if r.reference_e is None else r.reference_e, ",".join(map(str, r.degs)),
                ",".join(map(repr, r.predicted.tolist())), ",".join(map(repr, r.truth.tolist()))]

    _io.write_tsv(Path(path), RECORD_HEADER, (row(r) for r in records), prov)


def read_records(path) -> list[PredictionRecord]:
    path = Path(path)
    header, rows, _ = _io.read_tsv(path)
    missing = [c for c in RECORD_HEADER if c not in header]
    if missing:
        raise DataFormatError(f"{path}:1: missing column {missing[0]!r}")
    col = {c: header.index(c) for c in RECORD_HEADER}
    out = []
    for ln, f in rows:
        def num(c):
            return _io.parse_float(f[col[c]], path, ln, c)

        vec = lambda c: np.array([_io.parse_float(v, path, ln, c) for v in f[col[c]].split(",")])  # noqa: E731
        out.append(PredictionRecord(
            f[col["perturbation"]], vec("predicted"), vec("truth"), num("pseudo_e"), num("nu_tilde"),
            num("h_tilde"), [int(v) for v in f[col["degs"]].split(",") if v],
            int(f[col["tier"]]) if f[col["tier"]] else None,
            num("reference_e") if f[col["reference_e"]] else None, int(f[col["n_dim"]]),
        ))
    return out
