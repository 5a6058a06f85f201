"""Perturbation datasets: synthetic generation, preprocessing, reference E-distances and I/O."""
from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from .edistance import BandMap, EDistStats, e_distance
from .errors import DataFormatError, DomainError

logger = logging.getLogger(__name__)

CONTROL = "control"
SPLITS = ("train", "val", "test")
LIBRARY_SIZE = 1e4


def pert_key(ids: Sequence[str]) -> str:
    """Canonical key of a perturbation set: sorted ids joined by ``;``."""
    return ";".join(sorted(ids))


def split_key(key: str) -> tuple[str, ...]:
    return tuple(key.split(";")) if key else ()


@dataclass(frozen=True)
class PCAProjection:
    """Centered linear projection onto the top principal components."""

    mean: np.ndarray
    components: np.ndarray  # (N, G), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PCAProjection":
        return cls(
            np.asarray(d["mean"], dtype=float),
            np.asarray(d["components"], dtype=float),
            np.asarray(d["explained_variance"], dtype=float),
        )


def fit_pca(train_expressions, n_components: int = 10) -> PCAProjection:
    """Top principal components from an eigendecomposition of the covariance.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    X = np.asarray(train_expressions, dtype=float)
    if X.shape[0] < n_components:
        raise DomainError(f"need at least {n_components} rows, got {X.shape[0]}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:n_components]
    evals, comps = evals[order], evecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(len(comps)), pivot])[:, None]
    tol = max(evals[0], 0.0) * 1e-12 if len(evals) else 0.0
    if np.sum(evals > tol) < n_components:
        warnings.warn("fewer nonzero singular values than requested PCA components", RuntimeWarning)
    return PCAProjection(mean, comps, np.clip(evals, 0.0, None))


def lognormalize(raw, library_size: float = LIBRARY_SIZE) -> np.ndarray:
    """Scale each cell to ``library_size`` total counts, then ``ln(1 + x)``."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise DomainError("counts must be non-negative")
    totals = raw.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        bad = np.flatnonzero(totals[:, 0] == 0)
        raise DomainError(f"cells with zero total counts: {bad[:10].tolist()}")
    return np.log1p(raw / totals * library_size)


def quality_control(raw, min_counts: float = 1000, min_cells: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of cells with at least ``min_counts`` and genes seen in ``min_cells`` cells."""
    raw = np.asarray(raw, dtype=float)
    cells = raw.sum(axis=1) >= min_counts
    genes = (raw[cells] > 0).sum(axis=0) >= min_cells
    return cells, genes


@dataclass
class PerturbationDataset:
    """Cells x genes log-normalized expression with perturbation labels and splits.

    ``labels[i]`` is the tuple of perturbation ids of cell ``i`` (empty for
    control cells); ``splits`` maps each perturbation key to its split.
    """

    expressions: np.ndarray
    cell_ids: list[str]
    gene_names: list[str]
    labels: list[tuple[str, ...]]
    splits: dict[str, str]
    embeddings: dict[str, np.ndarray] | None = None
    pca: PCAProjection | None = None
    reference_e: dict[str, EDistStats] = field(default_factory=dict)
    e_band: BandMap | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.expressions = np.asarray(self.expressions, dtype=float)
        n_cells, n_genes = self.expressions.shape
        if len(self.cell_ids) != n_cells or len(self.labels) != n_cells:
            raise DataFormatError("cell ids / labels do not match the expression rows")
        if len(self.gene_names) != n_genes:
            raise DataFormatError("gene names do not match the expression columns")
        self.labels = [tuple(sorted(lab)) for lab in self.labels]
        keys = {pert_key(lab) for lab in self.labels if lab}
        missing = sorted(keys - set(self.splits))
        if missing:
            raise DataFormatError(f"perturbations without split: {missing[:5]}")
        bad = {k: s for k, s in self.splits.items() if s not in SPLITS}
        if bad:
            raise DataFormatError(f"unknown split names: {bad}")
        if not any(not lab for lab in self.labels):
            raise DataFormatError("dataset has no control cells")
        self._rows: dict[str, np.ndarray] | None = None

    # -- lookup --------------------------------------------------------------
    def _index(self) -> dict[str, np.ndarray]:
        if self._rows is None:
            groups: dict[str, list[int]] = {}
            for i, lab in enumerate(self.labels):
                groups.setdefault(pert_key(lab) if lab else "", []).append(i)
            self._rows = {k: np.asarray(v) for k, v in groups.items()}
        return self._rows

    @property
    def n_genes(self) -> int:
        return self.expressions.shape[1]

    def perturbations(self, split: str | None = None) -> list[str]:
        return sorted(k for k, s in self.splits.items() if split is None or s == split)

    def cells(self, key: str) -> np.ndarray:
        """Expression rows of a perturbation key (``""`` for controls)."""
        try:
            return self.expressions[self._index()[key]]
        except KeyError:
            raise KeyError(f"unknown perturbation {key!r}") from None

    @property
    def controls(self) -> np.ndarray:
        return self.cells("")

    @property
    def control_mean(self) -> np.ndarray:
        return self.controls.mean(axis=0)

    def logfc(self, key: str) -> np.ndarray:
        """Mean log-normalized expression of a perturbation minus the control mean."""
        return self.cells(key).mean(axis=0) - self.control_mean

    def tier(self, key: str):
        return self.meta.get("tiers", {}).get(key)

    def project(self, X) -> np.ndarray:
        if self.pca is None:
            raise ValueError("dataset has no fitted PCA; call prepare() first")
        return self.pca.transform(X)


# ---------------------------------------------------------------------------
# preprocessing

def prepare(dataset: PerturbationDataset, n_components: int = 10, seed: int | None = None) -> PerturbationDataset:
    """Fit PCA on training + control cells, then precompute reference E-distances."""
    train_rows = [dataset.cells(k) for k in dataset.perturbations("train")] + [dataset.controls]
    pca = fit_pca(np.vstack(train_rows), n_components)
    return precompute_reference_e(replace(dataset, pca=pca), seed=seed)


def _pert_seed(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def precompute_reference_e(
    dataset: PerturbationDataset, seed: int | None = None, space: str = "pca", splits: Sequence[str] = SPLITS
) -> PerturbationDataset:
    """E-distance of every perturbation against the controls.

    Both groups are subsampled to the smaller group size with a generator
    seeded by ``(seed, perturbation key)``. The band map onto ``[N, 2N]`` is
    fitted on training perturbations only.
    """
    if seed is None:
        seed = int(dataset.meta.get("seed", 0))
    if space == "pca":
        transform = dataset.project
        n_dim = dataset.pca.n_components if dataset.pca is not None else None
    elif space == "gene":
        transform = lambda X: np.asarray(X, dtype=float)  # noqa: E731
        n_dim = dataset.pca.n_components if dataset.pca is not None else 10
    else:
        raise ValueError(f"unknown space {space!r}")
    ctrl = transform(dataset.controls)
    ref: dict[str, EDistStats] = {}
    for key in dataset.perturbations():
        if dataset.splits[key] not in splits:
            continue
        cells = transform(dataset.cells(key))
        common = min(len(cells), len(ctrl))
        if common < 2:
            raise DomainError(f"{key!r}: fewer than 2 cells after subsampling")
        ref[key] = e_distance(ctrl, cells, subsample=common, rng=_pert_seed(seed, key))
    train = [ref[k].e for k in dataset.perturbations("train")]
    band = BandMap.fit(train, n_dim) if train else None
    meta = dict(dataset.meta, e_seed=seed, e_space=space)
    return replace(dataset, reference_e=ref, e_band=band, meta=meta)


def select_degs(dataset: PerturbationDataset, key: str, k: int = 20) -> list[int]:
    """Top-``k`` genes by absolute mean log-fold change; ties go to the lower index."""
    cells = dataset.cells(key)
    if len(cells) < 2:
        raise DomainError(f"{key!r} has fewer than 2 cells")
    score = np.abs(dataset.logfc(key))
    return np.argsort(-score, kind="stable")[:k].tolist()


# ---------------------------------------------------------------------------
# synthetic benchmark

@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale perturbation benchmark.

    Perturbation effects live in a low-rank gene-program space and depend
    linearly on the perturbed genes' embeddings, plus an idiosyncratic part
    that cannot be predicted from the embedding. Each held-out gene sits a
    random multiple (drawn from ``ood_multiplier``) further from its cluster
    centre than training genes, and its idiosyncratic fraction grows by the
    same multiple, so distance from the training genes sets how unpredictable
    a perturbation is. Held-out
    combinations have 0, 1 or 2 unseen components (the tier). Validation
    uses held-out combinations of training genes by default (``val_tiers``),
    since labels for unseen genes are not available at model-selection time.
    """

    n_genes: int = 200
    embed_dim: int = 16
    n_programs: int = 6
    n_clusters: int = 4
    effect_magnitude: tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)
    n_seen_genes: int = 40
    n_null_genes: int = 4
    n_train_combos: int = 20
    n_val_per_tier: int = 15
    val_tiers: tuple[int, ...] = (0,)
    n_test_per_tier: int = 5
    cells_per_perturbation: int = 40
    n_control_cells: int = 300
    noise_scale: float = 0.5
    noise_spread: float = 0.0
    cluster_spread: float = 0.5
    centre_norm: float = 2.0
    idiosyncratic: float = 0.2
    ood_multiplier: tuple[float, float] = (2.0, 5.0)
    combo_magnitudes: tuple[float, float] = (3.0, 8.0)
    interaction: float = 0.0
    decimals: int = 4
    seed: int = 42

    def __post_init__(self):
        counts = (self.n_genes, self.embed_dim, self.n_programs, self.n_clusters, self.n_seen_genes,
                  self.cells_per_perturbation, self.n_control_cells)
        if min(counts) <= 0:
            raise ValueError("all counts must be positive")
        if self.noise_scale < 0 or not 0 < self.ood_multiplier[0] <= self.ood_multiplier[1]:
            raise ValueError("noise scale must be >= 0 and the ood multiplier range positive")
        if len(self.effect_magnitude) != self.n_clusters:
            raise ValueError("need one effect magnitude per cluster")
        if self.n_null_genes >= self.n_seen_genes:
            raise ValueError("too many null genes")
        if not set(self.val_tiers) <= {0, 1, 2}:
            raise ValueError("validation tiers must be drawn from 0, 1, 2")


def _unit_rows(A: np.ndarray) -> np.ndarray:
    return A / np.linalg.norm(A, axis=-1, keepdims=True)


def generate(spec: SynthSpec) -> PerturbationDataset:
    """Draw a synthetic :class:`PerturbationDataset` from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    G, S, R = spec.n_genes, spec.embed_dim, spec.n_programs

    loadings = rng.standard_normal((R, G)) * (rng.random((R, G)) < 0.3)
    programs = np.linalg.qr(loadings.T)[0].T  # orthonormal gene programs (R, G)
    mixing = rng.standard_normal((R, S)) / np.sqrt(S)
    centres = _unit_rows(rng.standard_normal((spec.n_clusters, S))) * spec.centre_norm
    null_basis = np.linalg.svd(mixing)[2][R:]  # embedding directions with no effect
    base = rng.uniform(1.0, 3.0, G)

    genes: dict[str, dict] = {}

    def add_gene(name, cluster, mult, idio_frac=spec.idiosyncratic, null=False):
        offset = _unit_rows(rng.standard_normal(S)) * spec.cluster_spread * mult
        if null:
            emb = null_basis.T @ rng.standard_normal(null_basis.shape[0])
            emb = emb / np.linalg.norm(emb) * 2.0
            coef = np.zeros(R)
        else:
            emb = centres[cluster] + offset
            base_coef = mixing @ emb
            idio = _unit_rows(rng.standard_normal(R)) * idio_frac * np.linalg.norm(base_coef)
            coef = spec.effect_magnitude[cluster] * (base_coef + idio)
        genes[name] = {"embedding": emb, "coef": coef, "cluster": cluster, "mult": mult}

    seen = [f"G{i:03d}" for i in range(spec.n_seen_genes)]
    for i, name in enumerate(seen):
        add_gene(name, i % spec.n_clusters, 1.0, null=i < spec.n_null_genes)
    effect_genes = seen[spec.n_null_genes:]

    def unseen(prefix, n):
        names = [f"{prefix}{i:03d}" for i in range(n)]
        for i, name in enumerate(names):
            mult = rng.uniform(*spec.ood_multiplier)
            add_gene(name, int(rng.integers(spec.n_clusters)), mult, spec.idiosyncratic * mult)
        return names

    n_unseen = 3 * max(spec.n_val_per_tier, spec.n_test_per_tier)
    val_unseen = unseen("V", n_unseen)
    test_unseen = unseen("T", n_unseen)

    perts: list[tuple[tuple[str, ...], str, int]] = [((g,), "train", 0) for g in seen]
    used_pairs: set[tuple[str, str]] = set()

    def seen_pair():
        while True:
            a, b = sorted(rng.choice(effect_genes, 2, replace=False).tolist())
            if (a, b) not in used_pairs:
                used_pairs.add((a, b))
                return (a, b)

    for _ in range(spec.n_train_combos):
        perts.append((seen_pair(), "train", 0))
    for split, pool, n, split_tiers in (("val", val_unseen, spec.n_val_per_tier, spec.val_tiers),
                                        ("test", test_unseen, spec.n_test_per_tier, (0, 1, 2))):
        pool = list(pool)
        for tier in split_tiers:
            for _ in range(n):
                if tier == 0:
                    ids = seen_pair()
                elif tier == 1:
                    ids = (str(rng.choice(effect_genes)), pool.pop(0))
                else:
                    ids = (pool.pop(0), pool.pop(0))
                perts.append((tuple(sorted(ids)), split, tier))

    # combination magnitudes and noise levels follow the same schedule in every tier
    lo, hi = spec.combo_magnitudes
    mags = np.linspace(lo, hi, max(spec.n_val_per_tier, spec.n_test_per_tier, spec.n_train_combos))
    noise_levels = spec.noise_scale * (1.0 + spec.noise_spread * np.linspace(-1.0, 1.0, len(mags)))
    counters: dict[tuple[str, int], int] = {}

    ctrl = base + spec.noise_scale * rng.standard_normal((spec.n_control_cells, G))
    blocks = [ctrl]
    labels: list[tuple[str, ...]] = [()] * spec.n_control_cells
    splits: dict[str, str] = {}
    tiers: dict[str, int] = {}
    distances: dict[str, float] = {}
    noise_of: dict[str, float] = {}
    train_emb = np.array([genes[g]["embedding"] for g in seen])
    for ids, split, tier in perts:
        key = pert_key(ids)
        coef = sum(genes[g]["coef"] for g in ids)
        if len(ids) == 2:
            a, b = (genes[g]["coef"] for g in ids)
            coef = coef + spec.interaction * np.tanh(a * b)
            slot = counters.get((split, tier), 0)
            counters[(split, tier)] = slot + 1
            order = np.random.default_rng([spec.seed, slot]).permutation(len(mags))
            norm = np.linalg.norm(coef)
            if norm > 0:
                coef = coef / norm * mags[order[slot % len(mags)]]
            sigma = noise_levels[order[(slot + 1) % len(mags)]]
        else:
            sigma = noise_levels[int(rng.integers(len(noise_levels)))]
        effect = coef @ programs
        cells = base + effect + sigma * rng.standard_normal((spec.cells_per_perturbation, G))
        blocks.append(cells)
        labels.extend([tuple(sorted(ids))] * spec.cells_per_perturbation)
        splits[key] = split
        tiers[key] = tier
        noise_of[key] = float(sigma)
        distances[key] = float(np.mean([
            np.min(np.linalg.norm(train_emb - genes[g]["embedding"], axis=1)) for g in ids
        ]))

    X = np.round(np.vstack(blocks), spec.decimals)
    cell_ids = [f"c{i:05d}" for i in range(X.shape[0])]
    meta = {
        "seed": spec.seed,
        "provenance": "synthetic",
        "synth_spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
        "tiers": tiers,
        "latent_distance": distances,
        "noise_scale": noise_of,
        "clusters": {g: int(v["cluster"]) for g, v in genes.items()},
    }
    emb = {g: v["embedding"] for g, v in genes.items()}
    return PerturbationDataset(X, cell_ids, [f"gene{j:03d}" for j in range(G)], labels, splits,
                               embeddings=emb, meta=meta)


# ---------------------------------------------------------------------------
# on-disk format

EXPRESSION_FILE = "expression.tsv"
LABELS_FILE = "labels.tsv"
META_FILE = "meta.json"
EMBEDDING_FILE = "embeddings.tsv"
PCA_FILE = "pca.json"
REFERENCE_FILE = "reference_e.tsv"


def save(dataset: PerturbationDataset, path, prov: dict | None = None) -> Path:
    """Write ``dataset`` as a directory of tab-separated tables plus JSON metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    prov = prov if prov is not None else _io.provenance(seed=dataset.meta.get("seed"))
    _io.write_tsv(path / EXPRESSION_FILE, ["cell_id", *dataset.gene_names],
                  ([c, *row] for c, row in zip(dataset.cell_ids, dataset.expressions.tolist())), prov)
    _io.write_tsv(path / LABELS_FILE, ["cell_id", "perturbations", "split"],
                  ([c, ";".join(lab), dataset.splits[pert_key(lab)] if lab else CONTROL]
                   for c, lab in zip(dataset.cell_ids, dataset.labels)), prov)
    if dataset.embeddings is not None:
        names = sorted(dataset.embeddings)
        width = len(dataset.embeddings[names[0]])
        _io.write_tsv(path / EMBEDDING_FILE, ["gene", *[f"e{i}" for i in range(width)]],
                      ([g, *np.asarray(dataset.embeddings[g], dtype=float).tolist()] for g in names), prov)
    if dataset.pca is not None:
        _io.write_json(path / PCA_FILE, {"provenance": prov, **dataset.pca.to_dict()})
    if dataset.reference_e:
        _io.write_tsv(path / REFERENCE_FILE, ["perturbation", "delta_xy", "sigma_x", "sigma_y", "e"],
                      ([k, s.delta_xy, s.sigma_x, s.sigma_y, s.e] for k, s in sorted(dataset.reference_e.items())),
                      prov)
    meta = dict(dataset.meta)
    meta["e_band"] = dataset.e_band.to_dict() if dataset.e_band is not None else None
    meta["splits"] = dict(sorted(dataset.splits.items()))
    _io.write_json(path / META_FILE, {"provenance": prov, "meta": meta})
    return path


def load_embeddings(path) -> dict[str, np.ndarray]:
    """Read a gene-embedding table (``gene`` column followed by numeric columns)."""
    path = Path(path)
    header, rows, _ = _io.read_tsv(path)
    if not header or header[0] != "gene":
        raise DataFormatError(f"{path}:1: first column must be 'gene'")
    return {f[0]: np.array([_io.parse_float(v, path, ln, header[j + 1]) for j, v in enumerate(f[1:])])
            for ln, f in rows}


def load(path) -> PerturbationDataset:
    """Read a dataset directory written by :func:`save`."""
    path = Path(path)
    header, rows, _ = _io.read_tsv(path / EXPRESSION_FILE)
    if header[0] != "cell_id":
        raise DataFormatError(f"{path / EXPRESSION_FILE}:1: first column must be 'cell_id'")
    genes = header[1:]
    cell_ids = [f[0] for _, f in rows]
    try:
        X = np.array([[float(v) for v in f[1:]] for _, f in rows], dtype=float).reshape(len(rows), len(genes))
    except ValueError:
        for ln, f in rows:
            for j, v in enumerate(f[1:]):
                _io.parse_float(v, path / EXPRESSION_FILE, ln, genes[j])
        raise

    lab_path = path / LABELS_FILE
    lheader, lrows, _ = _io.read_tsv(lab_path)
    for col in ("cell_id", "perturbations", "split"):
        if col not in lheader:
            raise DataFormatError(f"{lab_path}:1: missing required column {col!r}")
    ci, pi, si = (lheader.index(c) for c in ("cell_id", "perturbations", "split"))
    by_cell = {}
    splits: dict[str, str] = {}
    for ln, f in lrows:
        ids = tuple(x for x in f[pi].split(";") if x)
        split = f[si]
        if not ids:
            if split != CONTROL:
                raise DataFormatError(f"{lab_path}:{ln}: control cell with split {split!r}")
        else:
            key = pert_key(ids)
            if splits.setdefault(key, split) != split:
                raise DataFormatError(f"{lab_path}:{ln}: {key!r} assigned to two splits")
        by_cell[f[ci]] = ids
    try:
        labels = [by_cell[c] for c in cell_ids]
    except KeyError as exc:
        raise DataFormatError(f"{lab_path}: no label for cell {exc.args[0]!r}") from None

    meta_doc = _io.read_json(path / META_FILE) if (path / META_FILE).exists() else {"meta": {}}
    meta = dict(meta_doc.get("meta", {}))
    band = meta.pop("e_band", None)
    meta.pop("splits", None)
    embeddings = load_embeddings(path / EMBEDDING_FILE) if (path / EMBEDDING_FILE).exists() else None
    pca = None
    if (path / PCA_FILE).exists():
        pca = PCAProjection.from_dict(_io.read_json(path / PCA_FILE))
    ref: dict[str, EDistStats] = {}
    if (path / REFERENCE_FILE).exists():
        rpath = path / REFERENCE_FILE
        rh, rr, _ = _io.read_tsv(rpath)
        for ln, f in rr:
            vals = [_io.parse_float(v, rpath, ln, rh[j + 1]) for j, v in enumerate(f[1:])]
            ref[f[0]] = EDistStats(*vals)
    return PerturbationDataset(
        X, cell_ids, genes, labels, splits, embeddings=embeddings, pca=pca, reference_e=ref,
        e_band=BandMap(band["lo"], band["hi"], band["n_dim"]) if band else None, meta=meta,
    )
