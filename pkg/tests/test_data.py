import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import toy_spec
from prescribe import data
from prescribe.edistance import e_distance, self_distance
from prescribe.errors import DataFormatError, DomainError


# -- normalization -------------------------------------------------------------

def test_lognormalize_examples():
    raw = np.array([[1e4, 0, 0], [3, 0, 1]], dtype=float)
    out = data.lognormalize(raw)
    assert out[0, 0] == pytest.approx(math.log1p(1e4))
    assert out[0, 0] == pytest.approx(9.2104, abs=1e-4)
    assert out[0, 1] == 0.0 and out[1, 1] == 0.0


@given(arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=st.floats(0, 1e5)))
def test_lognormalize_library_size(raw):
    raw[:, 0] += 1.0  # keep totals positive
    out = data.lognormalize(raw)
    np.testing.assert_allclose(np.expm1(out).sum(1), data.LIBRARY_SIZE, rtol=1e-10)
    assert np.all(out[raw == 0] == 0)
    bumped = raw.copy()
    bumped[:, 0] *= 2
    assert np.all(data.lognormalize(bumped)[:, 0] >= out[:, 0])


def test_lognormalize_errors():
    with pytest.raises(DomainError):
        data.lognormalize([[0.0, 0.0], [1.0, 2.0]])
    with pytest.raises(DomainError):
        data.lognormalize([[-1.0, 2.0]])


def test_quality_control_masks():
    raw = np.array([[2000, 1, 0], [500, 5, 5], [1500, 0, 3]], dtype=float)
    cells, genes = data.quality_control(raw, min_counts=1000, min_cells=2)
    assert cells.tolist() == [True, False, True]
    assert genes.tolist() == [True, False, False]


# -- PCA ------------------------------------------------------------------------------

def test_pca_reconstruction_matches_discarded_eigenvalues():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 8)) @ rng.standard_normal((8, 8))
    pca = data.fit_pca(X, 3)
    resid = X - pca.inverse(pca.transform(X))
    Xc = X - X.mean(0)
    evals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / len(X)))[::-1]
    assert (resid**2).sum(1).mean() == pytest.approx(evals[3:].sum(), abs=1e-8)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(pca.explained_variance, evals[:3], rtol=1e-10)


def test_pca_round_trip_dict_and_rank_warning():
    X = np.random.default_rng(1).standard_normal((20, 5))
    pca = data.fit_pca(X, 2)
    back = data.PCAProjection.from_dict(pca.to_dict())
    np.testing.assert_array_equal(back.transform(X), pca.transform(X))
    flat = np.outer(np.arange(20.0), np.ones(4))
    with pytest.warns(RuntimeWarning):
        data.fit_pca(flat, 2)
    with pytest.raises(DomainError):
        data.fit_pca(X[:1], 2)


def test_held_out_cells_do_not_touch_pca(toy_dataset):
    raw = data.generate(toy_spec())
    X = raw.expressions.copy()
    held = np.array([raw.splits.get(data.pert_key(lab)) in ("val", "test") for lab in raw.labels])
    X[held] += 5.0
    moved = data.prepare(dataclasses.replace(raw, expressions=X), 2)
    np.testing.assert_array_equal(moved.pca.components, toy_dataset.pca.components)
    assert moved.e_band == toy_dataset.e_band


# -- generator --------------------------------------------------------------------------

def test_generate_is_seeded():
    a, b = data.generate(toy_spec()), data.generate(toy_spec())
    assert np.array_equal(a.expressions, b.expressions)
    assert a.labels == b.labels and a.splits == b.splits
    assert not np.array_equal(a.expressions, data.generate(toy_spec(seed=4)).expressions)


def test_noise_free_cells_identical():
    ds = data.generate(toy_spec(noise_scale=0.0))
    for key in ds.perturbations()[:5]:
        cells = ds.cells(key)
        assert np.all(cells == cells[0])


def test_self_distance_grows_with_noise():
    sig = []
    for s in (0.1, 0.3, 0.6, 1.0):
        ds = data.generate(toy_spec(noise_scale=s))
        sig.append(np.mean([self_distance(ds.cells(k)) for k in ds.perturbations("train")]))
    assert np.all(np.diff(sig) > 0)


def test_splits_and_tiers():
    ds = data.generate(data.SynthSpec())
    keys = ds.perturbations()
    assert len(keys) == len(set(keys))
    assert len(ds.perturbations("train")) == 60
    assert len(ds.perturbations("val")) == 15 and len(ds.perturbations("test")) == 15
    assert sorted(ds.tier(k) for k in ds.perturbations("test")) == [0] * 5 + [1] * 5 + [2] * 5
    dist = ds.meta["latent_distance"]
    far = np.mean([dist[k] for k in ds.perturbations("test") if ds.tier(k) == 2])
    near = np.mean([dist[k] for k in ds.perturbations("test") if ds.tier(k) == 0])
    assert far > near
    train_ids = {g for k in ds.perturbations("train") for g in data.split_key(k)}
    for k in ds.perturbations("test"):
        unseen = sum(g not in train_ids for g in data.split_key(k))
        assert unseen == ds.tier(k)


def test_spec_validation():
    with pytest.raises(ValueError):
        data.SynthSpec(noise_scale=-1)
    with pytest.raises(ValueError):
        data.SynthSpec(n_clusters=2)  # four magnitudes by default
    with pytest.raises(ValueError):
        data.SynthSpec(val_tiers=(3,))


# -- reference E ---------------------------------------------------------------------------

def test_null_perturbation_has_null_e(toy_dataset):
    key = "G000"  # the null gene: no effect on expression
    ctrl, cells = toy_dataset.project(toy_dataset.controls), toy_dataset.project(toy_dataset.cells(key))
    n = len(cells)
    pool = np.vstack([ctrl, cells])
    rng = np.random.default_rng(0)
    null = []
    for _ in range(200):
        idx = rng.permutation(len(pool))
        null.append(e_distance(pool[idx[:n]], pool[idx[n:2 * n]]).e)
    assert toy_dataset.reference_e[key].e < np.mean(null) + 3 * np.std(null)
    effect = [toy_dataset.reference_e[k].e for k in toy_dataset.perturbations("train") if k != key]
    assert toy_dataset.reference_e[key].e < min(effect)


def test_e_grows_with_effect_magnitude():
    means = []
    for m in (0.5, 1.0, 2.0, 3.0, 4.0):
        raw = data.generate(toy_spec(n_clusters=1, effect_magnitude=(m,), n_null_genes=0))
        ds = data.precompute_reference_e(dataclasses.replace(raw, pca=data.fit_pca(raw.controls, 2)), space="gene")
        singles = [k for k in ds.perturbations("train") if ";" not in k]
        means.append(np.mean([ds.reference_e[k].e for k in singles]))
    assert np.all(np.diff(means) > 0)


def test_reference_band_and_determinism(toy_dataset):
    train = [toy_dataset.reference_e[k].e for k in toy_dataset.perturbations("train")]
    band = toy_dataset.e_band
    assert band(min(train)) == 2.0 and band(max(train)) == 4.0
    again = data.prepare(data.generate(toy_spec()), 2)
    assert again.reference_e == toy_dataset.reference_e
    assert toy_dataset.meta["e_seed"] == 3


def test_reference_needs_two_cells():
    raw = data.generate(toy_spec(cells_per_perturbation=1))
    with pytest.raises(DomainError):
        data.prepare(raw, 2)


# -- DEGs ------------------------------------------------------------------------------------

def _shifted(ds, gene, shift):
    X = ds.expressions.copy()
    rows = [i for i, lab in enumerate(ds.labels) if data.pert_key(lab) == "G001"]
    X[np.ix_(rows, [gene])] += shift
    return dataclasses.replace(ds, expressions=X)


def test_select_degs():
    ds = data.generate(toy_spec())
    assert data.select_degs(_shifted(ds, 7, 50.0), "G001", 5)[0] == 7
    everything = data.select_degs(ds, "G001", 1000)
    assert sorted(everything) == list(range(ds.n_genes))
    lfc = np.abs(ds.logfc("G001"))
    assert np.all(np.diff(lfc[everything]) <= 0)


def test_select_degs_ties_by_index():
    X = np.zeros((4, 5))
    X[2:, [1, 3]] = 1.0
    ds = data.PerturbationDataset(X, ["a", "b", "c", "d"], list("vwxyz"), [(), (), ("p",), ("p",)], {"p": "train"})
    assert data.select_degs(ds, "p", 3) == [1, 3, 0]


# -- on-disk format ------------------------------------------------------------------------------

def test_save_load_round_trip(toy_dataset, tmp_path):
    data.save(toy_dataset, tmp_path / "ds")
    back = data.load(tmp_path / "ds")
    np.testing.assert_array_equal(back.expressions, toy_dataset.expressions)
    assert back.cell_ids == toy_dataset.cell_ids and back.gene_names == toy_dataset.gene_names
    assert back.labels == toy_dataset.labels and back.splits == toy_dataset.splits
    assert back.reference_e == toy_dataset.reference_e and back.e_band == toy_dataset.e_band
    np.testing.assert_array_equal(back.pca.components, toy_dataset.pca.components)
    for g, v in toy_dataset.embeddings.items():
        np.testing.assert_array_equal(back.embeddings[g], v)
    assert back.meta["seed"] == 3 and back.meta["tiers"] == toy_dataset.meta["tiers"]


def test_missing_split_column(toy_dataset, tmp_path):
    path = data.save(toy_dataset, tmp_path / "ds")
    lab = path / data.LABELS_FILE
    lines = lab.read_text().splitlines()
    lab.write_text("\n".join("\t".join(line.split("\t")[:2]) for line in lines) + "\n")
    with pytest.raises(DataFormatError, match="split"):
        data.load(path)


def test_malformed_number_reports_line(toy_dataset, tmp_path):
    path = data.save(toy_dataset, tmp_path / "ds")
    expr = path / data.EXPRESSION_FILE
    lines = expr.read_text().splitlines()
    body = [i for i, line in enumerate(lines) if not line.startswith("#")]
    target = body[3]
    fields = lines[target].split("\t")
    fields[2] = "oops"
    lines[target] = "\t".join(fields)
    expr.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=f":{target + 1}"):
        data.load(path)


def test_dataset_invariants():
    X = np.zeros((2, 2))
    with pytest.raises(DataFormatError):
        data.PerturbationDataset(X, ["a", "b"], ["x", "y"], [(), ("p",)], {})
    with pytest.raises(DataFormatError):
        data.PerturbationDataset(X, ["a", "b"], ["x", "y"], [("q",), ("p",)], {"p": "train", "q": "train"})
    with pytest.raises(DataFormatError):
        data.PerturbationDataset(X, ["a", "b"], ["x", "y"], [(), ("p",)], {"p": "holdout"})
