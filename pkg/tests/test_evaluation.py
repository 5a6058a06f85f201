import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prescribe import evaluation as ev
from prescribe.data import select_degs
from prescribe.errors import DataFormatError, DomainError


def _records(n=20, seed=0, conf=None, noise=None, tiers=None):
    """Records whose Pearson accuracy falls as ``noise`` grows."""
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal(50)
    noise = np.linspace(0.1, 3.0, n) if noise is None else np.asarray(noise)
    conf = -noise if conf is None else np.asarray(conf)
    out = []
    for i in range(n):
        pred = truth + noise[i] * rng.standard_normal(50)
        out.append(ev.PredictionRecord(f"p{i:02d}", pred, truth, float(conf[i]), 15.0, 15.0, list(range(10)),
                                       None if tiers is None else tiers[i], float(i), 10))
    return out


# -- metrics ------------------------------------------------------------------------

def test_correlation_examples():
    v = np.array([0.3, -1.0, 2.0, 0.5])
    assert ev.pearson(v, v) == pytest.approx(1.0)
    assert ev.spearman(v, v) == pytest.approx(1.0)
    assert ev.pearson(v, -v) == pytest.approx(-1.0)
    assert ev.spearman([1, 2, 3], [10, 20, 15]) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        ev.pearson([1, 1, 1], [1, 2, 3])
    assert ev.safe_pearson([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        ev.pearson([1, 2], [1, 2, 3])


def test_directional_accuracy():
    assert ev.directional_accuracy([1, -2, 3], [1, -2, 3]) == 1.0
    assert ev.directional_accuracy([0.0, 1.0, -1.0, 0.0], [0.0, 2.0, 1.0, 1.0]) == 0.5


@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True), st.integers(0, 1000))
def test_spearman_monotone_invariance(a, seed):
    a = np.array(a, dtype=float)
    b = np.random.default_rng(seed).standard_normal(len(a))
    base = ev.spearman(a, b)
    assert ev.spearman(np.exp(a / 500), b) == pytest.approx(base, abs=1e-12)
    assert ev.spearman(a, b**3) == pytest.approx(base, abs=1e-12)
    assert -1 <= base <= 1


def test_bucket_accuracy_examples():
    acc = np.random.default_rng(0).standard_normal(25)
    assert ev.percentile_bucket_accuracy(acc, acc) == 1.0
    ranks = np.argsort(np.argsort(acc))
    reversed_conf = -ranks.astype(float)
    # enumeration: rank r lands in bucket r // 5, its reversal in (24 - r) // 5
    expected = sum(r // 5 == (24 - r) // 5 for r in range(25)) / 25
    assert expected == 0.2
    assert ev.percentile_bucket_accuracy(reversed_conf, acc) == expected
    rng = np.random.default_rng(1)
    assert ev.percentile_bucket_accuracy(rng.random(5000), rng.random(5000)) == pytest.approx(0.2, abs=0.05)
    with pytest.raises(DomainError):
        ev.percentile_bucket_accuracy([1, 2], [1, 2])


def test_ece_examples():
    c = np.linspace(0, 1, 17)
    assert ev.ece(c, c) == pytest.approx(0.0, abs=1e-15)
    assert ev.ece(np.ones(5), np.zeros(5)) == 1.0
    conf = [0.8, 0.8, 0.3, 0.3]
    acc = [0.6, 0.6, 0.3, 0.3]
    assert ev.ece(conf, acc, bins=2) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        ev.ece([], [])


def test_rescaling_maps():
    np.testing.assert_allclose(ev.rescale_confidence([0, 15, 30], 10), [0, 0.5, 1])
    np.testing.assert_allclose(ev.rescale_accuracy([-1, 0, 1]), [0, 0.5, 1])


# -- calibration curve -------------------------------------------------------------------

def test_calibration_curve_monotone_input():
    recs = _records(25)
    rep = ev.calibration_curve(recs, bins=5)
    assert len(rep.bins) == 5
    means = [b["mean_acc"] for b in rep.bins]
    assert np.all(np.diff(means) > 0)
    assert ev.spearman(np.arange(5), means) == pytest.approx(1.0)
    assert sum(b["count"] for b in rep.bins) == 25
    assert rep.rs_perf_conf > 0.8 and 0 <= rep.ece <= 1


def test_calibration_curve_needs_enough_records():
    with pytest.raises(DomainError):
        ev.calibration_curve(_records(3), bins=5)


# -- filtering ------------------------------------------------------------------------------

def test_filter_fraction_zero_is_identity():
    recs = _records()
    kept, delta = ev.filter_bottom(recs, 0.0)
    assert kept == recs and all(v == 0 for v in delta.values())


def test_filter_drops_floor_count():
    recs = _records(20)
    kept, _ = ev.filter_bottom(recs, 0.1)
    assert len(kept) == 18
    assert {r.pert_id for r in recs} - {r.pert_id for r in kept} == {"p18", "p19"}


def test_filter_worst_and_least_confident_raises_accuracy():
    recs = _records(20)
    _, delta = ev.filter_bottom(recs, 0.1)
    assert delta["pearson"] > 0


@given(st.floats(0, 0.5), st.floats(0, 0.5), st.integers(0, 100))
def test_filter_nesting(f1, f2, seed):
    f1, f2 = sorted((f1, f2))
    conf = np.random.default_rng(seed).standard_normal(30)
    recs = _records(30, conf=conf)
    a = {r.pert_id for r in ev.filter_bottom(recs, f1)[0]}
    b = {r.pert_id for r in ev.filter_bottom(recs, f2)[0]}
    assert b <= a


def test_filter_fraction_domain():
    with pytest.raises(DomainError):
        ev.filter_bottom(_records(), 0.6)


def test_random_baseline():
    recs = _records()
    zero = ev.random_filter_baseline(recs, 0.0, repeats=5, seed=1)
    full = ev.summarize(recs)
    for m in ev.METRICS:
        assert zero[m] == (pytest.approx(full[m]), 0.0)
    assert ev.random_filter_baseline(recs, 0.2, seed=3) == ev.random_filter_baseline(recs, 0.2, seed=3)
    confident = ev.filter_bottom(recs, 0.2)[0]
    mean, sd = ev.random_filter_baseline(recs, 0.2, seed=3)["pearson"]
    assert ev.summarize(confident)["pearson"] > mean + sd


# -- difficulty ---------------------------------------------------------------------------------

def test_difficulty_report():
    recs = _records(9, tiers=[0, 1, 2] * 3)
    rows = ev.difficulty_report(recs)
    assert [r["tier"] for r in rows] == [0, 1, 2]
    assert all(r["count"] == 3 for r in rows)
    assert rows[0]["mean_reference_e"] == pytest.approx(np.mean([0, 3, 6]))
    with pytest.raises(DomainError):
        ev.difficulty_report(_records(4, tiers=[0, 0, 1, 1]))


# -- records -------------------------------------------------------------------------------------

def test_record_metrics_use_deg_indices():
    truth = np.arange(30, dtype=float)
    pred = truth.copy()
    pred[20:] = -pred[20:]
    r = ev.PredictionRecord("x", pred, truth, 1.0, 15.0, 15.0, list(range(10)))
    assert r.metrics()["pearson_deg"] == pytest.approx(1.0)
    assert r.metrics()["pearson"] < 0.5
    with pytest.raises(ValueError):
        ev.PredictionRecord("x", pred[:3], truth, 1.0, 15.0, 15.0, [])


def test_make_records(toy_model, toy_dataset):
    recs = ev.make_records(toy_model, toy_dataset, "test", k_deg=5)
    assert [r.pert_id for r in recs] == toy_dataset.perturbations("test")
    for r in recs:
        assert r.degs == select_degs(toy_dataset, r.pert_id, 5)
        np.testing.assert_array_equal(r.truth, toy_dataset.logfc(r.pert_id))
        assert 0 <= r.confidence <= 3 * r.n_dim
        assert r.tier == toy_dataset.tier(r.pert_id)


def test_records_round_trip(tmp_path, toy_model, toy_dataset):
    recs = ev.make_records(toy_model, toy_dataset, "test")
    ev.write_records(tmp_path / "p.tsv", recs)
    back = ev.read_records(tmp_path / "p.tsv")
    for a, b in zip(recs, back):
        assert (a.pert_id, a.confidence, a.nu_tilde, a.h_tilde, a.degs, a.tier, a.reference_e, a.n_dim) == \
               (b.pert_id, b.confidence, b.nu_tilde, b.h_tilde, b.degs, b.tier, b.reference_e, b.n_dim)
        np.testing.assert_array_equal(a.predicted, b.predicted)
        np.testing.assert_array_equal(a.truth, b.truth)


def test_records_missing_column(tmp_path):
    (tmp_path / "p.tsv").write_text("perturbation\ttier\nx\t0\n")
    with pytest.raises(DataFormatError, match="n_dim"):
        ev.read_records(tmp_path / "p.tsv")
