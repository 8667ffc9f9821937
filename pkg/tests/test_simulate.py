import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from otbump.bumphunt import counting_test
from otbump.errors import InvalidArgumentError, SchemaError
from otbump.simulate import (
    EventSet,
    GeneratorSpec,
    LabeledEvent,
    PowerConfig,
    auc,
    builtin_classifier,
    gaussian_auc,
    make_rng,
    power_analysis,
    read_csv,
    sample_class,
    sample_events,
    transform_mass,
    write_csv,
)


# -- generator ----------------------------------------------------------------

def test_degenerate_mixtures():
    assert np.all(sample_events(GeneratorSpec(lam=0.0), 5000).label == 0)
    assert np.all(sample_events(GeneratorSpec(lam=1.0), 5000).label == 1)


def test_signal_fraction_matches_lambda():
    ev = sample_events(GeneratorSpec(lam=0.05, seed=3), 100_000)
    assert ev.label.mean() == pytest.approx(0.05, abs=0.002)


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        GeneratorSpec(lam=1.5)
    with pytest.raises(InvalidArgumentError):
        GeneratorSpec(signal_sigma=0.0)
    with pytest.raises(InvalidArgumentError):
        GeneratorSpec(background="bernstein", background_gamma=(1.0, 2.0))
    with pytest.raises(InvalidArgumentError):
        GeneratorSpec(score_model="other")
    with pytest.raises(InvalidArgumentError):
        sample_events(GeneratorSpec(), 0)


@pytest.mark.parametrize("spec", [
    GeneratorSpec(),
    GeneratorSpec(background_rate=0.0),
    GeneratorSpec(background="bernstein", background_gamma=(2.0, 0.5, 0.5)),
])
def test_background_masses_follow_their_cdf(spec):
    mass = sample_class(spec, 20_000, 0, stream=0).mass
    assert np.all((mass >= 0) & (mass <= 1))
    assert stats.kstest(mass, spec.background_cdf).pvalue > 1e-3


def test_signal_masses_follow_truncated_gaussian():
    spec = GeneratorSpec(signal_sigma=0.2)
    mass = sample_class(spec, 20_000, 1, stream=0).mass
    assert np.all((mass >= 0) & (mass <= 1))
    assert stats.kstest(mass, spec.signal_cdf).pvalue > 1e-3


def test_correlated_scores_rise_with_mass():
    ev = sample_class(GeneratorSpec(), 20_000, 0, stream=0)
    assert stats.spearmanr(ev.mass, ev.score)[0] > 0.3
    flat = sample_class(GeneratorSpec(score_model="independent"), 20_000, 0, stream=0)
    assert abs(stats.spearmanr(flat.mass, flat.score)[0]) < 0.03


def test_raw_cut_sculpts_background():
    ev = sample_class(GeneratorSpec(), 50_000, 0, stream=0)
    keep = ev.score >= np.quantile(ev.score, 0.5)
    assert stats.ks_2samp(ev.mass[keep], ev.mass[~keep]).statistic > 0.2


def test_seed_determinism_and_stream_separation():
    spec = GeneratorSpec(lam=0.1, seed=42)
    a = sample_events(spec, 1000, stream=0, index=3)
    b = sample_events(spec, 1000, stream=0, index=3)
    for col in ("mass", "score", "label"):
        assert np.array_equal(getattr(a, col), getattr(b, col))
    c = sample_events(spec, 1000, stream=0, index=4)
    assert not np.array_equal(a.mass, c.mass)
    d = sample_events(replace(spec, seed=43), 1000, stream=0, index=3)
    assert not np.array_equal(a.mass, d.mass)


def test_make_rng_keys_are_independent_of_call_order():
    x = make_rng(7, 3, 1).random(4)
    make_rng(7, 3, 0).random(100)
    assert np.array_equal(make_rng(7, 3, 1).random(4), x)


def test_spec_dict_roundtrip():
    spec = GeneratorSpec(background="bernstein", background_gamma=(1.5, 0.5), lam=0.2, seed=9)
    assert GeneratorSpec.from_dict(spec.to_dict()) == spec


def test_known_background_recovers_leakage_bias():
    spec = GeneratorSpec(lam=0.05, signal_sigma=0.04, seed=5)
    lo, hi = 0.45, 0.55
    b_s = float(spec.background_cdf(hi) - spec.background_cdf(lo))
    leak = 1.0 - float(spec.signal_cdf(hi) - spec.signal_cdf(lo))
    expected = spec.lam * (1.0 - leak / (1.0 - b_s))
    est = []
    for r in range(2000):
        ev = sample_events(spec, 20_000, stream=3, index=r)
        inside = int(np.count_nonzero((ev.mass >= lo) & (ev.mass <= hi)))
        est.append(counting_test(inside, ev.mass.size, b_s).lam)
    est = np.asarray(est)
    assert abs(est.mean() - expected) <= 3 * est.std(ddof=1) / np.sqrt(est.size)


# -- mass transform -------------------------------------------------------------

def test_transform_mass_examples():
    assert transform_mass(500.0, 500.0, 0.003) == 0.0
    m = np.linspace(500, 3000, 200)
    out = transform_mass(m, 500.0, 0.003)
    assert np.all(np.diff(out) > 0) and np.all(out < 1)
    np.testing.assert_allclose(out, 1 - np.exp(-0.003 * (m - 500)), rtol=1e-14)
    with pytest.raises(InvalidArgumentError):
        transform_mass([499.0, 600.0], 500.0, 0.003)
    with pytest.raises(InvalidArgumentError):
        transform_mass(600.0, 500.0, 0.0)


def test_transform_mass_uniformizes_shifted_exponential():
    rng = np.random.default_rng(21)
    m = 500.0 + rng.exponential(1 / 0.003, 10_000)
    assert stats.kstest(transform_mass(m, 500.0, 0.003), "uniform").statistic <= 0.02


@settings(max_examples=50, deadline=None)
@given(b=st.floats(-100, 100), r=st.floats(1e-4, 10), d=st.lists(st.floats(0, 1e3), min_size=2))
def test_transform_mass_monotone_property(b, r, d):
    m = b + np.sort(np.asarray(d))
    out = transform_mass(m, b, r)
    assert np.all(np.diff(out) >= 0)
    assert np.all((out >= 0) & (out < 1) | (out == 1.0))


# -- toy classifier -------------------------------------------------------------

def test_uninformative_features_give_prior():
    rng = np.random.default_rng(22)
    x = rng.normal(0, 1, 20_000)
    y = rng.random(20_000) < 0.3
    clf = builtin_classifier(x, y)
    assert np.abs(clf.predict(x) - 0.3).max() < 0.05


def test_separable_feature_gives_unit_auc():
    rng = np.random.default_rng(23)
    n = 5000
    x = np.r_[rng.uniform(0, 1, n), rng.uniform(2, 3, n)]
    y = np.r_[np.zeros(n), np.ones(n)]
    p = builtin_classifier(x, y).predict(x)
    assert auc(p[y == 1], p[y == 0]) == pytest.approx(1.0, abs=1 / n)


def test_gaussian_overlap_auc():
    rng = np.random.default_rng(24)
    n = 10_000
    x = np.r_[rng.normal(0, 1, n), rng.normal(1, 1, n)]
    y = np.r_[np.zeros(n), np.ones(n)]
    p = builtin_classifier(x, y).predict(x)
    assert gaussian_auc(1.0) == pytest.approx(0.7602, abs=1e-4)
    assert auc(p[y == 1], p[y == 0]) == pytest.approx(gaussian_auc(1.0), abs=0.02)


def test_classifier_is_deterministic_and_multifeature():
    rng = np.random.default_rng(25)
    x = rng.normal(0, 1, (2000, 3))
    y = (x[:, 0] + x[:, 1] + rng.normal(0, 1, 2000)) > 0
    a = builtin_classifier(x, y).predict(x)
    b = builtin_classifier(x, y).predict(x)
    assert np.array_equal(a, b)
    assert auc(a[y], a[~y]) > 0.75
    with pytest.raises(InvalidArgumentError):
        builtin_classifier(x, np.zeros(2000))


def test_auc_ties_count_half():
    assert auc([1.0, 1.0], [1.0]) == 0.5
    assert auc([2.0], [1.0, 3.0]) == 0.5


# -- CSV --------------------------------------------------------------------------

def test_csv_roundtrip_with_extra_columns(tmp_path):
    ev = sample_events(GeneratorSpec(lam=0.2, seed=1), 300)
    ev = ev.with_column("run", np.arange(300).astype(str)).with_column("aux", ev.mass * 2)
    path = tmp_path / "ev.csv"
    write_csv(ev, path)
    back = read_csv(path)
    for col in ("mass", "score", "label", "weight"):
        assert np.array_equal(getattr(back, col), getattr(ev, col))
    assert list(back.extra) == ["run", "aux"]
    assert back.extra["run"].tolist() == ev.extra["run"].tolist()
    assert np.array_equal(back.extra["aux"].astype(float), ev.extra["aux"])
    buf = io.StringIO()
    write_csv(back, buf)
    assert buf.getvalue() == path.read_text()


def test_csv_optional_columns_and_schema_errors():
    ev = read_csv(io.StringIO("mass,score\n0.1,0.2\n0.3,0.4\n"))
    assert not ev.has_labels and np.all(ev.weight == 1.0)
    assert ev[1] == LabeledEvent(0.3, 0.4, None, 1.0)
    with pytest.raises(SchemaError, match="score"):
        read_csv(io.StringIO("mass\n0.1\n"))
    with pytest.raises(SchemaError):
        read_csv(io.StringIO("mass,score\n0.1,abc\n"))
    with pytest.raises(SchemaError):
        read_csv(io.StringIO("mass,score,label\n0.1,0.2,x\n"))


def test_event_set_helpers():
    events = [LabeledEvent(0.1, 0.2, 1), LabeledEvent(0.3, 0.4, None, 2.0)]
    es = EventSet.from_events(events)
    assert list(es) == events
    assert len(es.take([1])) == 1 and es.take([1])[0] == events[1]
    with pytest.raises(SchemaError):
        EventSet(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2))


# -- power harness ------------------------------------------------------------------

@pytest.mark.parametrize("approach", ["split", "locscale"])
def test_cut_boundary_matches_per_event_transport(approach):
    from otbump.cdot import fit_cdot_locscale, fit_cdot_split
    from otbump.simulate import _boundary_grid, _cut_boundary

    spec = GeneratorSpec(seed=8)
    train = sample_class(spec, 3000, 0, stream=1)
    test = sample_class(spec, 5000, 0, stream=2)
    tmap = (fit_cdot_split(train.score, train.mass, (0.5,)) if approach == "split"
            else fit_cdot_locscale(train.score, train.mass, clamp=True))
    moved = tmap.transport(test.score, test.mass)
    grid = _boundary_grid(test.mass)
    for level in np.quantile(moved, [0.3, 0.7, 0.95]):
        edge = _cut_boundary(tmap, level, grid, test.score.min(), test.score.max())
        margin = test.score - np.interp(test.mass, grid, edge)
        disagree = (margin >= 0) != (moved >= level)
        # only events sitting on the edge itself may land on the other side
        assert disagree.sum() <= 2
        assert np.all(np.abs(margin[disagree]) < 1e-4)


def test_cut_boundary_handles_levels_no_score_reaches():
    from otbump.simulate import _cut_boundary

    class Shift:
        def transport(self, z, m):
            return np.asarray(z) + np.asarray(m)

    grid = np.linspace(0.0, 1.0, 5)
    edge = _cut_boundary(Shift(), 1.5, grid, 0.0, 1.0)
    np.testing.assert_allclose(edge[2:], [1.0, 0.75, 0.5], atol=1e-9)
    assert np.all(edge[:2] > 1.0)
    assert np.all(_cut_boundary(Shift(), -1.0, grid, 0.0, 1.0) == 0.0)


SMALL = PowerConfig(
    lambdas=(0.0, 0.05, 0.2), cut_levels=(0.0, 0.5), n_datasets=12, n=3000, K=5,
    n_train=3000, n_cut_sample=5000, n_validation_signal=2000,
    pool_background=20_000, pool_signal=2000, bins_per_side=10, seed=3,
)


@pytest.fixture(scope="module")
def small_report():
    return power_analysis(GeneratorSpec(), SMALL)


def test_power_report_shape_and_invariants(small_report):
    rep = small_report
    assert len(rep.cells) == 3 * 2 * 2
    for c in rep.cells:
        assert 0.0 <= c.power <= 1.0
        assert c.interval.lower <= c.power <= c.interval.upper
        assert c.successes + c.failures == SMALL.n_datasets
    assert rep.K == 5
    lo, hi = rep.region
    assert 0.4 < lo < 0.5 < hi < 0.6


def test_power_grows_with_signal(small_report):
    rep = small_report
    for t in SMALL.cut_levels:
        a = rep.cell(0.0, t, True)
        b = rep.cell(0.2, t, True)
        assert b.power >= a.power
        assert b.mean_lambda_hat > a.mean_lambda_hat


def test_power_cells_flag_low_statistics():
    cfg = replace(SMALL, n_datasets=3, lambdas=(0.0,), cut_levels=(0.0, 0.9), min_events=400)
    rep = power_analysis(GeneratorSpec(), cfg)
    assert not rep.cell(0.0, 0.0, True).low_statistics
    assert rep.cell(0.0, 0.9, True).low_statistics


def test_power_is_deterministic_and_thread_invariant(small_report):
    again = power_analysis(GeneratorSpec(), SMALL, workers=3)
    assert again.to_dict() == small_report.to_dict()
    buf1, buf2 = io.StringIO(), io.StringIO()
    small_report.write_csv(buf1)
    again.write_csv(buf2)
    assert buf1.getvalue() == buf2.getvalue()
    assert buf1.getvalue().splitlines()[0] == "lambda,cut,decorrelated,power,ci_lo,ci_hi,n_reps"


def test_power_accepts_a_spec_grid():
    specs = [GeneratorSpec(lam=lam) for lam in (0.0, 0.2)]
    cfg = replace(SMALL, n_datasets=2, cut_levels=(0.0,))
    rep = power_analysis(specs, cfg)
    assert rep.config.lambdas == (0.0, 0.2)
    with pytest.raises(InvalidArgumentError):
        power_analysis([GeneratorSpec(), GeneratorSpec(signal_sigma=0.1)], cfg)


def test_power_config_validation_and_roundtrip():
    assert PowerConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(InvalidArgumentError):
        replace(SMALL, pool_background=10)
    with pytest.raises(InvalidArgumentError):
        replace(SMALL, cut_levels=(1.0,))
