import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from battshare import (
    AlignmentError,
    CadenceError,
    DomainError,
    ParseError,
    TraceSeries,
    aggregate,
    autonomy_hours,
    fit_dtmc,
    load_chain,
    load_trace,
    net_generation,
    resample,
    save_trace,
    to_energy,
    to_power,
)
from battshare.ingest import demand_level


def _write(tmp_path, rows, header="timestamp,power_mw", name="site.csv"):
    path = tmp_path / name
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def _series(values, start="2007-01-01T00:00:00", unit="MW", location="x", cadence=300):
    return TraceSeries.from_values(np.asarray(values, dtype=float), location=location, unit=unit,
                                   start=start, cadence_seconds=cadence)


class TestLoadTrace:
    def test_two_rows(self, tmp_path):
        t = load_trace(_write(tmp_path, ["2007-01-01T00:00:00Z,1.5", "2007-01-01T00:05:00Z,2.0"]))
        assert len(t) == 2 and t.location == "site" and t.unit == "MW"
        np.testing.assert_array_equal(t.values, [1.5, 2.0])
        assert t.start == np.datetime64("2007-01-01T00:00:00")

    def test_offset_notation(self, tmp_path):
        t = load_trace(_write(tmp_path, ["2007-01-01T00:00:00+00:00,1", "2007-01-01T00:05:00+00:00,2"]))
        assert len(t) == 2

    def test_duplicate(self, tmp_path):
        rows = ["2007-01-01T00:00:00Z,1", "2007-01-01T00:05:00Z,2", "2007-01-01T00:05:00Z,3"]
        with pytest.raises(ParseError, match="duplicate") as err:
            load_trace(_write(tmp_path, rows))
        assert err.value.line == 4

    def test_out_of_order(self, tmp_path):
        rows = ["2007-01-01T00:05:00Z,1", "2007-01-01T00:00:00Z,2"]
        with pytest.raises(ParseError, match="order"):
            load_trace(_write(tmp_path, rows))

    def test_cadence_mismatch(self, tmp_path):
        rows = ["2007-01-01T00:00:00Z,1", "2007-01-01T00:10:00Z,2"]
        path = _write(tmp_path, rows)
        with pytest.raises(CadenceError) as err:
            load_trace(path, cadence_seconds=300)
        assert err.value.line == 3
        assert len(load_trace(path, cadence_seconds=600)) == 2

    def test_irregular_spacing(self, tmp_path):
        rows = ["2007-01-01T00:00:00Z,1", "2007-01-01T00:07:00Z,2"]
        with pytest.raises(CadenceError):
            load_trace(_write(tmp_path, rows), forward_fill=True)

    def test_forward_fill(self, tmp_path):
        rows = ["2007-01-01T00:00:00Z,1", "2007-01-01T00:15:00Z,4"]
        t = load_trace(_write(tmp_path, rows), forward_fill=True)
        np.testing.assert_array_equal(t.values, [1, 1, 1, 4])

    @pytest.mark.parametrize(
        "rows,header,line",
        [
            (["2007-01-01T00:00:00Z,1"], "time,power", 1),
            (["2007-01-01T00:00:00Z,1", "yesterday,2"], "timestamp,power_mw", 3),
            (["2007-01-01T00:00:00Z,abc"], "timestamp,power_mw", 2),
            (["2007-01-01T00:00:00Z,1,2"], "timestamp,power_mw", 2),
            (["2007-01-01T00:00:00+02:00,1"], "timestamp,power_mw", 2),
            (["2007-01-01T00:00:00Z,nan"], "timestamp,power_mw", 2),
        ],
    )
    def test_schema_errors_carry_line(self, tmp_path, rows, header, line):
        with pytest.raises(ParseError) as err:
            load_trace(_write(tmp_path, rows, header=header))
        assert err.value.line == line
        assert str(err.value).startswith(f"line {line}:")

    def test_empty(self, tmp_path):
        with pytest.raises(ParseError):
            load_trace(_write(tmp_path, []))

    def test_round_trip(self, tmp_path):
        t = _series(np.random.default_rng(0).uniform(0, 16, 50), location="site")
        save_trace(t, tmp_path / "site.csv")
        back = load_trace(tmp_path / "site.csv")
        np.testing.assert_array_equal(back.values, t.values)
        assert back.start == t.start


class TestNetGeneration:
    def test_constant(self):
        np.testing.assert_allclose(net_generation(_series([10.0] * 5), 0.6).values, 4.0)

    def test_two_points(self):
        # Mean 10, constant demand 6.
        np.testing.assert_allclose(net_generation(_series([0.0, 20.0]), 0.6).values, [-6.0, 14.0])

    def test_location_a_autonomy(self):
        demand = 0.6 * 6.3498
        assert demand == pytest.approx(3.80988, abs=1e-12)
        assert autonomy_hours(360000, demand) == pytest.approx(26.2475, abs=1e-3)

    def test_demand_level(self):
        assert demand_level(_series([0.0, 20.0]), 0.25) == 2.5

    @pytest.mark.parametrize("f", [0.0, 1.0, 1.2])
    def test_bad_fraction(self, f):
        with pytest.raises(DomainError):
            net_generation(_series([1.0, 2.0]), f)

    def test_zero_mean(self):
        with pytest.raises(DomainError):
            net_generation(_series([0.0, 0.0]))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), f=st.floats(0.01, 0.99))
    def test_mean_property(self, seed, f):
        t = _series(np.random.default_rng(seed).uniform(0, 16, 200))
        assert net_generation(t, f).mean() == pytest.approx((1 - f) * t.mean(), abs=1e-12)


class TestAggregate:
    def test_zero_trace(self):
        x = _series([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(aggregate([x, _series([0.0] * 3, location="z")]).values, x.values)

    def test_doubling(self):
        x = _series([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(aggregate([x, x]).values, [2.0, -4.0, 6.0])

    def test_offset_by_one_step(self):
        a = _series([1.0, 2.0, 3.0, 4.0], location="a")
        b = _series([10.0, 20.0, 30.0, 40.0], start="2007-01-01T00:05:00", location="b")
        agg = aggregate([a, b])
        assert len(agg) == 3 and agg.location == "a+b"
        np.testing.assert_array_equal(agg.values, [12.0, 23.0, 34.0])
        assert agg.start == b.start

    def test_errors(self):
        a = _series([1.0, 2.0])
        with pytest.raises(AlignmentError):
            aggregate([])
        with pytest.raises(AlignmentError, match="common"):
            aggregate([a, _series([1.0], start="2007-02-01T00:00:00")])
        with pytest.raises(AlignmentError, match="cadence"):
            aggregate([a, _series([1.0, 2.0], cadence=600)])
        with pytest.raises(AlignmentError, match="grid"):
            aggregate([a, _series([1.0, 2.0], start="2007-01-01T00:01:00")])
        with pytest.raises(AlignmentError, match="MJ"):
            aggregate([a, _series([1.0, 2.0], unit="MJ")])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shifts=st.lists(st.integers(0, 5), min_size=3, max_size=3))
    def test_commutative_associative(self, seed, shifts):
        rng = np.random.default_rng(seed)
        a, b, c = (
            _series(rng.integers(-5, 5, 20).astype(float), location=n,
                    start=np.datetime64("2007-01-01T00:00:00") + np.timedelta64(300 * k, "s"))
            for n, k in zip("abc", shifts)
        )
        ref = aggregate([a, b, c]).values
        np.testing.assert_array_equal(aggregate([c, a, b]).values, ref)
        np.testing.assert_array_equal(aggregate([aggregate([a, b]), c]).values, ref)
        np.testing.assert_array_equal(aggregate([a, aggregate([b, c])]).values, ref)


class TestUnits:
    def test_energy_per_step(self):
        e = to_energy(_series([1.0, 2.0]))
        assert e.unit == "MJ"
        np.testing.assert_array_equal(e.values, [300.0, 600.0])
        assert to_energy(e) is e

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=50))
    def test_round_trip_within_one_ulp(self, xs):
        # x * 300 / 300 is not always bit-exact in binary64; it never drifts further.
        t = _series(xs)
        np.testing.assert_array_max_ulp(to_power(to_energy(t)).values, t.values, maxulp=1)

    def test_round_trip_exact_on_integers(self):
        t = _series(np.arange(-50.0, 50.0) * 0.25)
        np.testing.assert_array_equal(to_power(to_energy(t)).values, t.values)


class TestResample:
    def test_identity(self):
        t = _series(np.arange(10.0))
        assert resample(t, 1) is t

    def test_power_decimates(self):
        r = resample(_series(np.arange(10.0)), 2)
        assert len(r) == 5 and r.cadence_seconds == 600
        np.testing.assert_array_equal(r.values, [0, 2, 4, 6, 8])

    def test_energy_summed(self):
        r = resample(_series(np.arange(10.0), unit="MJ"), 2)
        np.testing.assert_array_equal(r.values, [1, 5, 9, 13, 17])
        assert r.values.sum() == np.arange(10.0).sum()

    def test_errors(self):
        with pytest.raises(DomainError):
            resample(_series([1.0]), 0)
        with pytest.raises(DomainError):
            resample(_series([1.0], unit="MJ"), 2)


class TestFitDtmc:
    def test_identity_bins(self):
        rep = fit_dtmc([1.0, 1.0, 2.0, 1.0], bins="unique")
        np.testing.assert_allclose(rep.model.transition, [[0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_array_equal(rep.counts, [[1, 1], [1, 0]])
        assert not rep.a1_ok and not rep.smoothed

    def test_smoothing(self):
        rep = fit_dtmc([1.0, 1.0, 2.0, 1.0], bins="unique", smoothing=1.0)
        np.testing.assert_allclose(rep.model.transition[1], [2 / 3, 1 / 3], rtol=1e-15)
        assert rep.a1_ok and rep.smoothed

    def test_a2_flag(self):
        rep = fit_dtmc([1.0, 1.0, 2.0, 1.0], bins="unique", smoothing=1.0)
        assert not rep.a2_ok
        assert fit_dtmc([-1.0, 1.0, 1.0, -1.0], bins="unique", smoothing=1.0).a2_ok

    @pytest.mark.slow
    def test_iid_convergence(self):
        x = np.random.default_rng(7).choice([-1.0, 1.0], p=[0.4, 0.6], size=10**6)
        rep = fit_dtmc(x, bins="unique")
        np.testing.assert_allclose(rep.model.transition, [[0.4, 0.6], [0.4, 0.6]], atol=0.01)
        assert rep.model.net_gen.tolist() == [-1, 1]

    def test_quantile_bins_and_granularity(self):
        x = np.random.default_rng(1).normal(0.5, 3.0, 5000)
        rep = fit_dtmc(x, bins=8, granularity=0.5)
        assert rep.model.n_states == 8
        np.testing.assert_allclose(rep.model.net_gen, np.rint(rep.centers / 0.5))
        occupancy = rep.counts.sum(axis=1)
        assert occupancy.max() - occupancy.min() <= 2

    def test_explicit_edges_drop_empty(self):
        with pytest.warns(RuntimeWarning, match="empty"):
            rep = fit_dtmc([0.5, 2.5, 0.5, 2.5], bins=[0, 1, 2, 3])
        assert rep.dropped_bins == [1] and rep.model.n_states == 2

    def test_errors(self):
        with pytest.raises(DomainError):
            fit_dtmc([1.0])
        with pytest.raises(DomainError, match="single"):
            fit_dtmc([1.0, 1.0, 1.0], bins="unique")
        with pytest.raises(DomainError):
            fit_dtmc([1.0, 2.0], bins=1)
        with pytest.raises(DomainError):
            fit_dtmc([1.0, 2.0], bins=[0, 2, 1])
        with pytest.raises(DomainError):
            fit_dtmc([1.0, 2.0], granularity=0)

    def test_write(self, tmp_path):
        rep = fit_dtmc([-1.0, 1.0, 1.0, -1.0, 1.0], bins="unique", smoothing=0.5)
        rep.write(tmp_path / "chain.json")
        back = load_chain(tmp_path / "chain.json")
        np.testing.assert_allclose(back.transition, rep.model.transition)
        meta = json.loads((tmp_path / "chain.meta.json").read_text())
        assert meta["smoothing"] == 0.5 and meta["a1_ok"] is True

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(10, 400), bins=st.integers(2, 6))
    def test_counts_conserved(self, seed, n, bins):
        x = np.random.default_rng(seed).normal(size=n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # tiny samples can leave quantile bins empty
            rep = fit_dtmc(x, bins=bins)
        assert rep.counts.sum() == n - 1
        np.testing.assert_allclose(rep.model.transition.sum(axis=1), 1.0, atol=1e-12)
