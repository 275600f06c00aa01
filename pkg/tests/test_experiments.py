import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from smoothent import experiments as ex
from smoothent.bounds import NumericError
from smoothent.entropy import McBudget, mixture_entropy_mc
from smoothent.experiments import (
    COLUMNS,
    EXIT_NUMERIC,
    ExperimentSpec,
    Family,
    SpecError,
    build_corner_mixture,
    corner_entropy,
    fit_rate,
    format_value,
    load_spec,
    parse_config,
    parse_value,
    read_rows,
    run,
    run_to_text,
    spec_echo,
    spec_from_csv,
    spec_from_mapping,
)
from smoothent.mixture import GaussianMixture, log_density, sample

ROOT = Path(__file__).parent.parent
FIXTURES = Path(__file__).parent / "fixtures"


SMALL = {
    Family.CORNER_MIXTURE: {"d": 2, "sigma": 0.3, "n_grid": (20, 40, 80), "reps": 3, "n_mc": 10},
    Family.MC_CONVERGENCE: {"d": 2, "sigma": 0.3, "n_centers": 20, "n_mc_grid": (10, 20, 40), "reps": 3},
    Family.DISTANCE_RATES: {"sigma": 1.0, "kind": "tv", "n_grid": (10, 20, 40), "atoms": (0.0, 0.3), "reps": 3},
    Family.DNN_SPIRAL: {"network": str(FIXTURES / "spiral_net.txt"), "n_grid": (30, 60), "layer": 2, "reps": 2,
                        "n_mc": 5},
    Family.RM_AWGN: {"r": 1, "m": 3, "sigma_grid": (0.5, 1.0), "n_codewords": 16, "n_mc": 10},
    Family.COUNTEREXAMPLE: {"k_max": 12},
    Family.BOUNDS_TABLE: {"d": 1, "sigma": 0.1, "k_subg": 0.03, "diameter": 1.0, "eps": 0.5, "n": 10},
}


def small_spec(family, **extra):
    return ExperimentSpec(family, {**SMALL[family], **extra}, seed=3)


class TestCornerMixture:
    def test_one_dimension(self):
        mix = build_corner_mixture(1)
        np.testing.assert_array_equal(np.sort(mix.centers[:, 0]), [-1.0, 1.0])
        assert mix.truncation == 1.0

    def test_five_dimensions(self):
        mix = build_corner_mixture(5)
        assert mix.n_modes == 32
        assert np.all(np.abs(mix.centers) == 1.0)
        assert np.unique(mix.centers, axis=0).shape[0] == 32

    def test_dimension_cap(self):
        with pytest.raises(ValueError, match="20"):
            build_corner_mixture(21)

    @pytest.mark.parametrize("d", [1, 4, 10])
    def test_acceptance_rate(self, d):
        raw = sample(build_corner_mixture(d, truncated=False), 20_000, seed=d).rows
        rate = float(np.mean(np.all(np.abs(raw) <= 1.0, axis=1)))
        assert rate > 0.4 ** d
        assert rate == pytest.approx(0.5 ** d, abs=4 * math.sqrt(0.5 ** d / 20_000) + 1e-4)

    def test_truncated_samples_in_box(self):
        rows = sample(build_corner_mixture(3), 5000, seed=0).rows
        assert np.all(np.abs(rows) <= 1.0)

    def test_entropy_additive(self):
        assert corner_entropy(5, 0.1) == pytest.approx(5 * corner_entropy(1, 0.1), rel=1e-12)

    def test_untruncated_entropy_matches_quadrature_1d(self):
        mix = GaussianMixture(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]), math.hypot(0.02, 0.1))

        def f(z):
            lg = float(log_density(mix, [z]))
            return -math.exp(lg) * lg

        oracle = integrate.quad(f, -3, 3, points=[-1, 1], limit=200, epsabs=1e-12)[0]
        assert corner_entropy(1, 0.1, truncated=False) == pytest.approx(oracle, abs=1e-8)

    def test_truncated_entropy_matches_mc(self):
        mix = build_corner_mixture(1)
        s = sample(mix, 200_000, seed=1).rows
        noisy = s + 0.1 * np.random.default_rng(2).standard_normal(s.shape)
        # closed-form log density of S + Z averaged over independent draws
        vals = np.array([ex._corner_log_density_1d(float(y), 0.02, 0.1, True) for y in noisy[:20_000, 0]])
        est, se = -vals.mean(), vals.std() / math.sqrt(vals.size)
        assert abs(est - corner_entropy(1, 0.1)) <= 4 * se

    def test_truncation_changes_entropy(self):
        assert corner_entropy(5, 0.1) == pytest.approx(-0.9164216490300403, abs=1e-9)
        assert corner_entropy(5, 0.1, truncated=False) == pytest.approx(-0.8544451132639354, abs=1e-9)

    def test_untruncated_matches_mixture_mc(self):
        d, sigma = 3, 0.1
        mix = build_corner_mixture(d, truncated=False)
        smoothed = GaussianMixture(mix.centers, mix.weights, math.hypot(0.02, sigma))
        rep = mixture_entropy_mc(smoothed, McBudget(5000), seed=0)
        assert abs(rep.value - corner_entropy(d, sigma, truncated=False)) <= 4 * rep.std_error


class TestConfig:
    @pytest.mark.parametrize("text,value", [
        ("3", 3), ("0.5", 0.5), ("true", True), ("False", False), ("1,2,3", (1, 2, 3)),
        ('"tv"', "tv"), ("plugin,knn", ("plugin", "knn")), ("7,", (7,)), ("1e-3", 1e-3),
    ])
    def test_parse_value(self, text, value):
        assert parse_value(text) == value

    def test_parse_config(self):
        text = '# comment\n[run]\nfamily = "corner_mixture"\nn_grid = [10, 20, 30]\nreps = [5]\nsigma = 0.1  # trailing\n'
        assert parse_config(text) == {"family": "corner_mixture", "n_grid": (10, 20, 30), "reps": (5,), "sigma": 0.1}

    def test_parse_config_error(self):
        with pytest.raises(SpecError, match="line 2"):
            parse_config("a = 1\nnonsense\n")

    @pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.toml")))
    def test_shipped_configs_load(self, path):
        spec = load_spec(path)
        assert spec.family.value == path.stem
        assert spec.output_path is not None

    def test_overrides(self, tmp_path):
        spec = load_spec(ROOT / "configs" / "counterexample.toml", {"k_max": 5, "seed": 9})
        assert spec.int("k_max") == 5 and spec.seed == 9


class TestSpec:
    def test_unknown_family(self):
        with pytest.raises(SpecError, match="unknown family"):
            ExperimentSpec("fig9", {})

    def test_unknown_key(self):
        with pytest.raises(SpecError, match="unknown key 'colour'"):
            small_spec(Family.COUNTEREXAMPLE, colour=1)

    def test_missing_key(self):
        with pytest.raises(SpecError, match="needs key 'sigma'"):
            ExperimentSpec(Family.CORNER_MIXTURE, {"d": 2, "n_grid": (1, 2, 3)})

    def test_grid_must_increase(self):
        with pytest.raises(SpecError, match="increasing"):
            small_spec(Family.CORNER_MIXTURE, n_grid=(40, 20, 80))

    def test_sigma_positive(self):
        with pytest.raises(SpecError, match="sigma"):
            small_spec(Family.CORNER_MIXTURE, sigma=0)

    def test_bad_seed(self):
        with pytest.raises(SpecError):
            ExperimentSpec(Family.COUNTEREXAMPLE, {"k_max": 3}, seed=-1)

    def test_mapping_needs_family(self):
        with pytest.raises(SpecError, match="family"):
            spec_from_mapping({"k_max": 3})

    def test_run_needs_output(self):
        with pytest.raises(SpecError, match="output_path"):
            run(small_spec(Family.BOUNDS_TABLE))

    @pytest.mark.parametrize("family", list(Family))
    def test_echo_round_trip(self, family):
        spec = ExperimentSpec(family, SMALL[family], seed=11, output_path="out/x.csv")
        text = "\n".join(spec_echo(spec)) + "\nheader\n"
        assert spec_from_csv(text) == spec

    @given(
        d=st.integers(1, 20),
        sigma=st.floats(1e-3, 1e3, allow_nan=False),
        grid=st.lists(st.integers(1, 10 ** 6), min_size=1, max_size=6, unique=True).map(sorted),
        reps=st.integers(2, 500),
        seed=st.integers(0, 2 ** 32 - 1),
        estimators=st.lists(st.sampled_from(["plugin", "knn", "kde"]), min_size=1, max_size=3),
        truncated=st.booleans(),
    )
    def test_echo_round_trip_property(self, d, sigma, grid, reps, seed, estimators, truncated):
        params = {"d": d, "sigma": sigma, "n_grid": tuple(grid), "reps": reps, "estimators": tuple(estimators),
                  "truncated": truncated}
        spec = ExperimentSpec(Family.CORNER_MIXTURE, params, seed=seed, output_path="o.csv")
        back = spec_from_csv("\n".join(spec_echo(spec)) + "\n")
        assert back.seed == spec.seed and back.family == spec.family
        for key, val in params.items():
            got = back.get(key)
            want = val
            if key in ("n_grid", "estimators"):
                got = tuple(back.list(key))
            assert got == want

    def test_format_value(self):
        assert format_value((3,)) == "3,"
        assert format_value(0.1) == "0.1"
        assert format_value(True) == "true"


class TestRuns:
    @pytest.mark.parametrize("family", list(Family))
    def test_columns_and_determinism(self, family):
        spec = small_spec(family)
        text, err = run_to_text(spec)
        assert err is None
        header = [ln for ln in text.splitlines() if not ln.startswith("#")][0]
        assert header == COLUMNS[family]
        again, _ = run_to_text(spec)
        assert again == text

    def test_workers_byte_identical(self):
        for family in (Family.CORNER_MIXTURE, Family.DISTANCE_RATES, Family.MC_CONVERGENCE):
            spec = small_spec(family)
            assert run_to_text(spec, workers=1)[0] == run_to_text(spec, workers=4)[0]

    def test_corner_trailer(self):
        text, _ = run_to_text(small_spec(Family.CORNER_MIXTURE))
        assert f"# truth = {corner_entropy(2, 0.3)!r}" in text
        assert "# fit plugin slope = " in text
        rows = read_rows(text)
        assert {r["estimator"] for r in rows} == {"plugin", "knn"}

    def test_distance_trailer(self):
        text, _ = run_to_text(small_spec(Family.DISTANCE_RATES))
        assert text.rstrip().splitlines()[-1].startswith("# slope=")

    def test_run_writes_file(self, tmp_path):
        spec = small_spec(Family.BOUNDS_TABLE).with_overrides({"output_path": tmp_path / "sub" / "b.csv"})
        assert run(spec) == 0
        text = (tmp_path / "sub" / "b.csv").read_text()
        assert spec_from_csv(text) == spec
        values = {r["quantity"]: float(r["value"]) for r in read_rows(text)}
        assert values["k_star"] == 14
        assert set(values) == {"gaussian_entropy", "plugin_risk_constant_bounded", "w1_constant", "tv_constant",
                               "plugin_risk_constant_subg", "chi2_constant", "chi2_bounded_constant", "k_star",
                               "bias_lower_bound"}

    def test_numeric_failure_exit_status(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericError("window integral did not converge", partial=[0.1])

        monkeypatch.setattr(ex, "divergence_diagnostic", boom)
        spec = small_spec(Family.COUNTEREXAMPLE).with_overrides({"output_path": tmp_path / "c.csv"})
        assert run(spec) == EXIT_NUMERIC
        text = (tmp_path / "c.csv").read_text()
        assert text.splitlines()[0].startswith("# smoothent")
        assert "# error = NumericError: window integral did not converge" in text

    def test_bad_reps_length(self):
        with pytest.raises(SpecError, match="reps"):
            run_to_text(small_spec(Family.CORNER_MIXTURE, reps=(2, 3)))

    def test_unknown_estimator(self):
        with pytest.raises(SpecError, match="estimator"):
            run_to_text(small_spec(Family.CORNER_MIXTURE, estimators=("plugin", "magic")))


class TestFitRate:
    def test_exact_power_law(self):
        n = [10, 100, 1000, 10_000]
        text = "n,mean_error\n" + "".join(f"{k},{2.0 * k ** -0.5!r}\n" for k in n)
        assert fit_rate(text).slope == pytest.approx(-0.5, abs=1e-12)

    def test_constant(self):
        assert fit_rate("n,mean\n1,4\n2,4\n3,4\n").slope == 0.0

    def test_three_points_required(self):
        with pytest.raises(ValueError, match="3"):
            fit_rate("n,mean\n1,4\n2,4\n")

    def test_filter_and_path(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("# comment\nestimator,n,mean_error\na,10,1\na,100,0.1\na,1000,0.01\nb,10,1\nb,100,1\nb,1000,1\n")
        assert fit_rate(p, where={"estimator": "a"}).slope == pytest.approx(-1.0)
        assert fit_rate(str(p), where={"estimator": "b"}).slope == pytest.approx(0.0)

    def test_missing_columns(self):
        with pytest.raises(ValueError, match="columns"):
            fit_rate("x,y\n1,2\n2,3\n3,4\n")
