import math

import numpy as np
import pandas as pd
import pytest

from chain_surgeon.errors import FitError, PreconditionError
from chain_surgeon.scaling import (
    FIT_MODELS,
    estimate_variance,
    fit_exponent,
    monotone_in_N,
    predict,
    regime_model,
    rows_to_frame,
    run_beta_scan,
    run_sweep,
    sandwich_report,
    write_rows_csv,
)
from chain_surgeon.schemas import ChainSpec, ScalingRow

NS = [8, 16, 32, 64, 128]


def _rows(f, Ns=NS, se=None):
    return [ScalingRow(N=n, variance=float(f(n)), std_error=se, method="laplacian-exact") for n in Ns]


class TestRegimeModel:
    @pytest.mark.parametrize(
        "alpha,model,exponent",
        [(1.5, "const", 0.0), (2.0, "log", 0.0), (2.5, "power", 0.5), (3.0, "loglin", 1.0), (4.0, "power", 1.0)],
    )
    def test_gaussian_table(self, alpha, model, exponent):
        regime = regime_model(alpha)
        assert regime["model"] == model
        assert regime["exponent"] == pytest.approx(exponent)

    def test_q_two_is_gaussian(self):
        assert regime_model(2.5, 2.0) == regime_model(2.5)

    def test_qsos_carries_envelopes(self):
        regime = regime_model(3.0, 1.0)
        assert regime["model"] == "power"
        assert regime["exponent"] is None
        assert set(regime["envelopes"]) == {"lower", "upper"}

    def test_alpha_at_most_one(self):
        with pytest.raises(PreconditionError):
            regime_model(1.0)


class TestFits:
    def test_power(self):
        fit = fit_exponent(_rows(lambda n: 3.0 * n), "power")
        assert fit.params["p"] == pytest.approx(1.0, abs=1e-10)
        assert fit.params["a"] == pytest.approx(3.0, rel=1e-10)
        assert fit.spread == pytest.approx(1.0)

    def test_log(self):
        fit = fit_exponent(_rows(lambda n: 2.0 * math.log(n) + 1.0), "log")
        assert fit.params["a"] == pytest.approx(2.0, rel=1e-10)
        assert fit.params["b"] == pytest.approx(1.0, rel=1e-8)

    def test_loglin(self):
        fit = fit_exponent(_rows(lambda n: 5.0 * n / math.log(n)), "loglin")
        assert fit.params["a"] == pytest.approx(5.0, rel=1e-12)
        assert fit.relative_rms == pytest.approx(0.0, abs=1e-12)

    def test_const(self):
        fit = fit_exponent(_rows(lambda n: 7.0), "const")
        assert predict(fit, [10, 1000]).tolist() == pytest.approx([7.0, 7.0])

    def test_weighted_fit_recovers_exponent(self):
        fit = fit_exponent(_rows(lambda n: 0.5 * n ** 0.75, se=0.01), "power")
        assert fit.params["p"] == pytest.approx(0.75, abs=1e-10)

    def test_failed_rows_are_skipped(self):
        rows = _rows(lambda n: 2.0 * n) + [ScalingRow(N=256, error="TruncationError: too wide")]
        assert fit_exponent(rows, "power").n_rows == len(NS)

    def test_too_few_rows(self):
        with pytest.raises(FitError):
            fit_exponent(_rows(lambda n: n, Ns=[8, 16]), "power")

    def test_wrong_model_has_larger_misfit(self):
        rows = _rows(lambda n: n / math.log(n))
        assert fit_exponent(rows, "loglin").relative_rms < fit_exponent(rows, "const").relative_rms

    def test_monotone_in_N(self):
        assert monotone_in_N(_rows(lambda n: n))
        assert not monotone_in_N(_rows(lambda n: 1.0 / n))
        # a dip inside the error bars is tolerated
        noisy = _rows(lambda n: 10.0 - 0.01 * (n == 32), se=0.1)
        assert monotone_in_N(noisy)


class TestSweep:
    def test_needs_four_lengths(self):
        specs = [ChainSpec(N=n, beta=1.0, alpha=4.0) for n in (8, 16, 32)]
        with pytest.raises(PreconditionError):
            run_sweep(specs, "real-exact")

    def test_specs_must_agree(self):
        specs = [ChainSpec(N=n, beta=1.0, alpha=4.0) for n in (8, 16, 32)] + [ChainSpec(N=64, beta=1.0, alpha=3.0)]
        with pytest.raises(PreconditionError):
            run_sweep(specs, "real-exact")

    def test_unknown_backend(self):
        with pytest.raises(PreconditionError):
            estimate_variance(ChainSpec(N=4, beta=1.0, alpha=4.0), "oracle")
        with pytest.raises(PreconditionError):
            estimate_variance(ChainSpec(N=4, beta=1.0, alpha=4.0), "qsos-annealed-lower")

    def test_real_sweep_shape(self):
        specs = [ChainSpec(N=n, beta=1.0, alpha=4.0) for n in (8, 16, 32, 64)]
        fit = run_sweep(specs, "real-exact")
        assert [r.N for r in fit.rows] == [8, 16, 32, 64]
        assert all(r.ok for r in fit.rows)
        assert fit.model == "power"
        assert fit.expected_exponent == 1.0
        assert fit.monotone_in_N
        assert fit.best_alternative in FIT_MODELS
        assert {a.model for a in fit.alternatives} <= set(FIT_MODELS)

    def test_beta_scan(self):
        frame = run_beta_scan(16, 2.5, [0.5, 1.0, 2.0])
        assert list(frame["beta"]) == [0.5, 1.0, 2.0]
        # the real field scales exactly as 1/beta
        assert frame["variance"].iloc[0] == pytest.approx(4.0 * frame["variance"].iloc[2], rel=1e-10)

    def test_qsos_sweep_uses_envelopes(self):
        specs = [ChainSpec(N=n, beta=1.0, alpha=4.0, q=1.0) for n in (4, 8, 16, 32)]
        fit = run_sweep(specs, "qsos-annealed-lower", draws=4, inner="real")
        assert set(fit.envelope_fits) == {"lower", "upper"}
        assert fit.exponent_tolerance == pytest.approx(0.25)

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "alpha,beta,model",
        [(4.0, 1.0, "power"), (2.5, 1.0, "power"), (3.0, 1.0, "loglin"), (1.5, 1.0, "const"), (2.0, 0.1, "log")],
    )
    def test_regimes_within_tolerance(self, alpha, beta, model):
        specs = [ChainSpec(N=n, beta=beta, alpha=alpha) for n in (64, 128, 256, 512, 1024)]
        fit = run_sweep(specs, "real-exact")
        assert fit.model == model
        assert fit.within_tolerance, fit.fitted_params


class TestSandwichReport:
    def test_ordering_and_certificates(self):
        report = sandwich_report(4.0, 1.0, [8, 16])
        assert report.all_hold
        assert [r.N for r in report.rows] == [8, 16]
        assert len(report.certificates) == 4
        for row in report.rows:
            assert row.lower_margin > 0 and row.upper_margin > 0


class TestTables:
    def test_csv_with_comments(self, tmp_path):
        frame = rows_to_frame(_rows(lambda n: 0.1 * n, Ns=[8, 16]))
        path = tmp_path / "rows.csv"
        write_rows_csv(frame, path, ["run_id=abc", "alpha=4"])
        lines = path.read_text().splitlines()
        assert lines[:2] == ["# run_id=abc", "# alpha=4"]
        back = pd.read_csv(path, comment="#")
        assert list(back.columns) == ["N", "variance", "std_error", "method", "seed", "error"]
        assert np.array_equal(back["variance"].to_numpy(), frame["variance"].to_numpy())
