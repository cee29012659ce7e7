import pytest

from maxsr.pipelines import diagnostics

FAST_SUITES = [name for name in diagnostics.SUITES if name != "network"]


class TestRunSuite:
    @pytest.mark.parametrize("name", FAST_SUITES)
    def test_suite_passes(self, name):
        result = diagnostics.run_suite(name)

        assert result.passed, result
        assert result.checked > 0
        assert result.max_rel_error < diagnostics.TOLERANCE

    @pytest.mark.slow
    def test_network_suite_passes(self):
        assert diagnostics.run_suite("network").passed

    def test_corrupted_gradients_fail(self):
        result = diagnostics.run_suite("linear", corrupt=True)

        assert not result.passed
        assert result.max_rel_error > 0.1

    def test_unknown_suite(self):
        with pytest.raises(KeyError):
            diagnostics.run_suite("fft")

    def test_seed_changes_the_samples(self):
        first = diagnostics.run_suite("softmax", seed=1)
        second = diagnostics.run_suite("softmax", seed=2)

        assert first.max_rel_error != second.max_rel_error


class TestGradcheckReport:
    def test_one_row_per_suite(self):
        results = diagnostics.run_gradcheck(
            suites=["conv2d", "mae_loss"], corrupt="mae_loss"
        )
        report = diagnostics.gradcheck_report(results)

        assert list(report.columns) == ["suite", "checked", "max_rel_error", "passed"]
        assert report["suite"].tolist() == ["conv2d", "mae_loss"]
        assert report["passed"].tolist() == [True, False]

    def test_dict_layout(self):
        results = diagnostics.run_gradcheck(suites=["softmax"])

        assert diagnostics.gradcheck_report(results, as_frame=False)["checked"] == [12]
