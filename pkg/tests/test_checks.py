import math

import pytest

from core.testing.checks import (MetricCheck, PipelineProducts, default_suite, run_suite, suite_status,
                                 summarize)


def _products(bundle, flat=False):
    return PipelineProducts(trajectory=bundle['traj'], frame=bundle['frame'], gauge=bundle['gauge'], flat=flat)


class TestMetricCheck:
    def test_pass_and_fail(self):
        products = PipelineProducts()
        assert MetricCheck('small', lambda p: 0.5, 1.0).run(products).passed
        assert not MetricCheck('large', lambda p: 2.0, 1.0).run(products).passed

    def test_nan_fails(self):
        result = MetricCheck('nan', lambda p: math.nan, 1.0).run(PipelineProducts())
        assert not result.passed

    def test_flat_tolerance(self):
        check = MetricCheck('route', lambda p: 1e-6, 1e-5, flat_tolerance=1e-12)
        assert check.run(PipelineProducts()).passed
        assert not check.run(PipelineProducts(flat=True)).passed

    def test_requires(self):
        check = MetricCheck('needs_gauge', lambda p: 0.0, 1.0, requires=('gauge',))
        assert not check.applies(PipelineProducts())


class TestSuite:
    def test_missing_products_are_skipped(self):
        assert run_suite(default_suite(), PipelineProducts(), verbose=False) == []

    def test_status(self):
        products = PipelineProducts()
        fatal = MetricCheck('fatal', lambda p: 2.0, 1.0)
        flagged = MetricCheck('flagged', lambda p: 2.0, 1.0, fatal=False)
        assert suite_status(run_suite([flagged], products, verbose=False)) == 0
        assert suite_status(run_suite([flagged, fatal], products, verbose=False)) == 1

    def test_summary_keys(self):
        results = run_suite([MetricCheck('one', lambda p: 0.25, 1.0)], PipelineProducts(), verbose=False)
        assert summarize(results) == {'check/one': 0.25}

    def test_logs_one_line_per_check(self, capsys):
        run_suite([MetricCheck('one', lambda p: 0.0, 1.0), MetricCheck('two', lambda p: 0.0, 1.0)],
                  PipelineProducts())
        lines = capsys.readouterr().out.splitlines()
        assert [line.split(':')[0] for line in lines] == ['check one 0', 'check two 1']

    @pytest.mark.parametrize('bundle, flat', [('sphere_bundle', False), ('product_bundle', False),
                                              ('torus_bundle', True)])
    def test_gauge_suite_passes(self, bundle, flat, request):
        results = run_suite(default_suite(), _products(request.getfixturevalue(bundle), flat), verbose=False)
        names = {r.name for r in results}
        assert {'frame_orthonormality', 'connection_two_route', 'torsion_free', 'heat_tension'} <= names
        assert 'sl_energy_drift' not in names
        failed = [r.name for r in results if r.fatal and not r.passed]
        assert failed == []
        assert suite_status(results) == 0
