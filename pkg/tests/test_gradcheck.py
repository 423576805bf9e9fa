import numpy as np
import pytest

from nfisac import gradcheck
from nfisac.errors import ContractViolation, ProbeError
from nfisac.gradcheck import FdReport, check, fd_gradient


class TestFdGradient:
    def test_quadratic_exact(self):
        g = fd_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-9)

    def test_constant_zero(self):
        g = fd_gradient(lambda x: 4.2, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_multivariate(self):
        def f(x):
            return float(np.sin(x[0]) + x[1] ** 3)

        g = fd_gradient(f, np.array([0.3, 1.1]), h=1e-6)
        assert g[0] == pytest.approx(np.cos(0.3), abs=1e-9)
        assert g[1] == pytest.approx(3 * 1.1**2, abs=1e-7)

    def test_nonfinite_probe_named(self):
        def f(x):
            return float("nan") if x[1] < 0 else float(x[1])

        with pytest.raises(ProbeError) as err:
            fd_gradient(f, np.array([0.0, 0.0]), h=1e-3)
        assert err.value.coord == 1


class TestCheck:
    def test_pass_on_correct_gradient(self):
        def f(x):
            return float(x[0] ** 2 + 2 * x[1])

        def g(x):
            return np.array([2 * x[0], 2.0])

        reports = check(g, f, [np.array([1.0, 2.0]), np.array([-0.5, 0.1])])
        assert all(r.passed for r in reports)
        assert len(reports) == 2

    def test_sign_flip_detected(self):
        def f(x):
            return float(x[0] ** 2)

        def g(x):
            return np.array([-2 * x[0]])

        reports = check(g, f, [np.array([1.5])])
        assert not reports[0].passed

    def test_floor_rule_small_gradients(self):
        # analytic magnitude under the floor, tiny absolute error: passes
        def f(x):
            return float(1e-6 * x[0])

        def g(x):
            return np.array([1e-6 + 5e-9])

        reports = check(g, f, [np.array([0.2])])
        assert reports[0].passed

    def test_dimension_mismatch(self):
        def f(x):
            return float(x[0])

        def g(x):
            return np.zeros(3)

        with pytest.raises(ContractViolation):
            check(g, f, [np.array([1.0, 2.0])])

    def test_h_sweep_v_shape(self):
        # truncation error grows with h, roundoff grows as h shrinks; the
        # error at some intermediate h must dip to the pass threshold
        def f(x):
            return float(np.exp(np.sin(3 * x[0])))

        def g(x):
            return np.array([3 * np.cos(3 * x[0]) * np.exp(np.sin(3 * x[0]))])

        point = np.array([0.4])
        errs = []
        for h in (1e-3, 1e-6, 1e-12):
            rep = check(g, f, [point], h=h)[0]
            errs.append(rep.worst_rel)
        assert errs[1] < errs[0]
        assert errs[1] < errs[2]
        assert errs[1] <= 1e-4


class TestReportRows:
    def test_rows_flatten(self):
        rep = FdReport(0, np.array([1.0, 2.0]), np.array([1.0, 2.0]),
                       np.zeros(2), np.zeros(2), True, 1e-7)
        rows = gradcheck.reports_to_rows("check_x", [rep])
        assert len(rows) == 2
        assert rows[0][0] == "check_x"
        assert rows[1][2] == 1
