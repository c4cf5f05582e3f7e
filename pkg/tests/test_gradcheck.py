import numpy as np
import pytest

from landmark_lab.autodiff import Tensor, ops
from landmark_lab.gradcheck import TOLERANCE, CheckResult, check_function, components, rel_error, run_checks


def test_rel_error_is_normwise():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert rel_error(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 1.0
    # a tiny entry off by 100% does not dominate when the vector is large elsewhere
    assert rel_error(np.array([100.0, 1e-6]), np.array([100.0, 2e-6])) < 1e-7


def test_check_function_on_known_gradient(rng):
    x = rng.normal(size=(4, 3))
    assert check_function(lambda t: ops.sum(ops.mul(t, t)), [x], rng=rng) < 1e-8


def test_check_function_catches_wrong_gradient(rng):
    def wrong(t):
        return Tensor(t.data * 2.0, requires_grad=True, parents=(t,), backward_fn=lambda g: (g * 3.0,))

    assert check_function(wrong, [rng.normal(size=5)], rng=rng) > TOLERANCE


@pytest.mark.parametrize("scope", ["primitive", "loss"])
def test_scope_passes(scope):
    results = run_checks([scope], instances=3)
    assert {r.component for r in results} == set(components(scope))
    for r in results:
        assert r.passed, r.line()


def test_only_filters_components():
    results = run_checks(["primitive", "loss"], instances=1, only={"relu", "loss_reg"})
    assert [(r.scope, r.component) for r in results] == [("primitive", "relu"), ("loss", "loss_reg")]


def test_unknown_scope():
    with pytest.raises(ValueError):
        components("everything")


def test_result_line_marks_nonfinite_as_fail():
    bad = CheckResult("x", "loss", float("inf"), 1)
    assert not bad.passed and bad.line().endswith("FAIL")
    assert CheckResult("x", "loss", 1e-9, 1).line().endswith("PASS")
