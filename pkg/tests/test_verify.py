import numpy as np
import pytest

from ploff.verify import (
    SuiteResult,
    finite_difference_grads,
    max_relative_error,
    run_all_suites,
    suite_axioms,
    suite_contraction,
    suite_knn,
)


def test_finite_differences_on_quadratic():
    w = np.array([0.3, -1.2, 2.0])
    b = np.array([[0.5, -0.25]])
    c = np.array([1.0, 2.0, -0.5])

    def f() -> float:
        return 0.5 * float(w @ w) + float(c @ w) + float((b**2).sum())

    grads = finite_difference_grads(f, [w, b])
    assert np.allclose(grads[0], w + c, atol=1e-8)
    assert np.allclose(grads[1], 2.0 * b, atol=1e-8)


def test_finite_differences_restore_params():
    w = np.array([1.0, 2.0, 3.0])
    before = w.copy()
    finite_difference_grads(lambda: float((w**3).sum()), [w])
    assert np.array_equal(w, before)


def test_max_relative_error_values():
    a = [np.array([2.0, 0.0])]
    n = [np.array([2.002, 1e-9])]
    # second entry is floored: 1e-9 / 1e-6
    want = max(0.002 / 2.002, 1e-9 / 1e-6)
    assert max_relative_error(a, n) == pytest.approx(want, rel=1e-12)
    assert max_relative_error(a, a) == 0.0


def test_suite_result_counters():
    r = SuiteResult("demo", [("a", True), ("b", False), ("c", True)])
    assert (r.passed, r.failed, r.ok) == (2, 1, False)
    assert SuiteResult("all", [("a", True)]).ok


def test_individual_suites_accept_counts():
    assert suite_axioms(n_instances=3).passed == 3
    assert suite_contraction(n_instances=3).ok
    assert suite_knn(n_instances=3).ok


def test_quick_suites_all_pass():
    results = run_all_suites(quick=True)
    names = [r.name for r in results]
    assert len(names) == len(set(names)) and len(names) == 6
    for r in results:
        assert r.ok, f"{r.name}: {[lbl for lbl, ok in r.cases if not ok]}"
