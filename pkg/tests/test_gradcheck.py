import time

import pytest

from fraug.gradcheck import TOLERANCE, check, components, format_report, run_gradcheck
from fraug.tensor import Tensor, mul, tsum


def gradcheck_failures(seed=0):
    """Names of failing components and the elapsed time of the full sweep."""
    start = time.perf_counter()
    results = run_gradcheck(seed)
    return [r.component for r in results if not r.passed], time.perf_counter() - start, results


def test_every_component_passes_quickly():
    bad, elapsed, results = gradcheck_failures()
    assert bad == []
    assert elapsed < 30
    names = {r.component for r in results}
    for needed in ("layer/dense", "layer/batchnorm", "loss/mmd", "loss/entropy", "loss/cross_entropy", "net/"):
        assert any(n.startswith(needed) for n in names), needed
    for eq in ("L_cls", "L_syn", "L_gen", "L_rt"):
        assert any(eq in n for n in names), eq


def test_corrupted_gradient_is_caught():
    name = components()[0][0]
    results = run_gradcheck(corrupt=name)
    failed = [r.component for r in results if not r.passed]
    assert failed == [name]
    assert "FAIL" in format_report(results)
    with pytest.raises(KeyError):
        run_gradcheck(corrupt="no-such-component")


def test_check_reports_relative_error():
    x = Tensor([1.0, 2.0])
    assert check("lin", lambda: tsum(mul(x, 3.0)), {"x": x}).max_rel_error < 1e-9
    assert check("lin", lambda: tsum(mul(x, 3.0)), {"x": x}, corrupt=True).max_rel_error > TOLERANCE
