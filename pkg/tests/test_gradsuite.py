"""Registry and runner of the module-tagged gradient suites."""
import numpy as np
import pytest

from mambatrans import ops
from mambatrans.gradsuite import MODULES, GradCase, all_cases, run_case, run_suites, select, summarize
from mambatrans.tensor import Tensor, make_result


def test_every_module_has_cases():
    cases = all_cases()
    assert {c.module for c in cases} == set(MODULES)
    assert len({c.name for c in cases}) == len(cases)
    for module in MODULES:
        assert [c.name for c in select(module)] == [c.name for c in cases if c.module == module]


def test_required_coverage():
    names = {c.name for c in all_cases()}
    for required in ("selective_scan_1d", "tv_ssm", "mm_ssb_depth2", "charbonnier", "detection_loss_image"):
        assert required in names


def test_unknown_tag():
    with pytest.raises(ValueError, match="optics"):
        select("optics")


def test_runs_and_reports():
    seen = []
    results = run_suites("ssm", on_result=seen.append)
    assert seen == results
    assert summarize(results) == (len(results), len(results))
    assert all(r.max_rel_error < 1e-4 for r in results)
    assert results[0].line().startswith("PASS  ssm")


def test_32_bit_is_informational():
    case = select("substrate")[0]
    res = run_case(case, precision=32)
    assert res.passed and res.max_rel_error < 1e-2


def _wrong_square(x):
    """Square with a deliberately halved backward."""
    return make_result(x.data ** 2, (x,), lambda g: (g * x.data,), "wrong_square")


def test_detects_a_broken_backward():
    def build(rng, dtype):
        return (lambda x: ops.sum(_wrong_square(x))), [Tensor(rng.uniform(0.5, 1, (3,)).astype(dtype), requires_grad=True)]

    res = run_case(GradCase("wrong", "substrate", build))
    assert not res.passed and res.max_rel_error > 0.3
    assert res.line().startswith("FAIL")


def test_bad_precision():
    with pytest.raises(ValueError):
        run_case(select("substrate")[0], precision=16)
