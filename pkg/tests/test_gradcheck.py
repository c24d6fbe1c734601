"""The finite-difference battery itself, plus a sanity check that the
harness actually catches a wrong gradient rather than rubber-stamping."""

import numpy as np

from sardino import autograd as ag
from sardino.autograd import Tensor
from sardino.gradcheck import (COMPOSITE_TOLERANCE, OP_TOLERANCE, CheckResult,
                               format_report, run_battery)


def test_op_battery_all_pass():
    results = run_battery(seed=0, include_composite=False)
    names = [r.name for r in results]
    assert len(names) == len(set(names))
    assert len(results) >= 30
    for r in results:
        assert r.tolerance == OP_TOLERANCE
        assert r.passed, f"{r.name}: {r.max_rel_err}"


def test_composite_passes():
    results = run_battery(seed=1, include_composite=True)
    comp = [r for r in results if r.name.startswith("composite")]
    assert len(comp) == 1
    assert comp[0].tolerance == COMPOSITE_TOLERANCE
    assert comp[0].passed, comp[0].max_rel_err


def test_wrong_gradient_is_caught():
    def bad_double(x: Tensor) -> Tensor:
        # forward doubles, backward claims the factor is 1.8
        return ag._apply(np.asarray(x.data * 2.0), (x,), lambda g: (1.8 * g,))

    with ag.double_precision():
        x = Tensor(np.random.default_rng(0).normal(size=(3, 3)),
                   requires_grad=True, dtype=np.float64)
        err = ag.gradient_check(lambda t: ag.reduce_sum(bad_double(t)), x,
                                eps=1e-4)
    assert err > 0.05


def test_report_names_failing_op():
    results = [CheckResult("fine_op", 1e-9, 1e-3),
               CheckResult("broken_conv", 0.7, 1e-3)]
    text = format_report(results)
    assert "PASS  fine_op" in text
    assert "FAIL  broken_conv" in text
    assert text.splitlines()[-1].endswith("broken_conv")
    ok = format_report([CheckResult("fine_op", 1e-9, 1e-3)])
    assert "all 1 gradient checks passed" in ok
