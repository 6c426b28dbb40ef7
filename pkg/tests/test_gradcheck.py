import numpy as np
import pytest

from emac import autodiff as ad
from emac import gradcheck
from emac.flow import WarpBilinear


def test_rel_error_floor():
    assert gradcheck.rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert gradcheck.rel_error([1.0, 0.0], [1.0, 1e-6]) == pytest.approx(1e-6)


def test_line_format():
    assert gradcheck.CheckResult("gelu", 2e-9, 20).line().startswith("PASS  gelu")
    assert gradcheck.CheckResult("gelu", np.inf, 20).line().startswith("FAIL")


@pytest.mark.parametrize("name", ["gelu", "warp", "softmax_mse"])
def test_fault_injection_is_caught(monkeypatch, name):
    """A corrupted gradient rule must fail its own check."""
    target = {"gelu": ad.Gelu, "softmax_mse": ad.Softmax, "warp": WarpBilinear}[name]
    original = target.backward

    def broken(ctx, g):
        return tuple(None if r is None else 1.01 * r for r in original(ctx, g))

    monkeypatch.setattr(target, "backward", staticmethod(broken))
    r = gradcheck.run_check(name, instances=2)
    assert not r.passed and name in r.line()


def test_every_registered_function_has_a_check():
    exercised = set(gradcheck.CHECKS)
    assert {"matmul", "softmax", "layer_norm", "gelu", "warp", "gather", "scatter", "emac"} <= exercised
