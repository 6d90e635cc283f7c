import numpy as np
import pytest

from cmemd.config import regdb_profile
from cmemd.gradcheck import COMPONENTS, TOLERANCE, probe, relative_error, run_gradcheck


def test_relative_error_uses_the_floor():
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-9, floor=1e-5) == pytest.approx(1e-4)


def test_probe_on_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    fn = lambda: float(np.sum(x ** 2))  # noqa: E731
    coords = [(0,), (1,), (2,)]
    assert probe(fn, x, 2 * x.copy(), coords) < 1e-8
    assert probe(fn, x, 3 * x.copy(), coords) > 0.3
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])


def test_default_config_passes():
    report = run_gradcheck(regdb_profile(), num_probes=5)
    assert report.passed, "\n".join(report.lines())
    names = " ".join(report.errors)
    for needed in ("cm_emd", "cm_dl", "identity", "holistic", "encoder"):
        assert needed in names


@pytest.mark.parametrize("component", COMPONENTS)
def test_each_corrupted_component_is_caught(component):
    report = run_gradcheck(regdb_profile(), num_probes=3, corrupt=component)
    assert not report.passed
    assert max(report.errors.values()) > TOLERANCE


def test_zero_probes_is_vacuous():
    report = run_gradcheck(regdb_profile(), num_probes=0)
    assert report.passed and report.errors == {}


def test_unknown_component():
    with pytest.raises(ValueError):
        run_gradcheck(regdb_profile(), corrupt="decoder")
