import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdefem.hyper import HyperFitError, HyperSpec, maximize

BOUNDS = {"sigma": (0.01, 10.0), "ell": (0.01, 10.0)}


def log_quadratic(center):
    def f(p):
        return -sum((math.log(p[n]) - math.log(c)) ** 2 * w
                    for (n, c), w in zip(center.items(), (1.0, 3.0)))
    return f


@settings(max_examples=20, deadline=None)
@given(sigma=st.floats(0.05, 5.0), ell=st.floats(0.05, 5.0))
def test_quadratic_optimum_is_recovered(sigma, ell):
    spec = HyperSpec(("sigma", "ell"), BOUNDS)
    res = maximize(log_quadratic({"sigma": sigma, "ell": ell}), spec, {"sigma": 1.0, "ell": 1.0})
    assert res.params["sigma"] == pytest.approx(sigma, rel=1e-6)
    assert res.params["ell"] == pytest.approx(ell, rel=1e-6)


def test_optimum_on_the_boundary():
    spec = HyperSpec(("sigma",), {"sigma": (0.1, 2.0)})
    res = maximize(lambda p: p["sigma"], spec, {"sigma": 1.0})
    assert res.params["sigma"] == pytest.approx(2.0, rel=1e-12)


def bimodal(p):
    # narrow local peak at sigma = 0.1, a higher and wider one at sigma = 5
    x = math.log(p["sigma"])
    return (math.exp(-((x - math.log(0.1)) ** 2) / 0.05)
            + 2.0 * math.exp(-((x - math.log(5.0)) ** 2) / 1.0))


def test_restarts_escape_a_local_optimum():
    spec = HyperSpec(("sigma",), {"sigma": (0.01, 10.0)})
    single = maximize(bimodal, spec, {"sigma": 0.1}, n_restarts=0)
    multi = maximize(bimodal, spec, {"sigma": 0.1}, seed=0)
    assert single.params["sigma"] == pytest.approx(0.1, rel=1e-3)
    assert multi.params["sigma"] == pytest.approx(5.0, rel=1e-3)
    assert multi.value > single.value


@settings(max_examples=15, deadline=None)
@given(s0=st.floats(0.02, 8.0), l0=st.floats(0.02, 8.0), seed=st.integers(0, 1000))
def test_never_worse_than_the_start(s0, l0, seed):
    def f(p):
        return math.sin(3 * math.log(p["sigma"])) + math.cos(2 * math.log(p["ell"])) - 0.1 * math.log(p["ell"]) ** 2
    spec = HyperSpec(("sigma", "ell"), BOUNDS)
    init = {"sigma": s0, "ell": l0}
    res = maximize(f, spec, init, seed=seed)
    assert res.value >= f(init)
    assert res.value == pytest.approx(f(res.params), abs=1e-12)
    assert all(BOUNDS[n][0] <= res.params[n] <= BOUNDS[n][1] for n in spec.names)


def test_deterministic_for_a_seed():
    spec = HyperSpec(("sigma", "ell"), BOUNDS)
    a = maximize(bimodal_2d, spec, {"sigma": 1.0, "ell": 1.0}, seed=3)
    b = maximize(bimodal_2d, spec, {"sigma": 1.0, "ell": 1.0}, seed=3)
    assert a.params == b.params
    assert [t[1] for t in a.trace] == [t[1] for t in b.trace]


def bimodal_2d(p):
    return bimodal(p) - (math.log(p["ell"]) - 0.3) ** 2


def test_budget_per_start():
    spec = HyperSpec(("sigma", "ell"), BOUNDS)
    res = maximize(bimodal_2d, spec, {"sigma": 1.0, "ell": 1.0}, max_evals=15)
    starts = [t[0] for t in res.trace]
    assert sorted(set(starts)) == [0, 1, 2, 3]
    assert max(starts.count(k) for k in set(starts)) <= 15
    assert res.n_evals == len(res.trace)


def test_fixed_values_are_passed_through():
    seen = []
    spec = HyperSpec(("sigma",), {"sigma": (0.1, 10.0)}, fixed={"ell": 0.7})
    res = maximize(lambda p: seen.append(p["ell"]) or -(p["sigma"] - 2) ** 2, spec, {"sigma": 1.0})
    assert set(seen) == {0.7}
    assert res.params["ell"] == 0.7


def test_trace_csv(tmp_path):
    spec = HyperSpec(("sigma", "ell"), BOUNDS)
    res = maximize(log_quadratic({"sigma": 0.3, "ell": 2.0}), spec, {"sigma": 1.0, "ell": 1.0})
    path = tmp_path / "trace.csv"
    res.write_trace(path, spec.names)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["evaluation", "start", "sigma", "ell", "objective"]
    assert len(rows) == len(res.trace) + 1
    first = res.trace[0]
    assert float(rows[1][2]) == first[1]["sigma"]
    assert float(rows[1][4]) == first[2]


def test_non_finite_values_are_avoided():
    spec = HyperSpec(("sigma",), {"sigma": (0.01, 10.0)})

    def f(p):
        if p["sigma"] > 2.0:
            raise np.linalg.LinAlgError("not positive definite")
        return -(math.log(p["sigma"]) - math.log(1.5)) ** 2

    res = maximize(f, spec, {"sigma": 0.5})
    assert res.params["sigma"] == pytest.approx(1.5, rel=1e-6)
    assert any(v == -math.inf for _, _, v in res.trace)


def test_non_finite_start_raises():
    spec = HyperSpec(("sigma",), {"sigma": (0.01, 10.0)})
    with pytest.raises(HyperFitError) as err:
        maximize(lambda p: math.nan, spec, {"sigma": 1.0})
    assert err.value.last_finite is None


def test_start_outside_bounds():
    spec = HyperSpec(("sigma",), {"sigma": (0.1, 1.0)})
    with pytest.raises(ValueError, match="outside"):
        maximize(lambda p: 0.0, spec, {"sigma": 2.0})


@pytest.mark.parametrize("names, bounds", [
    ((), {}),
    (("nu",), {"nu": (0.5, 3.0)}),
    (("kappa",), {"kappa": (1.0, 2.0)}),
    (("sigma",), {}),
    (("sigma",), {"sigma": (0.0, 1.0)}),
    (("sigma",), {"sigma": (2.0, 1.0)}),
])
def test_spec_validation(names, bounds):
    with pytest.raises(ValueError):
        HyperSpec(names, bounds)


def test_spec_log_bounds():
    spec = HyperSpec(("ell", "sigma_e"), {"ell": (0.1, 1.0), "sigma_e": (1e-3, 1.0)})
    lo, hi = spec.log_bounds
    np.testing.assert_allclose(lo, np.log([0.1, 1e-3]))
    np.testing.assert_allclose(hi, [0.0, 0.0])
    assert spec.to_params(np.log([0.5, 0.01])) == pytest.approx({"ell": 0.5, "sigma_e": 0.01})
