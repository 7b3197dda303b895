import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralccm import linalg, verify
from neuralccm.certloss import ControllerNet, MetricNet
from neuralccm.diffnet import Mlp2
from neuralccm.dynamics import Box, make_benchmark
from neuralccm.verify import (LipschitzBreakdown, Region, composite_lipschitz, controller_constants_simple,
                              grid_verify, metric_constants, network_lipschitz, sampled_bounds, tube_bound)

from oracles import planted_linear_fields


def dubins_region(scale=1.0):
    model = make_benchmark("dubins")
    return model, Region(Box([0, 0, -0.5, 1.2], [0, 0, 0.5, 1.8]).scaled(scale),
                         Box([-0.1] * 4, [0.1] * 4), model.control_box)


def simple_nets(model, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    mn = MetricNet(model.n, model.m, model.relevant, masked=model.sparse, hidden_dim=16, rng=rng)
    cn = ControllerNet(model.n, model.m, "simple", model.relevant, hidden_dim=16, rng=rng)
    for p in mn.params + cn.params:
        p.value = p.value * scale
    return mn, cn


def test_network_lipschitz_examples():
    assert network_lipschitz(Mlp2(3, 2, zero=True)) == 0.0
    net = Mlp2(1, 1, hidden_dim=1, zero=True)
    net.W1.value[:] = 1.0
    net.W2.value[:] = 1.0
    assert network_lipschitz(net) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_network_lipschitz_dominates_sampled_jacobians(seed):
    rng = np.random.default_rng(seed)
    net = Mlp2(4, 3, hidden_dim=32, rng=rng)
    x = rng.uniform(-3, 3, (10_000, 4))
    J = net.input_jacobian(x)
    assert network_lipschitz(net) >= np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))


def test_sampled_bounds_examples():
    norm = lambda z: np.linalg.norm(z, axis=1)
    square, cube = Box(-np.ones(2), np.ones(2)), Box(-np.ones(3), np.ones(3))
    assert sampled_bounds(lambda z: np.full(len(z), 2.5), cube, 10).value == 2.5
    got = sampled_bounds(norm, square, 10_000, seed=0).value
    assert abs(got - math.sqrt(2)) <= 0.02 * math.sqrt(2)
    assert got == sampled_bounds(norm, square, 10_000, seed=0).value
    # raw corners are undersampled in 3-D; the Lipschitz inflation restores the sup
    assert sampled_bounds(norm, cube, 10_000, seed=0, lipschitz=1.0).value >= math.sqrt(3)


def test_sampled_bounds_inflation_covers_denser_sampling():
    box = Box(-np.ones(2), np.ones(2))
    fun = lambda z: np.sin(3 * z[:, 0]) * np.cos(2 * z[:, 1])  # Lipschitz <= sqrt(13)
    b = sampled_bounds(fun, box, 200, seed=1, lipschitz=math.sqrt(13))
    assert b.value >= np.max(fun(box.sample(np.random.default_rng(5), 2000)))
    assert b.cover > 0 and b.value > b.raw


def test_composite_lipschitz_examples():
    ones = LipschitzBreakdown(*([1.0] * 9))
    assert composite_lipschitz(ones, 0.5) == 12.0
    assert composite_lipschitz(LipschitzBreakdown(), 0.5) == 0.0
    L_A, S_A, L_B, S_B = verify.dubins_constants(2.0)
    assert abs(L_A - math.sqrt(6)) <= 1e-12 and abs(S_A - math.sqrt(5)) <= 1e-12
    assert (L_B, S_B) == (0.0, 1.0)


def test_breakdown_rejects_negative():
    with pytest.raises(ValueError):
        LipschitzBreakdown(L_M=-1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=9, max_size=9), st.integers(0, 8), st.floats(0, 5),
       st.floats(0.01, 3))
def test_composite_monotone(vals, which, bump, rate):
    base = LipschitzBreakdown(*vals)
    more = list(vals)
    more[which] += bump
    assert composite_lipschitz(LipschitzBreakdown(*more), rate) >= composite_lipschitz(base, rate)


def test_dtanh_constant():
    t = np.linspace(-3, 3, 200_001)
    second = -2 * np.tanh(t) * (1 - np.tanh(t) ** 2)
    assert verify.L_DTANH == pytest.approx(4 / (3 * math.sqrt(3)), abs=1e-15)
    assert abs(np.max(np.abs(second)) - verify.L_DTANH) <= 1e-9


def test_simple_controller_constants():
    model, region = dubins_region()
    zero = ControllerNet(4, 2, "simple", model.relevant, zero=True)
    assert controller_constants_simple(zero, region) == (0.0, 0.0)
    with pytest.raises(verify.UnsupportedArchitecture):
        controller_constants_simple(ControllerNet(4, 2, "bottleneck"), region)


def _gain_at(cn, z, region):
    x, xr, ur = region.split(z)
    return cn.gain(x, xr, ur)[1]


def test_simple_controller_bounds_dominate_samples():
    model, region = dubins_region()
    _, cn = simple_nets(model, 1, scale=2.0)
    L_K, S_K = controller_constants_simple(cn, region)
    box = region.as_box()
    rng = np.random.default_rng(0)
    z = box.sample(rng, 10_000)
    K = _gain_at(cn, z, region)
    assert np.max(np.linalg.norm(K, ord=2, axis=(1, 2))) <= S_K
    dz = rng.standard_normal(z.shape) * (box.halfwidth > 0)
    dz *= 1e-5 / np.linalg.norm(dz, axis=1, keepdims=True)
    dK = np.linalg.norm(_gain_at(cn, z + dz, region) - K, ord=2, axis=(1, 2)) / 1e-5
    assert np.max(dK) <= L_K


def test_metric_constants_zero_net():
    mc = metric_constants(MetricNet(4, 2, zero=True), Box(-np.ones(4), np.ones(4)))
    assert mc.m_lower == pytest.approx(10.0) and mc.m_upper == 10.0 and mc.L_M == 0.0 and mc.S_M == 10.0


def test_metric_constants_bracket_sampled_metric():
    model, region = dubins_region()
    mn, _ = simple_nets(model, 2, scale=1.5)
    mc = metric_constants(mn, region.state)
    assert mc.m_upper == pytest.approx(10.0)
    x = region.state.sample(np.random.default_rng(3), 10_000)
    eig = linalg.sym_eigvals(linalg.inverse(mn.W(x)))
    assert eig.min() >= mc.m_lower and eig.max() <= mc.m_upper + 1e-12
    # L_M against difference quotients of M
    dx = np.random.default_rng(4).standard_normal(x.shape) * (region.state.halfwidth > 0)
    dx *= 1e-5 / np.linalg.norm(dx, axis=1, keepdims=True)
    dM = linalg.inverse(mn.W(x + dx)) - linalg.inverse(mn.W(x))
    assert np.max(np.linalg.norm(dM, ord=2, axis=(1, 2))) / 1e-5 <= mc.L_M


def test_grid_shape_covers_tau():
    lower, upper, tau = np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 2.0]), 0.1
    shape = verify.grid_shape(lower, upper, tau)
    assert shape[2] == 1
    spacing = (upper - lower)[:2] / (shape[:2] - 1)
    assert math.sqrt(np.sum((spacing / 2) ** 2)) <= tau


def test_grid_verify_analytic_examples():
    tau = 0.05
    ok = grid_verify(lambda z: np.sum(z * z, 1) - 4, [-1, -1], [1, 1], tau, 2 * math.sqrt(2))
    assert ok.verdict == "certified" and ok.worst == pytest.approx(-2.0)
    bad = grid_verify(lambda z: np.sum(z * z, 1) - 0.5, [-1, -1], [1, 1], tau, 2 * math.sqrt(2))
    assert bad.verdict == "refuted"
    c = np.array(bad.counterexample)
    assert np.sum(c * c) - 0.5 >= 0


def test_grid_verify_planted_family():
    for g, lo, hi, L, expected in planted_linear_fields(20, 0):
        rep = grid_verify(g, lo, hi, 0.05, L)
        assert rep.verdict == expected
        if expected == "refuted":
            assert g(np.array([rep.counterexample]))[0] >= 0


def test_grid_refinement_never_flips_to_refuted():
    for g, lo, hi, L, expected in planted_linear_fields(12, 1):
        if expected != "inconclusive":
            continue
        finer = grid_verify(g, lo, hi, 0.025, L)
        assert finer.verdict != "refuted"


def test_grid_verify_is_order_independent():
    g = lambda z: np.sin(5 * z[:, 0]) + z[:, 1] - 1.5
    a = grid_verify(g, [-1, -1], [1, 1], 0.02, 6.0, chunk=97)
    b = grid_verify(g, [-1, -1], [1, 1], 0.02, 6.0, chunk=5000, workers=3)
    assert (a.verdict, a.worst, a.counterexample) == (b.verdict, b.worst, b.counterexample)


def test_grid_cap_reports_required_tau():
    with pytest.raises(verify.GridTooLarge) as err:
        grid_verify(lambda z: -np.ones(len(z)), np.zeros(4), np.ones(4), 1e-3, 1.0, cap=10_000)
    tau = err.value.required_tau
    assert np.prod(verify.grid_shape(np.zeros(4), np.ones(4), tau)) <= 10_000
    assert grid_verify(lambda z: -np.ones(len(z)), np.zeros(4), np.ones(4), tau, 1.0,
                       cap=10_000).verdict == "certified"


def test_grid_verify_argument_checks():
    with pytest.raises(ValueError):
        grid_verify(lambda z: z[:, 0], [0], [1], 0.0, 1.0)
    with pytest.raises(ValueError):
        grid_verify(lambda z: z[:, 0], [0], [1], 0.1, -1.0)


def test_report_verdict_consistency_enforced():
    with pytest.raises(ValueError):
        verify.CertificateReport({}, 0.1, 0.1, 1.0, 1, worst=-1.0, margin=-0.1, verdict="refuted")


def test_certify_end_to_end_small_region():
    model = make_benchmark("dubins")
    mn, cn = simple_nets(model, 5, scale=0.5)
    region = Region(Box([0, 0, 0.0, 1.5], [0, 0, 0.0, 1.5]), Box([-0.01, -0.01, 0, 0], [0.01, 0.01, 0, 0]),
                    Box([0, 0], [0, 0]))
    rep = verify.certify(model, mn, cn, region, 0.1, tau=0.01, count=500)
    assert rep.verdict in ("certified", "refuted", "inconclusive")
    assert rep.grid_points == int(np.prod(verify.grid_shape(region.as_box().lower, region.as_box().upper, 0.01)))
    assert set(rep.breakdown["provenance"]) >= {"L_Mdot", "L_M", "L_K", "L_A"}
    assert rep.m_upper == pytest.approx(10.0)
    with pytest.raises(verify.UnsupportedArchitecture):
        verify.certify(model, mn, ControllerNet(4, 2, "bottleneck", model.relevant), region, 0.1, 0.01, count=50)


def test_tube_bound_closed_forms():
    tb = tube_bound(0.5, 8.0, 0.7, 0.05, [1.0, 2.0], [1.3, 1.6])
    dx = math.hypot(0.3, 0.4)
    assert tb.R0 == pytest.approx(math.sqrt(8.0) * dx, abs=1e-15)
    assert abs(float(tb(0.0)) - tb.R0 / math.sqrt(0.5)) <= 1e-12
    assert abs(float(tb(1e4)) - math.sqrt(16.0) * 0.05 / 0.7) <= 1e-12
    still = tube_bound(0.5, 8.0, 0.7, 0.0, [1.0, 2.0], [1.3, 1.6])
    t = np.linspace(0, 5, 11)
    assert np.allclose(still(t), 4.0 * np.exp(-0.7 * t) * dx, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 5), st.floats(1, 10), st.floats(0.05, 3), st.floats(0, 1), st.floats(0, 2))
def test_tube_bound_shape(m_lo, ratio, rate, eps, dx):
    tb = tube_bound(m_lo, m_lo * ratio, rate, eps, [dx], [0.0])
    t = np.linspace(0, 20, 401)
    b = tb(t)
    assert np.all(b >= 0)
    if eps / rate * math.sqrt(ratio) <= tb.R0 / math.sqrt(m_lo):
        assert np.all(np.diff(b) <= 1e-12)


def test_tube_bound_validation():
    with pytest.raises(ValueError):
        tube_bound(2.0, 1.0, 0.5, 0.1, [0.0], [1.0])
    with pytest.raises(ValueError):
        tube_bound(1.0, 2.0, 0.0, 0.1, [0.0], [1.0])
