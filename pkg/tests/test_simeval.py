import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralccm import simeval
from neuralccm.certloss import ControllerNet
from neuralccm.dynamics import BENCHMARKS, Box, SystemModel, make_benchmark, make_toy
from neuralccm.simeval import (DisturbanceSpec, NormalizationError, ReferenceSpec, Trajectory, auc,
                               conformal_quantile, fit_convergence, gen_disturbance, gen_reference,
                               normalized_error_curve, simulate)

NF = len(simeval.DEFAULT_FREQS)


def zero_controller(x, xs, us):
    return np.asarray(us, dtype=float)


def test_straight_line_reference():
    model = make_benchmark("dubins")
    ref = gen_reference(model, seed=0, x0=[0, 0, 0, 1.5], weights=np.zeros((NF, 2)))
    assert ref.horizon == pytest.approx(10.0)
    assert np.allclose(ref.xstar[:, 0], 1.5 * ref.t, atol=1e-12)
    assert not np.any(ref.xstar[:, 1:3])


@pytest.mark.parametrize("name", BENCHMARKS)
def test_reference_starts_in_initial_box_and_stays_bounded(name):
    model = make_benchmark(name)
    for seed in range(3):
        ref = gen_reference(model, ReferenceSpec(horizon=2.0), seed=seed)
        assert model.init_box.contains(ref.x0)
        assert simeval.inside(model, ref.xstar, simeval.REFERENCE_BOX_FACTOR)
        assert np.all(ref.ustar >= model.control_box.lower) and np.all(ref.ustar <= model.control_box.upper)


def test_reference_step_halving_is_fourth_order():
    model = make_benchmark("dubins")
    w = np.random.default_rng(0).uniform(-1, 1, (NF, 2))
    fine = gen_reference(model, ReferenceSpec(horizon=4.0, dt=0.00125), x0=[0, 0, 0, 1.5], weights=w)
    errs = []
    for dt in (0.04, 0.02):
        r = gen_reference(model, ReferenceSpec(horizon=4.0, dt=dt), x0=[0, 0, 0, 1.5], weights=w)
        errs.append(np.linalg.norm(r.xstar[-1] - fine.xstar[-1]))
    assert 12 <= errs[0] / errs[1] <= 20


def test_disturbance_properties():
    d = gen_disturbance(DisturbanceSpec(0.0), 10.0, 3, seed=0)
    assert not np.any(d(np.linspace(0, 10, 101)))
    d = gen_disturbance(DisturbanceSpec(0.3), 20_000.0, 4, seed=1)
    assert len(d.values) >= 10_000  # ~4e4 pieces keeps the 1% window beyond 3 standard errors
    assert np.all(np.linalg.norm(d.values, axis=1) <= 0.3)
    assert abs(np.mean(np.diff(d.breaks)) - 0.5) <= 0.005
    assert np.array_equal(d(d.breaks[3] + 1e-9), d.values[3])


def test_disturbance_spec_validation():
    with pytest.raises(ValueError):
        DisturbanceSpec(-1.0)


@pytest.mark.parametrize("name", BENCHMARKS)
def test_matching_start_tracks_reference(name):
    model = make_benchmark(name)
    cn = ControllerNet(model.n, model.m, relevant=model.relevant, width=8, hidden_dim=16,
                       rng=np.random.default_rng(0))
    ref = gen_reference(model, ReferenceSpec(horizon=2.0), seed=1)
    tr = simulate(model, cn, ref)
    assert not tr.diverged
    assert np.max(np.linalg.norm(tr.x - tr.xstar, axis=1)) <= 1e-6


def _free_particle():
    box = Box([-10, -10], [10, 10])
    return SystemModel("free", 2, 2, box, Box([-1, -1], [1, 1]), Box([0, 0], [0, 0]), box, False,
                       _f=lambda x: np.zeros_like(x),
                       _B=lambda x: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)),
                       _dfdx=lambda x: np.zeros(x.shape + (2,)),
                       _dbdx=lambda x: np.zeros(x.shape[:-1] + (2, 2, 2)))


def test_euler_matches_explicit_step():
    model = _free_particle()
    ref = gen_reference(model, ReferenceSpec(horizon=1.0, dt=0.1), x0=[0, 0], weights=np.zeros((NF, 2)))
    u = np.array([0.3, -0.7])
    tr = simulate(model, lambda x, xs, us: u, ref, stepper="euler")
    assert np.allclose(np.diff(tr.x, axis=0), np.outer(np.diff(tr.t), u), atol=1e-15)


def test_rk4_global_error_order():
    model = make_toy("scalar")
    errs = []
    ref = gen_reference(model, ReferenceSpec(horizon=2.0), x0=[0.0], weights=np.zeros((NF, 1)))
    for dt in (0.2, 0.1):
        tr = simulate(model, lambda x, xs, us: np.zeros(1), ref, dt=dt, x0=[1.0])
        errs.append(abs(tr.x[-1, 0] - math.exp(-2.0)))
    assert 14 <= errs[0] / errs[1] <= 18


def test_unknown_stepper():
    model = make_toy("scalar")
    ref = gen_reference(model, ReferenceSpec(horizon=1.0), seed=0)
    with pytest.raises(ValueError):
        simulate(model, zero_controller, ref, stepper="midpoint")


def test_divergence_is_flagged_not_raised():
    model = make_toy("scalar")
    ref = gen_reference(model, ReferenceSpec(horizon=5.0), x0=[0.0], weights=np.zeros((NF, 1)))
    tr = simulate(model, lambda x, xs, us: 5.0 * (x - xs), ref, x0=[0.5])
    assert tr.diverged and len(tr.t) < len(ref.t)
    assert np.all(np.isfinite(tr.u))


def _traj(x, xs):
    t = np.arange(len(x), dtype=float)
    z = np.zeros((len(x), 1))
    return Trajectory(t, np.asarray(x, float), np.asarray(xs, float), z, z, np.zeros_like(np.asarray(x, float)))


def test_error_curve_cases():
    tr = _traj([[1.0, 1.0], [2.0, 3.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 2.0], [-1.0, -1.0]])
    assert np.allclose(normalized_error_curve(tr), 1.0, atol=1e-15)
    same = _traj([[1.0, 2.0]] * 3, [[1.0, 2.0]] * 3)
    with pytest.raises(NormalizationError):
        normalized_error_curve(same)
    assert not np.any(normalized_error_curve(same, normalized=False))


def test_auc_cases():
    assert auc(np.ones(51), 5.0) == pytest.approx(5.0, abs=1e-12)
    t = np.linspace(0, 10, 10_001)
    assert abs(auc(np.exp(-t), 10.0) - (1 - math.exp(-10))) <= 1e-4
    assert auc(3 * np.linspace(0, 2, 7), 2.0) == pytest.approx(6.0, abs=1e-12)
    assert auc(np.ones(11), 5.0, per_time=True) == pytest.approx(1.0)


def test_fit_pure_exponentials():
    t = np.linspace(0, 5, 501)
    C, (lam,) = fit_convergence([np.exp(-2 * t)], t)
    assert C == pytest.approx(1.0, abs=1e-9) and lam == pytest.approx(2.0, rel=1e-6)
    C, (lam,) = fit_convergence([2 * np.exp(-t)], t)
    assert C == pytest.approx(2.0, rel=1e-6) and lam == pytest.approx(1.0, rel=1e-6)


def test_fit_with_bump_matches_dense_search():
    t = np.linspace(0, 6, 601)
    curve = np.exp(-t) + 0.5 * np.exp(-(t - 3) ** 2)
    C, (lam,) = fit_convergence([curve], t)
    best = math.inf
    for g in np.linspace(1e-4, 5, 50_000):
        c = max(1.0, float(np.max(curve * np.exp(g * t))))
        best = min(best, c * (1 - math.exp(-g * 6)) / g)
    got = C * (1 - math.exp(-lam * 6)) / lam if lam > 0 else C * 6
    assert abs(got - best) <= 0.01 * best
    assert np.all(curve <= C * np.exp(-lam * t) * (1 + 1e-9))


def test_fit_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        fit_convergence([], np.arange(3.0))
    with pytest.raises(ValueError):
        fit_convergence([np.ones(4)], np.arange(3.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5))
def test_envelope_dominates_every_curve(seed, count):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 4, 201)
    curves = [np.exp(-rng.uniform(0, 3) * t) * (1 + rng.uniform(0, 1) * np.sin(rng.uniform(0, 5) * t) ** 2)
              for _ in range(count)]
    curves = [c / c[0] for c in curves]
    C, rates = fit_convergence(curves, t)
    assert C >= 1
    for c, r in zip(curves, rates):
        assert np.all(c <= C * np.exp(-r * t) * (1 + 1e-9) + 1e-12)


def test_conformal_index_rule():
    s = np.random.default_rng(0).permutation(19).astype(float)
    assert conformal_quantile(s, 0.05, with_index=True) == (19, 18.0)
    s = np.arange(999.0)[::-1]
    assert conformal_quantile(s, 0.05, with_index=True) == (950, 949.0)
    assert conformal_quantile(np.ones(5), 0.05) == math.inf
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            conformal_quantile([1.0], bad)


def test_conformal_coverage_small_monte_carlo():
    rng = np.random.default_rng(3)
    scores = rng.uniform(size=(20_000, 200))
    q = np.sort(scores[:, :199], axis=1)[:, conformal_quantile(np.zeros(199), 0.05, with_index=True)[0] - 1]
    assert np.mean(scores[:, 199] > q) <= 0.06


def test_trajectory_csv_round_trip(tmp_path):
    model = make_benchmark("dubins")
    ref = gen_reference(model, ReferenceSpec(horizon=0.5), seed=2)
    tr = simulate(model, zero_controller, ref, gen_disturbance(DisturbanceSpec(0.1), 0.5, 4, 0),
                  x0=ref.x0 + 0.1)
    path = tmp_path / "traj.csv"
    simeval.write_trajectory_csv(tr, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(["t", "x_1", "x_2", "x_3", "x_4", "xstar_1", "xstar_2", "xstar_3", "xstar_4",
                               "u_1", "u_2", "ustar_1", "ustar_2", "d_1", "d_2", "d_3", "d_4"])
    back = simeval.read_trajectory_csv(path, 4, 2)
    for name in ("t", "x", "xstar", "u", "ustar", "d"):
        assert np.array_equal(getattr(back, name), getattr(tr, name))


def test_evaluate_scores_round_trip(tmp_path):
    model = make_benchmark("dubins")
    roll = simeval.evaluate(model, lambda x, xs, us: us - 0.5 * (x - xs) @ np.array([[0, 0], [0, 0], [1, 0], [0, 1.0]]),
                            runs=4, seed=0, spec=ReferenceSpec(horizon=1.0))
    assert len(roll.aucs) == 4 and roll.C >= 1
    d = roll.scores("auc", 0.05).to_dict()
    assert d["n"] == 4 and d["quantile_index"] == 5 and d["q"] is None
    assert roll.scores("neg_rate", 0.05).to_dict()["C"] == roll.C
    simeval.write_scores_json(roll.scores("auc", 0.05), tmp_path / "s.json")


def test_quality_scores_validation():
    with pytest.raises(ValueError):
        simeval.QualityScores([1.0], "auc", 1.5)
    with pytest.raises(ValueError):
        simeval.QualityScores([1.0], "median", 0.05)
    with pytest.raises(ValueError):
        simeval.QualityScores([math.nan], "auc", 0.05)
