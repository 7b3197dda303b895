"""Certify a small Dubins region and draw disturbed rollouts against the tube.

Trains the simple (verifiable) controller on small tracking errors, grid
checks a tiny region around a straight-line reference, then reports how
many disturbed runs stay under the tube bound.
"""
import numpy as np

from neuralccm import simeval, train, verify
from neuralccm.dynamics import Box, make_benchmark


def main():
    model = make_benchmark("dubins")
    rng = np.random.default_rng(1)
    xref = model.state_box.sample(rng, 20_000)
    x = np.clip(xref + model.init_error_box.scaled(0.1).sample(rng, 20_000), model.state_box.lower,
                model.state_box.upper)
    data = (x, xref, model.control_box.sample(rng, 20_000))
    res = train.train(model, train.TrainConfig(num_samples=20_000, epochs=6, arch="simple"), data=data)

    region = verify.Region(Box([0, 0, 0, 1.5], [0, 0, 0, 1.5]), Box([-2e-5] * 4, [2e-5] * 4),
                           Box([0, 0], [0, 0]))
    rate = 0.5
    rep = verify.certify(model, res.metric, res.controller, region, rate, tau=2e-6)
    print(f"verdict {rep.verdict} ({rep.caveat or 'no caveat'}), L={rep.lipschitz:.3g}, "
          f"{rep.grid_points} grid points, worst {rep.worst:.3f} vs margin {rep.margin:.3f}")

    ref = simeval.gen_reference(model, simeval.ReferenceSpec(horizon=10.0), x0=region.state.lower,
                                weights=np.zeros((len(simeval.DEFAULT_FREQS), model.m)))
    inside = 0
    for run in range(20):
        x0 = ref.x0 + region.error.sample(rng, 1)[0]
        dist = simeval.gen_disturbance(simeval.DisturbanceSpec(0.05), 10.0, model.n, seed=run)
        tr = simeval.simulate(model, res.controller, ref, dist, x0=x0)
        tube = verify.tube_bound(rep.m_lower, rep.m_upper, rate, 0.05, ref.x0, x0)
        inside += bool(np.all(np.linalg.norm(tr.x - tr.xstar, axis=1) <= tube(tr.t)))
    print(f"{inside}/20 disturbed rollouts inside the tube (limit {tube.limit:.3f})")


if __name__ == "__main__":
    main()
