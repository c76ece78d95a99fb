"""Smoke test for the `ept` extension module.

Build and install it first, e.g.

    pip install maturin
    maturin develop -m crates/python/Cargo.toml

then run `python3 python/smoke_test.py`.
"""

import json
import math

import ept


def main():
    assert "8gaussians" in ept.datasets()

    x = ept.sample_dataset("8gaussians", 300, seed=1)
    y = ept.reference_sample(2, 300, seed=2)
    assert len(x) == 300 and len(x[0]) == 2

    same = ept.mmd2(x, x)
    apart = ept.mmd2(x, y)
    assert abs(same) < 1e-2, same
    assert apart > same
    assert ept.w2(x[:50], x[:50]) == 0.0
    assert ept.median_bandwidth(x, y) > 0.0

    chi2 = ept.Divergence("chi2")
    assert chi2.f(1.0) == 0.0 and chi2.f_double_prime(3.0) == 1.0

    net = ept.RatioNet(2, [16, 16], seed=0)
    values, grads = net.value_and_grad(y[:5])
    assert len(values) == 5 and len(grads[0]) == 2
    total, bregman, penalty = ept.lsdr_loss(net, x, y, alpha=0.5)
    assert math.isclose(total, bregman + 0.5 * penalty, rel_tol=1e-9, abs_tol=1e-12)
    clone = ept.RatioNet.from_json(net.to_json())
    assert clone(y[:5]) == values

    v = ept.mmd_flow_velocity(x, x, bandwidth=1.0)
    assert max(abs(c) for row in v for c in row) < 1e-12

    s = ept.svgd_velocity("1dgaussian", [[2.0]], bandwidth=1.0)
    assert len(s) == 1

    cfg = json.loads(ept.preset("toy-2d"))
    cfg["dataset"]["n"] = 200
    cfg["reference"]["n"] = 200
    cfg["objective"]["batch"] = 100
    cfg["transport"]["K"] = 5
    cfg.pop("output_dir")
    run = ept.train(json.dumps(cfg))
    assert run["iterations"] == 5
    assert len(run["particles"]) == 200
    assert len(run["fit_loss"]) == 5

    print("python smoke test passed")


if __name__ == "__main__":
    main()
