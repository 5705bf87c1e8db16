"""Smoke test for the pywdgtc extension module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/pywdgtc-*.whl
"""

import math
import os
import tempfile

import pywdgtc as w


def main():
    dims = [12, 20, 10]
    scenario = w.generate_wdg(dims, clusters=3, rank_per_cluster=1, noise_sigma=0.02, seed=5)
    truth = scenario.truth
    assert truth.shape == dims
    assert len(scenario.graphs) == 2 and scenario.graphs[0].n == dims[0]

    mask = w.missing_random(dims, 0.3, seed=11)
    x = truth.masked(mask)

    cfg = w.SolverConfig(6, alpha=0.01, beta=0.5, graph_weights=[5.0, 5.0], seed=1)
    result = w.solve(x, mask, cfg, scenario.graphs)
    print(result)

    # Observed cells come back untouched.
    flags = mask.flags
    for c, v, f in zip(result.completed.values, truth.values, flags):
        if f:
            assert c == v
    trace = result.objective_trace
    assert trace[-1] <= trace[0] * (1 + 1e-9)

    report = w.score(result.completed, truth, mask.complement(), slice_mode=0)
    print("mse %.4g  mape %.3g%%  res %.4g" % (report["mse"], report["mape"], report["res"]))
    assert report["res"] < 0.2
    assert len(report["per_slice"]) == dims[0]

    # Graph helpers.
    lap = w.khop_binary(4, [(0, 1), (1, 2), (2, 3)], 2).laplacian()
    assert all(abs(sum(row)) < 1e-12 for row in lap)
    sim = w.poi_similarity([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
    assert all(0.0 <= v <= 1.0 for row in sim.weights for v in row)
    assert w.soft_threshold(-2.5, 1.0) == -1.5

    # File round trip.
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "obs.csv")
        w.write_tensor(path, x, mask)
        back, listed = w.read_tensor(path)
        assert back == x and listed.flags == mask.flags

    try:
        w.solve(x, mask, w.SolverConfig(2, beta=-1.0))
    except w.WdgtcError as e:
        print("rejected negative beta:", e)
    else:
        raise AssertionError("negative beta accepted")

    best, table = w.grid_search(
        x, mask, mask.complement(), truth, w.SolverConfig(4, max_iter=20), alpha=[0.0, 0.01], beta=[0.5]
    )
    assert len(table) == 2
    assert not math.isnan(table[0]["mse"])
    print("grid best alpha", best.alpha)
    print("ok")


if __name__ == "__main__":
    main()
