"""Smoke test of the Python bindings: simulate, identify, score."""

import math

import kronid


def main():
    k = kronid.stable_spline(0.5, 0.3, 5)
    assert len(k) == 5 and all(len(r) == 5 for r in k)
    assert all(abs(k[i][j] - k[j][i]) < 1e-15 for i in range(5) for j in range(5))

    sim = kronid.simulate(2, 2, m=1, n=300, seed=7)
    y, u, truth = sim["y"], sim["u"], sim["truth"]
    assert len(y) == 300 and len(y[0]) == 4 and len(u[0]) == 1

    fit = kronid.identify(y, 2, 2, u=u, lags=20, restarts=1, shape_grid="coarse")
    assert fit["variant"] == "K"
    assert len(fit["g"]) == 20 and len(fit["f"]) == 20
    assert math.isfinite(fit["nll"])

    g_fit = kronid.fit_score(truth["g"], fit["g"], 20)
    f_fit = kronid.fit_score(truth["f"], fit["f"], 20)
    e = kronid.edge_error(truth["edges"], fit["edges"])
    assert kronid.edge_error(truth["edges"], truth["edges"]) == 0.0
    assert 0.0 <= e <= 1.0
    assert kronid.fit_score(truth["g"], truth["g"], 20) == 100.0

    rep = kronid.ard_check(y, 2, 2, u=u, lags=10)
    assert isinstance(rep["all_lockable"], bool)

    try:
        kronid.identify(y, 2, 2, u=u, variant="H")
    except ValueError:
        pass
    else:
        raise AssertionError("H with inputs must be rejected")

    print(f"kronid {kronid.__version__}: AIRF {(g_fit + f_fit) / 2:.2f}, ERR {e:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
