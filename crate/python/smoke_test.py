"""Smoke test for the kanbench Python extension.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json
import math

import kanbench


def check_basis():
    values = kanbench.basis_eval(0.37, grid=5, k=3)
    assert len(values) == 8
    assert abs(sum(values) - 1.0) < 1e-12


def check_kan_fit():
    xs = [i / 49 for i in range(50)]
    inputs = [[x] for x in xs]
    targets = [math.sin(2 * math.pi * x) for x in xs]
    net = kanbench.KanNetwork([1, 5, 1], grid=5, k=3, seed=0)
    report = net.train(inputs, targets, optimizer="lbfgs", epochs=100)
    assert report["final_rmse"] < 0.02, report["final_rmse"]
    clone = kanbench.KanNetwork.from_json(net.to_json())
    assert clone.forward([0.25]) == net.forward([0.25])


def check_lstm():
    net = kanbench.LstmNetwork([4], input_size=1, head="tanh", seed=1)
    seqs = [[[math.sin((t + s) / 5)] for t in range(10)] for s in range(40)]
    targets = [math.sin((10 + s) / 5) for s in range(40)]
    before = net.train(seqs, targets, optimizer="adam", epochs=0)["final_rmse"]
    after = net.train(seqs, targets, optimizer="adam", epochs=50, lr=0.02)["final_rmse"]
    assert after < before
    assert math.isfinite(net.forward(seqs[0]))


def check_data_and_metrics():
    series = kanbench.gen_synthetic("volatile", 100, seed=3)
    assert len(series["close"]) == 100
    assert all(h >= max(o, c) for h, o, c in zip(series["high"], series["open"], series["close"]))
    assert abs(kanbench.rmse([1.0, 2.0], [0.0, 0.0]) - math.sqrt(2.5)) < 1e-15


def check_experiment():
    config = {
        "model": {"kind": "lstm", "layers": 1, "units": 3},
        "data": {"kind": "synthetic", "regime": "normal", "days": 150, "seed": 1},
        "lookback": 5,
        "feature_mode": "close_only",
        "forecast_horizons": [1, 5],
        "train": {"optimizer": {"kind": "adam", "lr": 0.01}, "max_epochs": 5, "batch_size": 16},
    }
    result = json.loads(kanbench.run_experiment(json.dumps(config)))
    assert result["failure"] is None
    assert [h["horizon"] for h in result["horizons"]] == [1, 5]
    assert result["wall_seconds"] >= 0


if __name__ == "__main__":
    for check in (check_basis, check_kan_fit, check_lstm, check_data_and_metrics, check_experiment):
        check()
        print(f"ok  {check.__name__}")
    print(f"kanbench {kanbench.__version__}: all smoke checks passed")
