"""Quick end-to-end check of the Python bindings.

    pip install --no-build-isolation crates/python
    python crates/python/python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import feast_py as fp


def main():
    iso = fp.Environment([0.0, 200.0], [1500.0, 1500.0], bottom="rigid")
    modes = iso.solve_modes(232.0, 0.1)
    assert modes.num_modes == 62, modes.num_modes
    k1 = math.sqrt((2 * math.pi * 232 / 1500) ** 2 - (0.5 * math.pi / 200) ** 2)
    assert abs(modes.wavenumbers[0] - k1) / k1 < 1e-5

    e1 = fp.Environment.thermocline()
    e2 = e1.perturbed(50.0, 2.0)
    assert e2.speed_at(10.0) == e1.speed_at(10.0) + 2.0

    array = [94.125 + 5.90625 * i for i in range(21)]
    p = e1.solve_modes(232.0, 0.5).pressure(2000.0, 9.0, array)
    x = fp.covariance_feature(p)
    assert len(x) == 462
    y = fp.covariance_feature([v * (3 - 4j) for v in p])
    assert max(abs(a - b) for a, b in zip(x, y)) < 1e-13

    bins = fp.RangeBinning(1100.0, 5000.0, 201)
    assert bins.decode(bins.encode(3050.0)) == 3050.0

    a, b = fp.fit_linear([0.0, 1.0, 2.0], [0.0, 1.0, 3.0])
    assert abs(a - 1.5) < 1e-12 and abs(b + 1 / 6) < 1e-12

    times = [10.0 * i for i in range(8)]
    truth = [1200.0 + 25.0 * t / 10 for t in times]
    noisy = [r + (40.0 if i % 2 else -40.0) for i, r in enumerate(truth)]
    epoch, lam, curve = fp.feast_select([3.0, 1.0, 0.5], [noisy, truth, noisy], times)
    assert epoch == 2 and lam > 0 and len(curve) == 3

    cfg = json.loads(fp.Experiment().to_json())
    cfg.update(grid_step=0.5)
    cfg["train"]["n_samples"] = 200
    cfg["test"]["count"] = 10
    cfg["network"].update(hidden_layers=[8], max_epochs=3, batch_size=50)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "small.json"
        path.write_text(json.dumps(cfg))
        exp = fp.Experiment(str(path))
        run = Path(tmp) / "run"
        summary = exp.gen(str(run))
        assert summary["input_dim"] == 462 and summary["n_test"] == 10
        epochs, loss = exp.train(str(run))
        assert epochs == 3 and loss > 0
        selected = exp.select(str(run))
        report = exp.evaluate(str(run))
        assert report["selected_epoch"] == selected and len(report["curve"]) == 3
        assert len(exp.mfp(str(run))) == 10
        assert len(exp.plotdata(str(run), "1,selected,final")) == 5
        try:
            fp.Experiment().select(str(Path(tmp) / "empty"))
        except OSError:
            pass
        else:
            raise AssertionError("missing artifacts should raise OSError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
