"""Smoke test for the feddes_py extension.

Build and install first:
    pip install -e crates/python --no-build-isolation
"""
import json
import math
import tempfile

import feddes_py as fd

CONFIG = """
seed = 11
[dataset]
kind = "gaussian_mixture"
classes = 2
features = 5
per_class = 100
separation = 2.0
[partition]
clients = 2
classes_per_client = 2
alpha = 1.0
[base]
architectures = [{ hidden = [16], activation = "relu" }]
max_epochs = 40
[meta]
hidden = 16
heads = 2
max_epochs = 40
"""


def main():
    data = fd.Dataset.gaussian_mixture(3, 4, 50, 3.0, seed=1)
    assert len(data) == 150 and data.n_classes == 3
    splits = data.partition(clients=3, classes_per_client=2, alpha=1.0, seed=2)
    seen = sorted(i for s in splits for part in ("train", "val", "test") for i in s[part])
    assert seen == list(range(150))

    scores, weights, fallback = fd.select([2.0, -1.0, 0.5])
    assert not fallback and abs(sum(weights) - 1.0) < 1e-12 and weights[1] == 0.0
    _, weights, fallback = fd.select([-1.0, -2.0])
    assert fallback and weights == [0.5, 0.5]
    label, mass = fd.vote([0.25, 0.25, 0.5], [1, 0, 0], 2)
    assert label == 0 and mass == [0.75, 0.25]
    assert abs(fd.effective_ensemble_size([0.5, 0.5]) - 2.0) < 1e-12
    assert fd.spearman([1.0, 1.0], [1.0, 2.0]) is None
    assert fd.stability([[0.5, 0.5]], [0.2, 0.8]) == 0.6000000000000001 or math.isclose(
        fd.stability([[0.5, 0.5]], [0.2, 0.8]), 0.6
    )

    try:
        fd.ExperimentConfig.from_toml("seed = 1")
    except fd.ConfigError:
        pass
    else:
        raise AssertionError("incomplete config accepted")

    cfg = fd.ExperimentConfig.from_toml(CONFIG)
    with tempfile.TemporaryDirectory() as out:
        result = fd.run_experiment(cfg, output_dir=out)
        summary = json.loads(result.summary_json)
        for name in ("local", "global", "feddes"):
            assert set(summary["methods"][name]) == {"mean", "std", "win_rate"}
            mean, _, _ = result.method(name)
            assert 0.0 <= mean <= 1.0
        assert result.fallback_mismatches == 0
        assert sum(result.calibration_label_changes) == 0
        assert result.clients_csv.startswith("client,n_test,local,global,feddes")
        print("feddes accuracy", round(result.method("feddes")[0], 4))
    print("ok")


if __name__ == "__main__":
    main()
