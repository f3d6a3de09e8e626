"""Smoke test for the stratssl Python extension.

Build and install with `pip install --no-build-isolation -e crates/stratssl-py`,
then run `python python/smoke_test.py`.
"""

import math
import pathlib

import stratssl

ROOT = pathlib.Path(__file__).resolve().parents[1]
TOY = ROOT / "crates" / "stratssl-cli" / "tests" / "data" / "toy.json"


def find(report, metric, variant, flavor):
    for e in report["accuracy"]:
        if e["metric"]["kind"] == metric and e["variant"] == variant and e["flavor"] == flavor:
            return e
    raise KeyError((metric, variant, flavor))


def main():
    data = stratssl.Dataset.from_manifest(str(TOY))
    assert data.big_n == 1000 and data.n == 120 and data.num_strata == 2, repr(data)

    cfg = stratssl.default_config()
    cfg["perturbation"] = None
    cfg["cv"]["replications"] = 3
    report = stratssl.analyze(data, cfg)
    for metric in ("brier", "omr"):
        e = find(report, metric, "ssl", "ensemble")
        assert 0.0 <= e["value"] <= 1.0 and e["se"] > 0.0
    print("ssl ensemble brier", find(report, "brier", "ssl", "ensemble")["value"])

    rows = [[0.1 * i, (-1) ** i * 0.05 * i] for i in range(40)]
    strata = [1] * 20 + [2] * 20
    labeled = [i % 2 == 0 for i in range(40)]
    outcomes = [float(i % 4 == 0) for i in range(40) if labeled[i]]
    small = stratssl.Dataset(rows, strata, labeled, outcomes)
    assert small.n == 20

    alloc = stratssl.neyman([0.69, 0.31], [0.15, 0.38], 400)
    assert alloc["n_s"] == [187, 213], alloc
    assert math.isclose(sum(alloc["shares"]), 1.0)

    try:
        stratssl.neyman([0.5, 0.5], [0.0, 0.0], 10)
    except stratssl.StratsslError as err:
        print("rejected:", err)
    else:
        raise AssertionError("all-zero variances must be rejected")

    sample = stratssl.generate("custom", seed=3, n_per_stratum=30, big_n=500)
    assert sample.n == 60 and sample.big_n == 500

    study = stratssl.simulate("custom", seed=1, profile="smoke")
    assert study["completed"] == 2, study["dropped"]
    print("smoke test passed, stratssl", stratssl.__version__)


if __name__ == "__main__":
    main()
