"""Smoke test for the demem extension module.

Build and install with `maturin develop` (or `pip install --no-build-isolation .`)
from crates/py, then run `python python/smoke_test.py`.
"""

import math
import tempfile

import demem


def main():
    data = demem.Dataset.generate("two_gaussians", 60, noise=0.8, seed=1)
    assert len(data) == 60 and data.dim == 2

    model, history = demem.train(
        data, "train.method=standard\ntrain.epochs=5\ntrain.batch_size=8\n"
    )
    assert len(history) == 5
    assert 0.0 <= model.accuracy(data) <= 1.0
    assert len(model.predict(data.features[:3])) == 3

    assert math.isclose(demem.demem_loss([1.0, 2.0, 3.0, 4.0], 0.2), 2.75)
    assert math.isclose(demem.batch_variance([1.0, 2.0, 3.0, 4.0]), 1.25)
    assert math.isclose(demem.logit_scale(0.9), math.log(9.0))
    assert demem.bin_assign(0.0) == 0 and demem.bin_assign(1.0) == 21

    tpr, fpr, _ = demem.tpr_at_fpr([0.9, 0.8, 0.3, 0.1], [True, True, False, False], 0.25)
    assert (tpr, fpr) == (1.0, 0.0)

    with tempfile.TemporaryDirectory() as out:
        cfg = (
            "data.n=40\ntrain.method=standard\ntrain.epochs=2\n"
            "train.batch_size=8\nensemble.n_models=8\nmia.fpr_targets=0.25\n"
        )
        assert demem.run_shadow(cfg, out, workers=1) == 8
        summary = demem.run_attack(out, workers=1)
        assert {s["attack_name"] for s in summary} == {"lira_online", "lira_offline", "loss"}
        mem = demem.run_memorize(out)
        assert len(mem) == 40

    try:
        demem.train(data, "train.bogus=1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print("ok")


if __name__ == "__main__":
    main()
