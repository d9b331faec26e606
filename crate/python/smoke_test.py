"""Smoke test for the pmt_iqa extension module.

Build it first (see README), then run: python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import pmt_iqa


def main() -> int:
    assert abs(pmt_iqa.srcc([1, 2, 3, 4], [10, 20, 30, 40]) - 1.0) < 1e-12
    assert abs(pmt_iqa.plcc([1, 2, 3], [1, 2, 3]) - 1.0) < 1e-12
    assert pmt_iqa.fractional_ranks([3.0, 1.0, 3.0]) == [2.5, 1.0, 2.5]
    assert pmt_iqa.lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0

    l1, l2 = pmt_iqa.weights_at(0, 10, 0.9)
    assert l1 == 0.0 and l2 == 1.0
    assert pmt_iqa.num_categories(0.2) == 5
    assert pmt_iqa.to_level(0.2) == 2
    assert pmt_iqa.to_one_hot(2, 5) == [0.0, 1.0, 0.0, 0.0, 0.0]

    ce = pmt_iqa.ce_loss_from_logits([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
    assert abs(ce - math.log(3)) < 1e-9
    assert abs(sum(pmt_iqa.softmax([[1.0, 2.0, 3.0]])[0]) - 1.0) < 1e-9

    ranks = pmt_iqa.rank_methods([("a", "x", 0.9, 0.8), ("b", "x", 0.8, 0.9)])
    assert {r["method"]: r["avg_srcc_rank"] for r in ranks} == {"a": 1.0, "b": 2.0}

    with tempfile.TemporaryDirectory() as tmp:
        manifest = pmt_iqa.make_synthetic(os.path.join(tmp, "data"), 8, size=28, seed=1)
        config = os.path.join(tmp, "run.toml")
        with open(config, "w") as f:
            f.write(
                f'[dataset]\nmanifest = "{manifest}"\ncrop_size = 24\nnum_views = 1\n'
                '[model]\nbackbone = "toy_cnn"\nstage_channels = [4, 8]\np = 8\n'
                "reg_widths = [16, 8, 4]\ncls_widths = [16, 8]\n"
                "[schedule]\nT = 2\n[train]\nbatch = 4\n"
            )
        ckpt, log, (s, p) = pmt_iqa.train_from_config(config, ["train.seed=3"])
        assert [row["epoch"] for row in log] == [0, 1]
        assert -1.0 <= s <= 1.0 and -1.0 <= p <= 1.0
        path = os.path.join(tmp, "ck.safetensors")
        ckpt.save(path)
        again = pmt_iqa.Checkpoint.load(path)
        assert again.fingerprint == ckpt.fingerprint and again.epoch == 2
        assert again.predict(manifest) == ckpt.predict(manifest)
        print("scores:", [round(x, 4) for x in again.predict(manifest)])

    print("pmt_iqa smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
