"""Smoke test for the trajdiff Python module.

Uses an installed module if there is one (maturin develop), otherwise builds
the cdylib with cargo and loads it from a temp dir.
"""

import importlib
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        return importlib.import_module("trajdiff")
    except ImportError:
        pass
    subprocess.run(["cargo", "build", "--release", "-p", "trajdiff-py"], cwd=ROOT, check=True)
    lib = os.path.join(ROOT, "target", "release", "libtrajdiff_py.so")
    d = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(d, "trajdiff.so"))
    sys.path.insert(0, d)
    return importlib.import_module("trajdiff")


TINY = """
seed = 3
[cohort]
n_patients = 60
[diffusion]
hidden = 16
steps = 8
[curriculum]
max_difficulty = 2
epochs_start = 1
epochs_end = 1
[guidance]
candidates = 3
[guidance.scorer]
epochs = 2
[classifier]
steps = 50
"""


def main():
    td = load()

    cfg = td.RunConfig()
    back = td.RunConfig.from_toml(cfg.to_toml())
    assert back.hash() == cfg.hash()
    try:
        td.RunConfig.from_toml("[cohort]\nn_patients = 0\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    s = td.NoiseSchedule()
    prod = 1.0
    for b, ab in zip(s.betas(), s.alpha_bars()):
        prod *= 1.0 - b
        assert math.isclose(prod, ab, rel_tol=1e-12)

    q = td.QuantizerSpec([-1.0, -1.0], [1.0, 1.0], 4)
    assert q.vocab == 8
    assert q.quantize([-0.9, 0.9]) == [0, 7]

    assert td.rank_auc([True, False, True, False], [0.9, 0.1, 0.4, 0.4]) == 0.875
    m = td.compute_metrics([True, False, True], [0.8, 0.3, 0.2])
    assert (m["tp"], m["tn"], m["fn"]) == (1, 1, 1)

    small = td.RunConfig.from_toml(TINY)
    with tempfile.TemporaryDirectory() as out:
        sizes = td.gen_cohort(small, out)
        assert sizes == (42, 6, 12), sizes
        td.train(small, out)
        assert td.sample(small, out, guided=False) == 1
        assert td.sample(small, out) == 3
        rows = td.eval(small, out)
        assert [r["mode"] for r in rows] == ["baseline-only", "unguided-full", "full"]
        for r in rows:
            assert 0.0 <= r["acc"] <= 1.0
            print(f"{r['mode']:<14} acc {r['acc']:.3f}")
    print("smoke test ok")


if __name__ == "__main__":
    main()
