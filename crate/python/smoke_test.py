"""Smoke test for the saber Python extension.

Build and install the module first:

    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import sys
import tempfile
from pathlib import Path

import saber


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)


def main():
    check(saber.basis_response(30.0, 30.0) == 1.0, "basis peak")
    expected = math.cos(math.radians(30.0)) ** 7
    check(abs(saber.basis_response(90.0, 30.0) - expected) < 1e-12, "basis at 60 deg")
    check(abs(saber.crf_slope([3.0, 2.0, 1.0, 0.0]) - 1.0) < 1e-12, "slope of a unit ramp")
    check(saber.lateralization_index(0.0, 0.0) is None, "undefined index")
    check(abs(saber.lateralization_index(3.0, 1.0) - 0.5) < 1e-12, "index value")

    r = saber.perm_ttest_paired([1.0, 2.0, 3.0, 4.0], [0.5, 1.0, 2.5, 3.0], n_iter=200, seed=1)
    check(0.0 < r["p_null"] <= 1.0, "p value range")

    plan = saber.generate_trial_plan(7)
    check(len(plan["entries"]) == 2448, "default plan size")
    try:
        saber.generate_trial_plan(1, {"bins": [0], "trials_per_block": 4})
        check(False, "unsatisfiable plan accepted")
    except ValueError:
        pass

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        small = {"blocks_per_condition": 1, "trials_per_block": 36}
        plan = saber.simulate(str(data), seed=7, rate_hz=500.0, plan=small)
        check(len(plan["entries"]) == 144, "simulated plan size")
        check((data / "events.csv").is_file(), "dataset written")
        check(saber.cli(["validate", str(data)]) == 0, "validate exit code")

        config = {
            "inputs": [str(data)],
            "output": str(Path(tmp) / "out"),
            "iem": {"n_trialset_iterations": 2, "n_perm_labelsets": 4, "n_perm_repeats": 5},
            "stats": {"n_iter": 100},
            "lateralization_null_perms": 20,
        }
        report = saber.run_pipeline(config, seed=7)
        check(report["n_subjects"] == 1, "report subjects")
        check(report["subjects"][0]["name"] == "sub-01", "subject name")
        check((Path(tmp) / "out" / "report.json").is_file(), "report written")
        try:
            saber.run_pipeline(config, seed=7)
            check(False, "existing output overwritten without force")
        except ValueError:
            pass

    print(f"saber {saber.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
