"""Smoke test for the hydroreg Python extension.

Uses an installed ``hydroreg`` module if there is one, otherwise the library
built by ``cargo build -p hydroreg-py --release``.
"""

import importlib.machinery
import importlib.util
import math
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

TWIN = """
seed = 4
methods = ["ur"]
[domain]
nrows = 6
ncols = 6
n_desc = 2
n_steps = 160
n_donor = 2
n_ungauged = 1
min_gauge_area = 2
storm_rate = 0.1
[optimizer]
max_iter = 10
sbs_max_iter = 10
"""


def load_module():
    try:
        import hydroreg

        return hydroreg
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libhydroreg.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("hydroreg", str(lib))
            spec = importlib.util.spec_from_file_location("hydroreg", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["hydroreg"] = module
            return module
    sys.exit("hydroreg extension not found; run `cargo build -p hydroreg-py --release`")


def expect_raises(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc.__name__}")


def main():
    hr = load_module()
    assert "annr" in hr.METHODS and len(hr.METHODS) == 6
    assert hr.PARAM_NAMES == ["cp", "cft", "kexc", "lr"]

    assert hr.likelihood(2.0, 1.0, 1.0) == math.exp(-2.0)
    z = hr.sigmoid_scale(0.3, 10.0, 20.0)
    assert 10.0 < z < 20.0
    assert abs(hr.inverse_sigmoid(z, 10.0, 20.0) - 0.3) < 1e-12
    expect_raises(ValueError, hr.inverse_sigmoid, 20.0, 10.0, 20.0)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg_path = hr.synth(str(tmp / "data"), TWIN)
        exp = hr.Experiment(str(cfg_path))
        assert exp.shape == (6, 6) and exp.n_steps == 160
        assert len(exp.gauge_ids) == 3
        assert exp.descriptor_names == ["d1", "d2"]

        q = exp.simulate()
        assert set(q) == set(exp.gauge_ids)
        assert all(len(s) == 160 and min(s) >= 0.0 for s in q.values())

        err = exp.gradcheck(probes=8, reject_unconverged=True)
        assert err < 1e-5, err

        truth = exp.nse(str(tmp / "data" / "truth" / "control.json"))
        assert all(v == 1.0 for v in truth.values()), truth

        res = exp.calibrate("ur", control_out=str(tmp / "ur.json"))
        assert res["method"] == "ur" and len(res["nse"]) == 2
        assert res["j"] <= res["j_trajectory"][0]
        assert (tmp / "ur.json").exists()

        failures = exp.protocol(str(tmp / "bundle"))
        assert failures == []
        rows = hr.report(str(tmp / "bundle"))
        assert {r["phase"] for r in rows} == {"cal", "temporal_val", "spatial_val", "spatiotemporal_val"}

        expect_raises(ValueError, exp.calibrate, "kriging")
        expect_raises(OSError, hr.Experiment, str(tmp / "missing.toml"))

    print("hydroreg python smoke test: ok")


if __name__ == "__main__":
    main()
