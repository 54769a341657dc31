"""Regression against the frozen reference artifacts in tests/goldens/.

The reference was produced by running the committed scene/config pair once
(see the README for the regeneration command).  Tensor values are compared
at 1e-5 rather than byte-for-byte so a different BLAS build does not fail
the suite; the routing plan and message log are exact."""

import json
import os

import numpy as np

from lsrm import config_from_json, load_json_file, read_goldens, run_scene

HERE = os.path.dirname(os.path.abspath(__file__))
GOLDEN_DIR = os.path.join(HERE, "goldens")
REFERENCE = os.path.join(GOLDEN_DIR, "reference")


def _regenerate(out_dir):
    cfg = config_from_json(
        load_json_file(os.path.join(GOLDEN_DIR, "config.json")))
    scene = load_json_file(os.path.join(GOLDEN_DIR, "scene.json"))
    return run_scene(cfg, scene, str(out_dir))


class TestFrozenReference:
    def test_reference_files_exist(self):
        for name in ("goldens.bin", "plan.bin", "messages.csv",
                     "summary.json"):
            assert os.path.exists(os.path.join(REFERENCE, name)), name

    def test_fresh_run_matches_reference(self, tmp_path):
        out = tmp_path / "fresh"
        _regenerate(out)

        ref = read_goldens(os.path.join(REFERENCE, "goldens.bin"))
        new = read_goldens(str(out / "goldens.bin"))
        assert len(ref) == len(new) == 11
        for idx, (a, b) in enumerate(zip(ref, new)):
            assert a.shape == b.shape, idx
            diff = np.max(np.abs(a.astype(np.float64)
                                 - b.astype(np.float64)))
            assert diff <= 1e-5, (idx, diff)

        for name in ("plan.bin", "messages.csv"):
            with open(os.path.join(REFERENCE, name), "rb") as fh:
                want = fh.read()
            assert (out / name).read_bytes() == want, name

        with open(os.path.join(REFERENCE, "summary.json")) as fh:
            ref_sum = json.load(fh)
        new_sum = json.loads((out / "summary.json").read_text())
        ref_probe = ref_sum.pop("probe_checksum")
        new_probe = new_sum.pop("probe_checksum")
        assert ref_sum == new_sum
        for key in ("z", "s"):
            assert abs(ref_probe[key] - new_probe[key]) \
                <= 1e-4 * max(1.0, abs(ref_probe[key]))
