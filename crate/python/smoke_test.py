"""Smoke test for the pyvocalseg extension module.

Build first:  cargo build -p vocalseg-python --release --features extension-module
Then run:     python3 python/smoke_test.py [path/to/libpyvocalseg.so]
"""

import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    if len(sys.argv) > 1:
        return Path(sys.argv[1])
    if os.environ.get("VOCALSEG_PYLIB"):
        return Path(os.environ["VOCALSEG_PYLIB"])
    found = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libpyvocalseg.so", "libpyvocalseg.dylib", "pyvocalseg.dll")
    ]
    found = [p for p in found if p.exists()]
    if not found:
        sys.exit("libpyvocalseg not found; build it with cargo first")
    return max(found, key=lambda p: p.stat().st_mtime)


def load(tmp):
    lib = find_library()
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy(lib, tmp / ("pyvocalseg" + suffix))
    sys.path.insert(0, str(tmp))
    import pyvocalseg

    return pyvocalseg


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        vs = load(tmp)

        assert vs.lookback() == 10 and vs.lookback(0.5) == 4
        assert vs.frame_count(48000) == 11
        assert vs.frame_count(16000) == 1

        flags = [True, False, False, True] + [False] * 11 + [True]
        classes = [1, 0, 0, 1] + [0] * 11 + [0]
        assert vs.detect_segments(flags, classes) == [(1, 4, 1), (16, 16, 0)]
        assert vs.classify_segment([2, 1, 2, 1]) == 1
        try:
            vs.classify_segment([])
        except ValueError:
            pass
        else:
            raise AssertionError("empty span accepted")

        m = vs.binary_metrics(4300, 901, 463, 19479)
        assert abs(m["precision"] - 82.68) <= 0.01
        assert abs(m["recall"] - 90.28) <= 0.01
        assert abs(m["accuracy"] - 94.58) <= 0.01
        assert vs.binary_metrics(0, 0, 0, 5)["precision"] is None
        assert vs.auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
        assert vs.epoch_iterations(6, 302, 32) == 67

        n = vs.synthesize(str(tmp / "scape.wav"), str(tmp / "truth.json"), 60.0, 8, 3)
        truth = json.loads((tmp / "truth.json").read_text())
        assert n == len(truth["events"]) == 8
        samples, rate = vs.decode_wav(str(tmp / "scape.wav"))
        assert rate == 16000 and len(samples) == 60 * 16000

        config = tmp / "config.json"
        config.write_text(json.dumps({
            "synth": {"duration_s": 120, "n_events": 20, "min_gap_s": 3},
            "train": {"max_epochs": 10},
            "seed": 1,
        }))
        out = tmp / "run"
        assert vs.run_cli(["--config", str(config), "--output", str(out), "synth", "--cut-manifest"]) == 0
        assert vs.run_cli([
            "--config", str(config), "--output", str(out),
            "--manifest", str(out / "clips" / "manifest.csv"), "train",
        ]) == 0
        assert vs.run_cli(["no-such-command"]) == 1

        model = vs.Model.load(str(out / "model.ckpt"))
        assert model.classes == ["high", "low"]
        segments = model.process(str(out / "soundscape.wav"))
        assert segments, "no segments found"
        for s in segments:
            assert s["end_s"] > s["start_s"]
            assert s["class"] in model.classes
        try:
            model.process(str(tmp / "missing.wav"))
        except (IOError, RuntimeError):
            pass
        else:
            raise AssertionError("missing file accepted")

        print(f"pyvocalseg OK: {len(segments)} segments from {len(truth['events'])}-event check, "
              f"classes {model.classes}")


if __name__ == "__main__":
    main()
