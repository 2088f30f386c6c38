#!/usr/bin/env python3
"""End-to-end smoke test for the ctnas Python extension.

Builds the binding crate with cargo, stages the shared library as an
importable module, and exercises the tensor core, genotype handling, and the
config-driven search/retrain/eval pipeline. Exits non-zero on the first
failed check.

Run from the repository root (or anywhere):

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
STAGE_DIR = os.path.join(REPO_ROOT, "python", "_build")


def build_and_import():
    subprocess.run(
        ["cargo", "build", "-p", "ctnas-py"],
        cwd=REPO_ROOT,
        check=True,
    )
    lib = os.path.join(REPO_ROOT, "target", "debug", "libctnas.so")
    if not os.path.exists(lib):  # macOS fallback, unused on Linux CI
        lib = os.path.join(REPO_ROOT, "target", "debug", "libctnas.dylib")
    os.makedirs(STAGE_DIR, exist_ok=True)
    staged = os.path.join(STAGE_DIR, "ctnas.so")
    shutil.copyfile(lib, staged)
    sys.path.insert(0, STAGE_DIR)
    import ctnas

    return ctnas


PASSED = 0


def check(name, cond):
    global PASSED
    if not cond:
        print(f"FAIL {name}")
        sys.exit(1)
    PASSED += 1
    print(f"ok   {name}")


def tiny_config(out_dir, data_dir, seed):
    """A deliberately small experiment: 2-class synthetic data, one block,
    two search epochs. Finishes in well under a second."""
    return {
        "data": {
            "source": {
                "synth": {
                    "classes": 2,
                    "channels": 4,
                    "points": 160,
                    "sample_rate_hz": 160.0,
                    "trials_per_class": 12,
                    "snr_db": 30.0,
                    "subjects": 2,
                    "seed": 5,
                }
            },
            "split": {"Mixed": {"ratio": 0.8}},
            "window": 64,
            "stride": 32,
        },
        "space_id": "desk8",
        "arch": {"blocks": 1, "nodes": 1},
        "search": {"epochs": 2, "batch_size": 8},
        "retrain": {"epochs": 2, "batch_size": 8},
        "seed": seed,
        "out_dir": out_dir,
    }


def main():
    ctnas = build_and_import()
    check("module import", hasattr(ctnas, "__version__"))

    # --- tensor core -------------------------------------------------------
    x = ctnas.Tensor([3], [-1.0, 0.5, 2.0], requires_grad=True)
    y = x.relu().sum()
    check("relu+sum forward", abs(y.item() - 2.5) < 1e-12)
    y.backward()
    check("relu gradient", x.grad() == [0.0, 1.0, 1.0])
    x.zero_grad()
    check("zero_grad clears", x.grad() is None)

    logits = ctnas.Tensor([2, 2], [0.0, 0.0, 3.0, -1.0])
    probs = logits.softmax(1).data()
    check("softmax rows sum to one", abs(probs[0] + probs[1] - 1.0) < 1e-12
          and abs(probs[2] + probs[3] - 1.0) < 1e-12)
    check("uniform logits give uniform probs", abs(probs[0] - 0.5) < 1e-12)

    ce = ctnas.cross_entropy(ctnas.Tensor([1, 2], [0.0, 0.0]), [0])
    check("cross-entropy of uniform logits is ln 2",
          abs(ce.item() - math.log(2.0)) < 1e-12)

    a = ctnas.Tensor([2], [1.0, 2.0], requires_grad=True)
    b = ctnas.Tensor([2], [3.0, 4.0])
    s = a.mul(b).sum()
    s.backward()
    check("product-rule gradient", a.grad() == [3.0, 4.0])

    try:
        ctnas.Tensor([2, 2], [1.0])
        check("shape mismatch rejected", False)
    except ValueError:
        check("shape mismatch rejected", True)

    # --- search space and config ------------------------------------------
    ops = ctnas.space_operators("desk8")
    check("desk space has 8 operators", len(ops) == 8)
    check("desk space contains skip and none",
          "skip" in ops and "none" in ops)
    try:
        ctnas.space_operators("nope")
        check("unknown space rejected", False)
    except ValueError:
        check("unknown space rejected", True)

    defaults = json.loads(ctnas.default_config())
    check("default config exposes search section",
          defaults["search"]["epochs"] == 30
          and defaults["space_id"] == "desk8")

    # --- synthetic data ----------------------------------------------------
    with tempfile.TemporaryDirectory() as tmp:
        synth_dir = ctnas.synth_dataset(
            os.path.join(tmp, "synth"),
            json.dumps({"classes": 2, "channels": 3, "points": 100,
                        "trials_per_class": 4, "seed": 1}),
        )
        check("synth dataset written",
              os.path.exists(os.path.join(synth_dir, "meta.json")))

        # --- pipeline: search → retrain → eval -----------------------------
        run_a = os.path.join(tmp, "run_a")
        report = json.loads(ctnas.run_search(json.dumps(
            tiny_config(run_a, tmp, seed=13))))
        check("search writes genotype",
              os.path.exists(report["genotype_path"]))
        check("search reports positive parameter count",
              report["param_count"] > 0)
        check("search reports operator counts",
              sum(report["op_counts"].values()) == 4)

        with open(report["genotype_path"]) as f:
            genotype = ctnas.Genotype.from_json(f.read())
        genotype.validate()
        check("genotype round-trips through JSON",
              ctnas.Genotype.from_json(genotype.to_json()).to_json()
              == genotype.to_json())
        check("genotype geometry matches config",
              genotype.blocks == 1 and genotype.nodes == 1
              and genotype.channels == 4 and genotype.classes == 2)
        check("python-side param count matches report",
              genotype.param_count(4, 64) == report["param_count"])
        check("mac count positive", genotype.mac_count(4, 64) > 0)

        retrain = json.loads(ctnas.run_retrain(
            json.dumps(tiny_config(run_a, tmp, seed=13)),
            report["genotype_path"]))
        check("retrain writes checkpoint",
              os.path.exists(retrain["checkpoint_path"]))

        evald = json.loads(ctnas.run_eval(
            json.dumps(tiny_config(run_a, tmp, seed=13)),
            report["genotype_path"], retrain["checkpoint_path"]))
        acc = evald["metrics"]["accuracy"]
        check("eval accuracy in range", 0.0 <= acc <= 1.0)
        check("eval confusion is 2x2",
              len(evald["metrics"]["confusion"]) == 2)

        # --- determinism ----------------------------------------------------
        run_b = os.path.join(tmp, "run_b")
        report_b = json.loads(ctnas.run_search(json.dumps(
            tiny_config(run_b, tmp, seed=13))))
        with open(report["genotype_path"]) as f:
            g_a = f.read()
        with open(report_b["genotype_path"]) as f:
            g_b = f.read()
        check("same seed gives identical genotype bytes", g_a == g_b)

        try:
            ctnas.run_search(json.dumps(
                {**tiny_config(os.path.join(tmp, "bad"), tmp, seed=1),
                 "space_id": "bogus"}))
            check("bad config raises ValueError", False)
        except ValueError:
            check("bad config raises ValueError", True)

    print(f"\nsmoke test passed ({PASSED} checks)")


if __name__ == "__main__":
    main()
