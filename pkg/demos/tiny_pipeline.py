"""Whole pipeline on a toy corpus through the command-line entry point.

Generates 60/20/20 clips in a scratch directory, trains CAFNet for a few
epochs, evaluates it and localises one half-truth test clip. Takes a few
minutes on one core; the numbers are not meant to be good.

Run: python demos/tiny_pipeline.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from halftruth.cli import main
from halftruth.corpus import CLIP_SECONDS, Label, read_manifest

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="halftruth-"))
root.mkdir(parents=True, exist_ok=True)
(root / "run.cfg").write_text(
    "n_train = 60\nn_val = 20\nn_test = 20\nbatch_size = 16\nmax_epochs = 3\n"
    "checkpoint = out/model.cafw\nlog = out/train_log.jsonl\n"
    "report = out/report.json\nscores = out/scores.csv\n"
)
cfg = str(root / "run.cfg")

for step in ("gen", "extract", "train", "eval"):
    print(f"\n== {step}")
    code = main(["--config", cfg, step])
    if code:
        sys.exit(code)

report = json.loads((root / "out" / "report.json").read_text())
print(f"\naccuracy {report['accuracy']:.3f}, macro AUC {report['macro_auc']:.3f}")

# first half-truth clip of the test split
manifest = read_manifest(root / "corpus" / "test.csv")
path, lab = next((p, c) for p, c in manifest.entries if c.cls == Label.HALF_TRUTH)
start, end = (b * CLIP_SECONDS for b in lab.boundaries)
print(f"\n== localize {path} (true splice {start:.2f}-{end:.2f} s)")
main(["--config", cfg, "localize", str(root / "corpus" / path),
      "--plot-data", str(root / "out" / "plot.csv"), "--true-start", str(start), "--true-end", str(end)])
print(f"\nartefacts in {root}")
