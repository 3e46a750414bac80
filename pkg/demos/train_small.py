"""Train the desk-size network on a handful of synthetic scans and score it.

This goes through the same files and commands the CLI uses, so each step has a
shell equivalent (printed as it runs). Takes a few minutes on one core.

    python demos/train_small.py [work_dir] [epochs]
"""

import sys
from pathlib import Path

from rangeseg.cli import main
from rangeseg.synth import format_scene_spec, random_scene

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
epochs = sys.argv[2] if len(sys.argv) > 2 else "20"
work.mkdir(exist_ok=True)
(work / "train.txt").write_text(format_scene_spec(random_scene(100, beams=64, azimuth_steps=256)))
(work / "val.txt").write_text(format_scene_spec(random_scene(500, beams=64, azimuth_steps=256)))
(work / "run.cfg").write_text(f"""\
train_scans = train
train_labels = train
val_scans = val
val_labels = val
stats = stats.txt
frequencies = frequencies.txt
out_dir = out
epochs = {epochs}
val_every = 5
""")


def run(*args):
    print("$ rangeseg", " ".join(args))
    code = main(list(args))
    if code:
        sys.exit(code)


run("synth", str(work / "train.txt"), "4", str(work / "train"))
run("synth", str(work / "val.txt"), "1", str(work / "val"))
cfg = str(work / "run.cfg")
run("stats", "--config", cfg)
run("train", "--config", cfg, "-v")
run("eval", str(work / "out" / "best.fpsc"), "--config", cfg)
