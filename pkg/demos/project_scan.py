"""Render a synthetic street scene and look at its range images.

    python demos/project_scan.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from rangeseg.projection import ProjectionConfig, compute_stats, normalize, project_scan, write_rimg
from rangeseg.synth import format_scene_spec, generate_scan, random_scene
from rangeseg.train import write_pgm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

spec = random_scene(seed=7, beams=64, azimuth_steps=1024, objects=40)
(out / "scene.txt").write_text(format_scene_spec(spec))
scan = generate_scan(spec)
print(f"{len(scan)} points, classes {np.bincount(scan.labels).tolist()}")

# the image is narrower than the scan's azimuth sampling, so pairs of points compete per pixel
cfg = ProjectionConfig(H=64, W=512)
images = project_scan(scan, cfg)
print(f"valid pixels {int(images.valid_mask.sum())} of {cfg.H * cfg.W}, "
      f"occluded points {int((~images.kept).sum())}")

depth = np.where(images.valid_mask, images.depth, 0)
write_pgm(np.clip(depth / 2, 0, 255).astype(np.int64), out / "depth.pgm")
write_pgm(images.label_image, out / "labels.pgm")

stats = compute_stats([images])
for name, c in stats.channels.items():
    print(f"  {name:<10} mean {c.mean:8.3f}  std {c.std:7.3f}")
(out / "scan.rimg").write_bytes(write_rimg(normalize(images, stats)))
print(f"wrote {out}/depth.pgm, labels.pgm, scan.rimg and scene.txt")
