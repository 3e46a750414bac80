"""How much the depth-aware KNN vote recovers for points hidden behind a pixel's winner.

A perfect pixel prediction (the label image itself) is back-projected to every
point. Points that lost their pixel to a nearer point inherit a label either by
copying their pixel or through the KNN vote.

    python demos/knn_recovery.py
"""

import numpy as np

from rangeseg.postprocess import KnnConfig, knn_backproject
from rangeseg.projection import ProjectionConfig, project_scan
from rangeseg.synth import generate_scan, random_scene

scan = generate_scan(random_scene(seed=3, beams=64, azimuth_steps=2048, objects=120))
images = project_scan(scan, ProjectionConfig(64, 512))
hidden = ~images.kept
truth = scan.labels
pred = images.label_image
print(f"{len(scan)} points, {int(hidden.sum())} hidden behind a nearer point")

copy = pred[images.point_v, images.point_u]
print(f"copy own pixel    hidden-point accuracy {np.mean(copy[hidden] == truth[hidden]):.4f}")
for S, K in [(3, 3), (5, 5), (7, 9)]:
    out = knn_backproject(pred, images, scan, KnnConfig(S=S, K=K))
    print(f"knn S={S} K={K}     hidden-point accuracy {np.mean(out[hidden] == truth[hidden]):.4f}")
