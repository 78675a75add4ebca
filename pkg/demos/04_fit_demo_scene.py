"""Synthesize the demo scene and fit Gaussians to it by gradient descent.

Run from the repository root with ``python3 demos/04_fit_demo_scene.py [iterations]``.
The full 500-iteration fit in ``configs/demo_fit.cfg`` takes a few minutes.
"""

import sys
from dataclasses import replace
from pathlib import Path

from gsocc import pipeline

root = Path(__file__).resolve().parent.parent
scene_dir = root / "out" / "demo_scene"
scene = pipeline.cmd_synth(root / "configs" / "demo_scene.cfg", scene_dir)
print("classes:", scene.spec.classes.names, "grid:", scene.gt.grid.counts)

cfg, _ = pipeline.fit_config_from_file(root / "configs" / "demo_fit.cfg")
if len(sys.argv) > 1:
    cfg = replace(cfg, iterations=int(sys.argv[1]), eval_every=max(1, int(sys.argv[1]) // 5))

result = pipeline.fit(scene, cfg)
for it, ce, lov, total, iou, miou in result.trace:
    if iou == iou:  # evaluated rows only
        print(f"iter {it:4d}  loss {total:.4f}  IoU {iou:.3f}  mIoU {miou:.3f}")
print("final IoU %.3f  mIoU %.3f" % (result.metrics.iou, result.metrics.miou))
