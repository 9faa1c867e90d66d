"""
Temporal anchors, refinement and label assignment
=================================================
"""

import numpy as np

from dvcap import tep
from dvcap.anchors import TemporalSegment, assign_labels, build_anchor_grid, decode, tiou

# four cells and three width ratios give twelve anchors
grid = build_anchor_grid(4, (1.0, 1.25, 1.5))
for a in grid[:3]:
    print(f"cell {a.cell} ratio {a.ratio}: centre {a.center:.3f} width {a.width:.3f}")

# the network predicts offsets; decoding moves and rescales the anchor
anchor = grid[0]
phi_c, phi_w, seg = decode(anchor, 1.0, 1.0)
print(f"refined: centre {phi_c:.4f} width {phi_w:.4f} -> [{seg.t_start:.4f}, {seg.t_end:.4f}]")

print("tIoU of [0,2] and [1,3]:", tiou(TemporalSegment(0, 2), TemporalSegment(1, 3)))

# positives need tIoU above 0.7 with some ground-truth event
proposals = [TemporalSegment(0.0, 0.1), TemporalSegment(0.0, 0.05), TemporalSegment(0.18, 0.3)]
truth = [TemporalSegment(0.0, 0.1), TemporalSegment(0.2, 0.3)]
labels = assign_labels(proposals, truth)
print("positive:", labels.positive, "matched:", labels.matched)

# the full full-scale network has 1533 anchors; the desk scale 186
print("proposals:", tep.TepConfig().num_proposals(), tep.TepConfig(t_f=128, d0=32, anchor_layers=5).num_proposals())

# a freshly initialised network, ranked by the fused score
cfg = tep.TepConfig(t_f=16, d0=3, base_filters=(4, 4), anchor_layers=2, anchor_filters=4)
params = tep.init_params(cfg, np.random.default_rng(0))
preds = tep.tep_forward(np.random.default_rng(1).normal(size=(16, 3)), cfg, params)
ranked = tep.fuse_and_select(preds, lambda0=0.2, top_k=3)
for p in ranked:
    print(f"[{p.segment.t_start:.3f}, {p.segment.t_end:.3f}] conf {p.confidence:.3f}")
