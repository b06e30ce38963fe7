"""
A look at the synthetic scenes
==============================

Each scene is a unit canvas holding one to three objects. Proposals come in
three kinds: jittered copies of an object, strict sub-rectangles ("parts")
and background boxes. Parts carry a stronger class signal than the whole
object, which is what makes the top-scoring proposal drift onto parts.
"""

import numpy as np

from cbl.synthscene import SOURCE_BACKGROUND, SOURCE_JITTER, SOURCE_PART, GenConfig, class_prototypes, gen_corpus

cfg = GenConfig(num_classes=5, num_scenes=200, seed=1)
scenes = gen_corpus(cfg)
print(f"{len(scenes)} scenes, {cfg.num_proposals} proposals each, feature dim {cfg.feature_dim}")

# object counts and image labels
counts = np.array([len(s.gt_boxes) for s in scenes])
print("objects per scene:", np.bincount(counts)[1:], " mean", counts.mean().round(2))
print("class frequency  :", np.sum([s.y_img for s in scenes], axis=0))

# how well each proposal kind localises its object
best = np.concatenate([s.gt_overlaps.max(axis=1) for s in scenes])
source = np.concatenate([s.source for s in scenes])
for name, code in (("jitter", SOURCE_JITTER), ("part", SOURCE_PART), ("background", SOURCE_BACKGROUND)):
    ov = best[source == code]
    print(f"{name:10s} share {np.mean(source == code):.2f}  mean best IoU {ov.mean():.2f}  IoU>=0.5 {np.mean(ov >= 0.5):.2f}")

# a proposal's features mix its class prototype in proportion to its IoU
# with the object; parts add a separate class-specific signature on top
protos, signatures = class_prototypes(cfg)
s = scenes[0]
cls = int(s.gt_classes[0])
mask = s.gt_overlaps[:, 0] > 0
kind = s.source[mask]
on_proto = protos[:, cls] @ s.features[:, mask]
on_sig = signatures[:, cls] @ s.features[:, mask]
print(f"\nscene {s.id}, class {cls}: mean projection onto the class prototype / part signature")
for name, code in (("jitter", SOURCE_JITTER), ("part", SOURCE_PART)):
    sel = kind == code
    print(f"  {name:6s} {on_proto[sel].mean():.3f} / {on_sig[sel].mean():.3f}")
