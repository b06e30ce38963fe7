"""
One scene through the labelling cycle
=====================================

Trains a short run, then follows a single training scene through every
pseudo-labelling step: MIDN scores, refinement labels, the teacher's
positive set for ranking distillation, and the mined, confidence-weighted
seeds that supervise the R-CNN head.
"""

import numpy as np

from cbl.config import load_config
from cbl.crd import build_positive_set, crd_loss, rank_distributions, tau_schedule
from cbl.model import student_forward
from cbl.msr import ensemble_scores, gen_rcnn_labels, mine_seeds, seed_confidence
from cbl.oic import gen_refine_labels
from cbl.synthscene import SOURCE_PART, gen_corpus, split
from cbl.trainer import train
from cbl.wet import wet_forward

np.set_printoptions(precision=3, suppress=True)

cfg = load_config(presets=["desk", "cbl"], overrides=["train.iterations=1500", "crd.iter_max=1500", "gen.num_scenes=200"])
train_split, _ = split(gen_corpus(cfg.gen))
state = train(cfg.train, train_split, cfg.ema, cfg.crd)
print(f"trained {state.iteration} iterations on {len(train_split)} scenes")

scene = next(s for s in train_split if len(s.present_classes) == 1)
c = int(scene.present_classes[0])
gt_iou = scene.gt_overlaps.max(axis=1)
fwd = student_forward(state.student, scene.features)
x_wet = wet_forward(state.teacher, scene.features)
print(f"\nscene {scene.id}: class {c}, {len(scene.gt_boxes)} object(s)")

# MIDN: which proposal does the two-stream head like best?
top = int(np.argmax(fwd.midn.x_midn[c]))
kind = "part" if scene.source[top] == SOURCE_PART else "whole/other"
print(f"MIDN top proposal {top} ({kind}), IoU with gt {gt_iou[top]:.2f}")

# refinement: head 1 learns from MIDN's top-scoring proposal and its neighbours
lab = gen_refine_labels(fwd.midn.x_midn, scene.y_img, scene.proposals, cfg.train.neighbor_thresh)
pos = np.flatnonzero(lab.labels == c)
print(f"refinement labels: {len(pos)} proposals labelled {c}, weight {lab.w[pos[0]]:.3f}")

# ranking distillation: the teacher's positive set and both rank distributions
# (by the end of the run tau has climbed to 1 and the set is just the anchor,
# so look at the mid-run threshold instead)
tau = tau_schedule(state.iteration // 2, cfg.crd)
ps = build_positive_set(x_wet, scene.proposals, c, tau, scene.overlaps)
s_rank, t_rank = rank_distributions(fwd.midn.x_midn, x_wet, ps, cfg.crd.temperature)
print(f"\npositive set at tau={tau:.2f}: anchor {ps.anchor} (gt IoU {gt_iou[ps.anchor]:.2f}), {ps.size} members")
print("  member gt IoU :", gt_iou[ps.members])
print("  student ranks :", s_rank)
print("  teacher ranks :", t_rank)
print("  L_crd         :", round(crd_loss([ps], fwd.midn.x_midn, x_wet, cfg.crd.temperature)[0], 5))

# multi-seed mining on the ensemble of teacher and last refinement head
last = fwd.oic_probs[-1]
t = cfg.train
seeds = mine_seeds(ensemble_scores(x_wet, last), scene.proposals, scene.y_img, t.mu_s, t.mu_n, t.msr_nms_thresh)
seeds = seed_confidence(seeds, [last, x_wet], scene.proposals, t.gamma, t.mu_s, t.mu_n, t.match_thresh)
print("\nseeds (proposal, x_msr, p, w, gt IoU):")
for s in seeds:
    print(f"  {s.index:3d}  {s.score:.3f}  {s.p:.2f}  {s.weight:.3f}  {gt_iou[s.index]:.2f}")

rcnn = gen_rcnn_labels(seeds, scene.proposals, len(scene.y_img))
print(f"R-CNN labels: {np.sum(rcnn.labels == c)} positive, "
      f"{np.sum(rcnn.labels == len(scene.y_img))} background, {np.sum(rcnn.labels < 0)} ignored")
