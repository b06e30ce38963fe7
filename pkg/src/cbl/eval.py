"""Inference scoring, detection decoding and desk-scale metrics (AP, CorLoc, mAcc@1)."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import clip_boxes, decode_deltas, iou_matrix, nms
from .model import Student, student_forward
from .numcore import ShapeError
from .synthscene import Scene
from .wet import WetState, wet_forward, wet_head_forward

SCORE_SOURCES = ("auto", "basic", "average", "weighted", "wet", "wet_head")


@dataclass
class Detection:
    scene_id: int
    cls: int
    box: np.ndarray
    score: float


def inference_scores(oic: Sequence[np.ndarray], cls: np.ndarray, wet: np.ndarray) -> np.ndarray:
    """Two-step average: OIC heads with CLS first, then that mean with the teacher."""
    shape = np.shape(cls)
    if any(np.shape(x) != shape for x in (*oic, wet)):
        raise ShapeError("all score matrices must share one shape")
    basic = (np.sum(oic, axis=0) + cls) / (len(oic) + 1)
    return 0.5 * (basic + wet)


def scene_scores(student: Student, teacher: WetState | None, features: np.ndarray,
                 source: str = "auto") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(x_inf, regression output, x_midn)`` for one scene under a score source.

    ``basic`` averages the OIC heads and CLS; ``average`` adds the teacher as
    one more equal member; ``weighted`` is :func:`inference_scores`; ``wet``
    uses the teacher alone; ``wet_head`` runs student features through the
    teacher's head in place of the full teacher. ``auto`` picks ``weighted``
    when a teacher exists and ``basic`` otherwise.
    """
    if source not in SCORE_SOURCES:
        raise ValueError(f"unknown score source {source!r}")
    if source == "auto":
        source = "weighted" if teacher is not None else "basic"
    if source != "basic" and teacher is None:
        raise ValueError(f"score source {source!r} needs a teacher")
    fwd = student_forward(student, features)
    if source == "basic":
        x = (np.sum(fwd.oic_probs, axis=0) + fwd.cls_probs) / (len(fwd.oic_probs) + 1)
    elif source == "wet":
        x = wet_forward(teacher, features)
    elif source == "average":
        x = (np.sum(fwd.oic_probs, axis=0) + fwd.cls_probs + wet_forward(teacher, features)) / (len(fwd.oic_probs) + 2)
    else:
        x_wet = wet_head_forward(teacher, fwd.hidden) if source == "wet_head" else wet_forward(teacher, features)
        x = inference_scores(fwd.oic_probs, fwd.cls_probs, x_wet)
    return x, fwd.reg, fwd.midn.x_midn


def decode_class_boxes(reg: np.ndarray, proposals: np.ndarray, c: int) -> np.ndarray:
    return clip_boxes(decode_deltas(proposals, reg[4 * c:4 * c + 4].T))


def decode_and_detect(x_inf: np.ndarray, reg: np.ndarray, proposals: np.ndarray, scene_id: int = 0,
                      nms_thresh: float = 0.3, score_floor: float = 1e-3) -> list[Detection]:
    num_classes = reg.shape[0] // 4
    if x_inf.shape[1] != len(proposals) or x_inf.shape[0] < num_classes:
        raise ShapeError("scores, regression output and proposals disagree")
    dets: list[Detection] = []
    for c in range(num_classes):
        boxes = decode_class_boxes(reg, proposals, c)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]) & (x_inf[c] >= score_floor)
        idx = np.flatnonzero(valid)
        if idx.size == 0:
            continue
        for k in nms(boxes[idx], x_inf[c, idx], nms_thresh):
            i = idx[k]
            dets.append(Detection(scene_id, c, boxes[i].copy(), float(x_inf[c, i])))
    return dets


def top_detections(x_inf: np.ndarray, reg: np.ndarray, proposals: np.ndarray, y_img: np.ndarray,
                   scene_id: int = 0) -> list[Detection]:
    """Best decoded box per present class, before any suppression."""
    out = []
    for c in np.flatnonzero(y_img):
        i = int(np.argmax(x_inf[c]))
        box = decode_class_boxes(reg[:, i:i + 1], proposals[i:i + 1], c)[0]
        out.append(Detection(scene_id, int(c), box, float(x_inf[c, i])))
    return out


def macc_at_1(x_midn: Sequence[np.ndarray], scenes: Sequence[Scene], iou_thresh: float,
              num_classes: int | None = None) -> tuple[dict[int, float], float]:
    """Top-1 MIDN localisation accuracy per present class, and its class mean.

    A hit means the top-scoring proposal overlaps some ground-truth box of the
    same class by more than ``iou_thresh``.
    """
    if num_classes is None:
        num_classes = len(scenes[0].y_img)
    hits = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for scores, scene in zip(x_midn, scenes):
        for c in scene.present_classes:
            top = int(np.argmax(scores[c]))
            ov = scene.gt_overlaps[top, scene.gt_classes == c]
            counts[c] += 1
            hits[c] += bool(ov.max() > iou_thresh)
    per_class = {int(c): float(hits[c] / counts[c]) for c in range(num_classes) if counts[c] > 0}
    missing = [c for c in range(num_classes) if counts[c] == 0]
    if missing:
        warnings.warn(f"classes {missing} never appear; excluded from mAcc@1", stacklevel=2)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def corloc(top_dets: Sequence[Detection], scenes: Sequence[Scene]) -> float:
    """Percentage of (scene, present class) pairs whose top detection overlaps a same-class gt by > 0.5."""
    by_key = {(d.scene_id, d.cls): d for d in top_dets}
    total = hit = 0
    for scene in scenes:
        for c in scene.present_classes:
            total += 1
            d = by_key.get((scene.id, int(c)))
            if d is None:
                continue
            gt = scene.gt_boxes[scene.gt_classes == c]
            hit += bool(iou_matrix(d.box, gt).max() > 0.5)
    return 100.0 * hit / total if total else 0.0


def _all_point_ap(tp: np.ndarray, num_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[Detection], scenes: Sequence[Scene], num_classes: int,
                      iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP with greedy matching and all-point interpolation, plus mAP.

    Detections are matched in descending score order; each gt box can be
    claimed once and a match needs IoU above ``iou_thresh``.
    """
    gts = {s.id: s for s in scenes}
    aps: dict[int, float] = {}
    for c in range(num_classes):
        num_gt = sum(int(np.sum(s.gt_classes == c)) for s in scenes)
        if num_gt == 0:
            warnings.warn(f"class {c} has no ground truth; AP undefined and excluded", stacklevel=2)
            continue
        dets = [d for d in detections if d.cls == c and d.scene_id in gts]
        order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
        claimed: dict[int, np.ndarray] = {}
        tp = np.zeros(len(dets))
        for rank, k in enumerate(order):
            d = dets[k]
            scene = gts[d.scene_id]
            mask = scene.gt_classes == c
            if not np.any(mask):
                continue
            gt_idx = np.flatnonzero(mask)
            ov = iou_matrix(d.box, scene.gt_boxes[gt_idx])[0]
            used = claimed.setdefault(d.scene_id, np.zeros(len(scene.gt_boxes), dtype=bool))
            j = int(np.argmax(ov))
            if ov[j] > iou_thresh and not used[gt_idx[j]]:
                used[gt_idx[j]] = True
                tp[rank] = 1.0
        aps[c] = _all_point_ap(tp, num_gt)
    mean = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean


@dataclass
class EvalConfig:
    score_source: str = "auto"
    nms_thresh: float = 0.3
    score_floor: float = 1e-3


def evaluate(student: Student, teacher: WetState | None, train_scenes: Sequence[Scene],
             test_scenes: Sequence[Scene], cfg: EvalConfig | None = None) -> dict:
    """Full metric summary: test mAP, train CorLoc, train MIDN mAcc@1 at 0.75 / 0.85."""
    cfg = cfg or EvalConfig()
    num_classes = student.num_classes
    dets: list[Detection] = []
    for s in test_scenes:
        x_inf, reg, _ = scene_scores(student, teacher, s.features, cfg.score_source)
        dets.extend(decode_and_detect(x_inf, reg, s.proposals, s.id, cfg.nms_thresh, cfg.score_floor))
    aps, m_ap = average_precision(dets, test_scenes, num_classes) if test_scenes else ({}, 0.0)
    tops: list[Detection] = []
    midn: list[np.ndarray] = []
    for s in train_scenes:
        x_inf, reg, x_midn = scene_scores(student, teacher, s.features, cfg.score_source)
        tops.extend(top_detections(x_inf, reg, s.proposals, s.y_img, s.id))
        midn.append(x_midn)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        acc75, macc75 = macc_at_1(midn, train_scenes, 0.75, num_classes) if train_scenes else ({}, 0.0)
        acc85, macc85 = macc_at_1(midn, train_scenes, 0.85, num_classes) if train_scenes else ({}, 0.0)
    return {
        "score_source": cfg.score_source,
        "mAP": 100.0 * m_ap,
        "AP": {str(c): 100.0 * v for c, v in aps.items()},
        "CorLoc": corloc(tops, train_scenes) if train_scenes else 0.0,
        "mAcc@1@0.75": 100.0 * macc75,
        "mAcc@1@0.85": 100.0 * macc85,
        "Acc@1@0.75": {str(c): 100.0 * v for c, v in acc75.items()},
        "Acc@1@0.85": {str(c): 100.0 * v for c, v in acc85.items()},
    }
