"""Multi-seed pseudo labels and losses for the R-CNN head.

Seeds are mined per present class from the teacher/OIC ensemble: keep the
top ``ceil(mu_n * N)`` proposals, drop those below ``mu_s`` times the class
maximum, suppress duplicates with NMS. Each seed's confidence grows with the
number of original score sources (last OIC head, teacher) that also flag a
proposal close to it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import encode_deltas, iou_matrix, nms
from .numcore import AffineParams, ShapeError
from .oic import assign_to_seeds, one_hot, weighted_ce


@dataclass
class RcnnParams:
    cls: AffineParams  # (C+1) x H
    reg: AffineParams  # 4C x H


@dataclass
class Seed:
    index: int
    cls: int
    score: float
    p: float = 0.0
    w: float | None = None  # set by seed_confidence

    @property
    def weight(self) -> float:
        return self.score if self.w is None else self.w


@dataclass
class RcnnLabels:
    labels: np.ndarray  # (N,) class row, C = background, -1 = ignored
    y: np.ndarray  # (C+1, N) one-hot, all-zero column when ignored
    w: np.ndarray  # (N,) 0 for ignored proposals
    targets: np.ndarray  # (N, 4) regression targets, zero unless positive
    owner: np.ndarray  # (N,) position in the seed list of the nearest seed

    @property
    def positive(self) -> np.ndarray:
        return (self.labels >= 0) & (self.labels < self.y.shape[0] - 1)


def ensemble_scores(x_wet: np.ndarray, x_oic_last: np.ndarray) -> np.ndarray:
    if np.shape(x_wet) != np.shape(x_oic_last):
        raise ShapeError(f"score shapes differ: {np.shape(x_wet)} vs {np.shape(x_oic_last)}")
    return (np.asarray(x_wet) + np.asarray(x_oic_last)) / 2.0


def search_count(num_proposals: int, mu_n: float) -> int:
    """Number of top proposals inspected per class, ``ceil(mu_n * |R|)``, at least one."""
    # round first so that e.g. 0.05 * 100 does not become 5.000000000000001
    return max(1, math.ceil(round(mu_n * num_proposals, 9)))


def candidate_filter(row: np.ndarray, mu_s: float, mu_n: float) -> np.ndarray:
    """Indices that survive the top-count and soft score thresholds, best first."""
    row = np.asarray(row, dtype=np.float64)
    order = np.lexsort((np.arange(len(row)), -row))[: search_count(len(row), mu_n)]
    floor = mu_s * row.max()
    return order[row[order] >= floor]


def mine_seeds(x_msr: np.ndarray, proposals: np.ndarray, y_img: np.ndarray, mu_s: float = 0.7,
               mu_n: float = 0.05, nms_thresh: float = 0.3,
               overlaps: np.ndarray | None = None) -> list[Seed]:
    if not (0.0 < mu_s <= 1.0 and 0.0 < mu_n <= 1.0):
        raise ValueError("mu_s and mu_n must lie in (0, 1]")
    seeds: list[Seed] = []
    for c in np.flatnonzero(y_img):
        row = x_msr[c]
        cand = candidate_filter(row, mu_s, mu_n)
        if cand.size == 0:
            cand = np.array([int(np.argmax(row))])
        sub_ov = overlaps[np.ix_(cand, cand)] if overlaps is not None else None
        kept = nms(proposals[cand], row[cand], nms_thresh, overlaps=sub_ov)
        seeds.extend(Seed(int(cand[k]), int(c), float(row[cand[k]])) for k in kept)
    return seeds


def seed_confidence(seeds: list[Seed], sources: list[np.ndarray], proposals: np.ndarray,
                    gamma: float = 0.4, mu_s: float = 0.7, mu_n: float = 0.05,
                    match_thresh: float = 0.5, overlaps: np.ndarray | None = None) -> list[Seed]:
    """Fill in agreement ``p`` and confidence ``w = score * (1 + p**gamma)``.

    A source votes for a seed when one of its own filtered candidates for the
    seed's class overlaps the seed by at least ``match_thresh``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    out = []
    cache: dict[tuple[int, int], np.ndarray] = {}
    for seed in seeds:
        votes = 0
        for k, src in enumerate(sources):
            key = (k, seed.cls)
            if key not in cache:
                cache[key] = candidate_filter(src[seed.cls], mu_s, mu_n)
            cand = cache[key]
            if overlaps is not None:
                ov = overlaps[seed.index, cand]
            else:
                ov = iou_matrix(proposals[seed.index], proposals[cand])[0]
            votes += bool(np.any(ov >= match_thresh))
        p = votes / len(sources)
        out.append(Seed(seed.index, seed.cls, seed.score, p, seed.score * (1.0 + p ** gamma)))
    return out


def top_scoring_seeds(scores: np.ndarray, y_img: np.ndarray) -> list[Seed]:
    """One seed per present class: the highest-scoring proposal (basic pipeline)."""
    return [Seed(int(np.argmax(scores[c])), int(c), float(scores[c].max())) for c in np.flatnonzero(y_img)]


def regression_targets(proposal, seed) -> np.ndarray:
    return encode_deltas(np.asarray(proposal, dtype=np.float64), np.asarray(seed, dtype=np.float64))


def gen_rcnn_labels(seeds: list[Seed], proposals: np.ndarray, num_classes: int,
                    overlaps: np.ndarray | None = None, pos_thresh: float = 0.5,
                    ignore_thresh: float = 0.1) -> RcnnLabels:
    """Positive above ``pos_thresh`` to the nearest seed, ignored below ``ignore_thresh``, else background."""
    if not seeds:
        raise ValueError("need at least one seed")
    idx = np.array([s.index for s in seeds])
    seed_w = np.array([s.weight for s in seeds])
    seed_cls = np.array([s.cls for s in seeds])
    seed_ov = overlaps[idx] if overlaps is not None else iou_matrix(proposals[idx], proposals)
    owner, best_ov = assign_to_seeds(idx, seed_w, seed_ov)
    labels = np.where(best_ov > pos_thresh, seed_cls[owner], num_classes)
    labels = np.where(best_ov < ignore_thresh, -1, labels)
    w = np.where(labels >= 0, seed_w[owner], 0.0)
    targets = np.zeros((len(proposals), 4))
    pos = (labels >= 0) & (labels < num_classes)
    if np.any(pos):
        targets[pos] = regression_targets(proposals[pos], proposals[idx[owner[pos]]])
    return RcnnLabels(labels, one_hot(labels, num_classes + 1), w, targets, owner)


def rcnn_cls_loss(probs: np.ndarray, labels: RcnnLabels) -> tuple[float, np.ndarray]:
    return weighted_ce(probs, labels.y, labels.w)


def smooth_l1(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise value and derivative."""
    a = np.abs(d)
    small = a < 1.0
    return np.where(small, 0.5 * d * d, a - 0.5), np.where(small, d, np.sign(d))


def rcnn_reg_loss(t: np.ndarray, labels: RcnnLabels) -> tuple[float, np.ndarray]:
    """Weighted smooth-L1 over the positives' class-specific deltas, averaged over ``|R|``."""
    n = t.shape[1]
    num_classes = labels.y.shape[0] - 1
    if t.shape[0] != 4 * num_classes:
        raise ShapeError(f"regression output has {t.shape[0]} rows, expected {4 * num_classes}")
    grad = np.zeros_like(t, dtype=np.float64)
    pos = np.flatnonzero(labels.positive)
    if pos.size == 0:
        return 0.0, grad
    rows = 4 * labels.labels[pos][:, None] + np.arange(4)[None, :]  # (P, 4)
    d = t[rows, pos[:, None]] - labels.targets[pos]
    val, dval = smooth_l1(d)
    w = labels.w[pos][:, None]
    loss = float(np.sum(w * val)) / n
    grad[rows, pos[:, None]] = w * dval / n
    return loss, grad


def rcnn_loss(cls_part: float, reg_part: float) -> float:
    return cls_part + reg_part
