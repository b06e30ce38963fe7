"""Cascaded online instance classifiers and top-scoring pseudo labels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix
from .numcore import AffineParams, affine_forward, clamp_prob, softmax_over_classes


@dataclass
class OicParams:
    heads: list[AffineParams]  # each (C+1) x H, background is the last row

    @property
    def num_heads(self) -> int:
        return len(self.heads)


@dataclass
class RefineLabels:
    """Hard pseudo labels for one refinement classifier.

    ``labels[i]`` is the class row of proposal ``i`` (``C`` = background),
    ``y`` the matching one-hot ``(C+1, N)`` matrix, ``w`` the per-proposal
    loss weight and ``seeds`` maps class -> seed proposal index.
    """

    labels: np.ndarray
    y: np.ndarray
    w: np.ndarray
    seeds: dict[int, int] = field(default_factory=dict)


def oic_forward(params: OicParams, k: int, hidden: np.ndarray) -> np.ndarray:
    """Per-proposal class posterior ``(C+1, N)`` of head ``k`` (0-based)."""
    if not 0 <= k < params.num_heads:
        raise ValueError(f"head index {k} outside [0, {params.num_heads})")
    return softmax_over_classes(affine_forward(params.heads[k], hidden))


def one_hot(labels: np.ndarray, num_rows: int) -> np.ndarray:
    y = np.zeros((num_rows, len(labels)))
    valid = labels >= 0
    y[labels[valid], np.flatnonzero(valid)] = 1.0
    return y


def assign_to_seeds(seed_idx: np.ndarray, seed_score: np.ndarray, overlaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest seed for every proposal.

    ``overlaps`` is seeds x proposals. The seed with the largest IoU wins;
    ties go to the higher seed score, then to the earlier seed. Returns the
    winning seed position and its IoU per proposal.
    """
    n_seeds, n = overlaps.shape
    order = np.lexsort((np.arange(n_seeds), -np.asarray(seed_score)))
    best = np.full(n, order[0])
    best_ov = overlaps[order[0]].copy()
    for s in order[1:]:
        better = overlaps[s] > best_ov
        best[better] = s
        best_ov[better] = overlaps[s][better]
    return best, best_ov


def gen_refine_labels(scores: np.ndarray, y_img: np.ndarray, proposals: np.ndarray,
                      neighbor_thresh: float = 0.5, overlaps: np.ndarray | None = None) -> RefineLabels:
    """Top-scoring pseudo labels.

    For every present class the highest-scoring proposal in that class row is
    the seed. Each proposal follows its nearest seed: it takes the seed's
    class if their IoU exceeds ``neighbor_thresh`` and background otherwise,
    and in both cases carries the seed's score as its weight.
    ``scores`` needs at least ``C`` rows; a trailing background row is ignored.
    """
    y_img = np.asarray(y_img)
    present = np.flatnonzero(y_img)
    if present.size == 0:
        raise ValueError("no class is present in the image-level label")
    num_classes = len(y_img)
    seeds = {int(c): int(np.argmax(scores[c])) for c in present}
    seed_idx = np.array([seeds[int(c)] for c in present])
    seed_score = np.array([scores[c, seeds[int(c)]] for c in present])
    if overlaps is None:
        seed_ov = iou_matrix(proposals[seed_idx], proposals)
    else:
        seed_ov = overlaps[seed_idx]
    nearest, nearest_ov = assign_to_seeds(seed_idx, seed_score, seed_ov)
    labels = np.where(nearest_ov > neighbor_thresh, present[nearest], num_classes)
    w = seed_score[nearest].astype(np.float64)
    return RefineLabels(labels, one_hot(labels, num_classes + 1), w, seeds)


def weighted_ce(probs: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    """``-(1/N) sum_i w_i sum_c y_ci log p_ci`` and its gradient wrt ``probs``."""
    n = probs.shape[1]
    p = clamp_prob(probs)
    loss = -float(np.sum(w[None, :] * y * np.log(p))) / n
    grad = -(w[None, :] * y) / (p * n)
    grad = np.where(p == probs, grad, 0.0)
    return loss, grad


def oic_loss(probs: np.ndarray, labels: RefineLabels) -> tuple[float, np.ndarray]:
    return weighted_ce(probs, labels.y, labels.w)
