"""Two-stream multiple-instance detection head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    AffineParams,
    affine_forward,
    clamp_prob,
    softmax_backward,
    softmax_over_classes,
    softmax_over_proposals,
)
from .oic import RefineLabels, gen_refine_labels


@dataclass
class MidnParams:
    cls: AffineParams  # C x H
    det: AffineParams  # C x H


@dataclass
class MidnScores:
    x_cls: np.ndarray
    x_det: np.ndarray
    sigma_cls: np.ndarray
    sigma_det: np.ndarray
    x_midn: np.ndarray
    x_img: np.ndarray


def midn_forward(p: MidnParams, hidden: np.ndarray) -> MidnScores:
    """Score proposals from their (already adapted) hidden features ``(H, N)``."""
    x_cls = affine_forward(p.cls, hidden)
    x_det = affine_forward(p.det, hidden)
    s_cls = softmax_over_classes(x_cls)
    s_det = softmax_over_proposals(x_det)
    x_midn = s_cls * s_det
    return MidnScores(x_cls, x_det, s_cls, s_det, x_midn, x_midn.sum(axis=1))


def midn_backward(scores: MidnScores, d_x_midn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a gradient on ``x_midn`` back to the two branch logits."""
    d_cls = softmax_backward(scores.sigma_cls, d_x_midn * scores.sigma_det, axis=0)
    d_det = softmax_backward(scores.sigma_det, d_x_midn * scores.sigma_cls, axis=1)
    return d_cls, d_det


def midn_loss(x_img: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on image scores; returns ``(loss, d loss / d x_img)``.

    ``x_img`` is clamped into ``[1e-12, 1 - 1e-12]``; the gradient is zero for
    coordinates pinned by the clamp.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x_img, dtype=np.float64)
    xc = clamp_prob(x)
    loss = -float(np.sum(y * np.log(xc) + (1.0 - y) * np.log(1.0 - xc)))
    grad = (xc - y) / (xc * (1.0 - xc))
    grad = np.where(xc == x, grad, 0.0)
    return loss, grad


def midn_seed_labels(x_midn: np.ndarray, y: np.ndarray, proposals: np.ndarray,
                     neighbor_thresh: float = 0.5, overlaps: np.ndarray | None = None) -> RefineLabels:
    """Pseudo labels for the first refinement classifier, scored by MIDN."""
    if not np.any(np.asarray(y)):
        raise ValueError("image-level label has no positive class")
    return gen_refine_labels(x_midn, y, proposals, neighbor_thresh, overlaps=overlaps)
