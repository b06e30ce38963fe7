"""Class-specific ranking distillation from teacher to MIDN scores.

For each present class the teacher's top proposal anchors a set of
neighbouring proposals. Student and teacher scores on that set are turned
into two softmax "rank distributions" and the student is pulled towards the
teacher by a confidence-weighted KL divergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix
from .numcore import log_softmax

SCHEDULES = ("linear_growth", "static", "linear_decline")


@dataclass
class CrdConfig:
    tau0: float = 0.5
    tau1: float = 1.0
    iter_max: int = 80_000
    temperature: float = 1.0
    schedule: str = "linear_growth"
    static_tau: float = 0.75

    def validate(self) -> None:
        if not 0.0 <= self.tau0 <= self.tau1 <= 1.0:
            raise ValueError("need 0 <= tau0 <= tau1 <= 1")
        if self.iter_max < 1:
            raise ValueError("iter_max must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown tau schedule {self.schedule!r}")


@dataclass
class PositiveSet:
    cls: int
    anchor: int
    members: np.ndarray  # sorted proposal indices, anchor included
    weight: float  # teacher's score on the anchor

    @property
    def size(self) -> int:
        return len(self.members)


def tau_schedule(iter_cur: float, cfg: CrdConfig) -> float:
    progress = min(max(iter_cur, 0) / cfg.iter_max, 1.0)
    if cfg.schedule == "static":
        return cfg.static_tau
    if cfg.schedule == "linear_decline":
        tau = cfg.tau1 - (cfg.tau1 - cfg.tau0) * progress
    else:
        tau = cfg.tau0 + (cfg.tau1 - cfg.tau0) * progress
    return min(max(tau, cfg.tau0), cfg.tau1)


def build_positive_set(x_wet: np.ndarray, proposals: np.ndarray, c: int, tau: float,
                       overlaps: np.ndarray | None = None) -> PositiveSet:
    """Anchor on the teacher's best class-``c`` proposal and gather its neighbours (IoU > tau)."""
    row = x_wet[c]
    anchor = int(np.argmax(row))
    ov = iou_matrix(proposals[anchor], proposals)[0] if overlaps is None else overlaps[anchor]
    mask = ov > tau
    mask[anchor] = True
    return PositiveSet(int(c), anchor, np.flatnonzero(mask), float(row[anchor]))


def rank_distributions(x_midn: np.ndarray, x_wet: np.ndarray, ps: PositiveSet,
                       temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Student and teacher softmax over the set members' class scores."""
    s = np.exp(log_softmax(x_midn[ps.cls, ps.members] / temperature))
    t = np.exp(log_softmax(x_wet[ps.cls, ps.members] / temperature))
    return s, t


def crd_loss(sets: list[PositiveSet], x_midn: np.ndarray, x_wet: np.ndarray,
             temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Weighted KL(teacher || student) summed over classes; gradient wrt ``x_midn`` only.

    Each class contributes ``weight / |P_c| * KL(t'_c || s'_c)``; the teacher
    scores are constants.
    """
    grad = np.zeros_like(x_midn, dtype=np.float64)
    loss = 0.0
    for ps in sets:
        log_s = log_softmax(x_midn[ps.cls, ps.members] / temperature)
        log_t = log_softmax(x_wet[ps.cls, ps.members] / temperature)
        t = np.exp(log_t)
        scale = ps.weight / ps.size
        loss += scale * float(np.sum(t * (log_t - log_s)))
        grad[ps.cls, ps.members] += scale * (np.exp(log_s) - t) / temperature
    return loss, grad
