"""Weighted ensemble teacher: a mirrored adapter + classification head
tracked from the student by moving averages.

Three rules update the teacher's classification head:

* ``single``   plain EMA from one student head (last OIC or the R-CNN CLS branch)
* ``average``  EMA towards the uniform mean of all K OIC heads and CLS (A-EMA)
* ``weighted`` EMA towards ``(mean(OIC heads) + CLS) / 2`` (W-EMA)

The teacher adapter always follows the student adapter by plain EMA.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np

from .numcore import AffineParams, ShapeError, affine_forward, relu, softmax_over_classes

T = TypeVar("T", np.ndarray, AffineParams)

MODES = ("single", "average", "weighted")
SINGLE_SOURCES = ("oic_last", "cls")


@dataclass
class EmaConfig:
    alpha: float = 0.999
    mode: str = "weighted"
    # only read in single mode
    source: str = "oic_last"

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown EMA mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "single" and self.source not in SINGLE_SOURCES:
            raise ValueError(f"unknown single-mode source {self.source!r}")

    def hyperparameters(self) -> dict[str, object]:
        """The knobs that actually influence the update in the current mode."""
        if self.mode == "single":
            return {"alpha": self.alpha, "source": self.source}
        return {"alpha": self.alpha}


@dataclass
class WetState:
    adapter: AffineParams
    head: AffineParams

    def named(self) -> dict[str, np.ndarray]:
        return {
            "adapter.weight": self.adapter.weight, "adapter.bias": self.adapter.bias,
            "head.weight": self.head.weight, "head.bias": self.head.bias,
        }

    def copy(self) -> "WetState":
        return WetState(self.adapter.copy(), self.head.copy())


def _combine(coeffs: Sequence[float], items: Sequence[T]) -> T:
    first = items[0]
    if isinstance(first, AffineParams):
        return AffineParams(
            _combine(coeffs, [it.weight for it in items]),
            _combine(coeffs, [it.bias for it in items]),
        )
    shape = np.shape(first)
    for it in items[1:]:
        if np.shape(it) != shape:
            raise ShapeError(f"cannot average parameters of shapes {shape} and {np.shape(it)}")
    out = np.zeros(shape)
    for a, it in zip(coeffs, items):
        out = out + a * np.asarray(it, dtype=np.float64)
    return out


def ema_update(teacher: T, student: T, alpha: float) -> T:
    return _combine([alpha, 1.0 - alpha], [teacher, student])


def aema_update(teacher: T, students: Sequence[T], alpha: float) -> T:
    if len(students) == 0:
        raise ValueError("A-EMA needs at least one student")
    share = (1.0 - alpha) / len(students)
    return _combine([alpha] + [share] * len(students), [teacher, *students])


def wema_coefficients(alpha: float, num_oic: int) -> tuple[float, float, float]:
    """(teacher, CLS branch, each OIC head) weights; they always sum to one."""
    if num_oic < 1:
        raise ValueError("W-EMA needs at least one OIC head")
    coeffs = (alpha, (1.0 - alpha) / 2.0, (1.0 - alpha) / (2.0 * num_oic))
    total = coeffs[0] + coeffs[1] + num_oic * coeffs[2]
    if abs(total - 1.0) > 1e-12:
        raise ArithmeticError(f"W-EMA coefficients sum to {total!r}")
    return coeffs


def wema_update(teacher: T, oic_heads: Sequence[T], cls: T, alpha: float) -> T:
    a_t, a_cls, a_oic = wema_coefficients(alpha, len(oic_heads))
    return _combine([a_t, a_cls] + [a_oic] * len(oic_heads), [teacher, cls, *oic_heads])


def _head_update(head: AffineParams, oic_heads: Sequence[AffineParams], cls: AffineParams,
                 cfg: EmaConfig, alpha: float) -> AffineParams:
    if cfg.mode == "weighted":
        return wema_update(head, oic_heads, cls, alpha)
    if cfg.mode == "average":
        return aema_update(head, [*oic_heads, cls], alpha)
    source = oic_heads[-1] if cfg.source == "oic_last" else cls
    return ema_update(head, source, alpha)


def wet_init(adapter: AffineParams, oic_heads: Sequence[AffineParams], cls: AffineParams,
             cfg: EmaConfig) -> WetState:
    """Teacher at iteration 0: the adapter copied, the head set to the mode's student target."""
    cfg.validate()
    return WetState(adapter.copy(), _head_update(cls, oic_heads, cls, cfg, 0.0))


def wet_update(state: WetState, adapter: AffineParams, oic_heads: Sequence[AffineParams],
               cls: AffineParams, cfg: EmaConfig) -> WetState:
    """One teacher step after the student's optimizer step."""
    return WetState(
        ema_update(state.adapter, adapter, cfg.alpha),
        _head_update(state.head, oic_heads, cls, cfg, cfg.alpha),
    )


def wet_head_forward(state: WetState, hidden: np.ndarray) -> np.ndarray:
    return softmax_over_classes(affine_forward(state.head, hidden))


def wet_forward(state: WetState, features: np.ndarray) -> np.ndarray:
    """Teacher class posterior ``(C+1, N)`` for raw proposal features."""
    return wet_head_forward(state, relu(affine_forward(state.adapter, features)))

