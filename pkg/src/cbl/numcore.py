"""Dense float64 building blocks with hand-written gradients.

Score matrices are laid out classes x proposals, so "over classes" means
normalising each column and "over proposals" means normalising each row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

PROB_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


@dataclass
class AffineParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def copy(self) -> "AffineParams":
        return AffineParams(self.weight.copy(), self.bias.copy())


def as_mat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix has non-finite entries")
    return x


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_over_classes(x: np.ndarray) -> np.ndarray:
    """Normalise each column (one proposal) across the class rows."""
    return _softmax(np.asarray(x, dtype=np.float64), axis=0)


def softmax_over_proposals(x: np.ndarray) -> np.ndarray:
    """Normalise each row (one class) across the proposal columns."""
    return _softmax(np.asarray(x, dtype=np.float64), axis=1)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, axis: int) -> np.ndarray:
    """Gradient wrt logits of a softmax taken along ``axis``."""
    inner = (upstream * probs).sum(axis=axis, keepdims=True)
    return probs * (upstream - inner)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def affine_forward(p: AffineParams, x: np.ndarray) -> np.ndarray:
    """``weight @ x + bias`` with the bias broadcast over columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or p.weight.shape[1] != x.shape[0] or p.bias.shape != (p.weight.shape[0],):
        raise ShapeError(f"affine {p.weight.shape} / bias {p.bias.shape} cannot take input {x.shape}")
    return p.weight @ x + p.bias[:, None]


def affine_backward(p: AffineParams, x: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_weight, grad_bias, grad_x)`` for ``affine_forward(p, x)``."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (p.weight.shape[0], x.shape[1]) or x.shape[0] != p.weight.shape[1]:
        raise ShapeError(f"upstream {upstream.shape} inconsistent with weight {p.weight.shape} and input {x.shape}")
    return upstream @ x.T, upstream.sum(axis=1), p.weight.T @ upstream


def init_affine(rng: np.random.Generator, out_dim: int, in_dim: int, scale: float | None = None) -> AffineParams:
    if scale is None:
        scale = 1.0 / np.sqrt(in_dim)
    return AffineParams(rng.normal(0.0, scale, size=(out_dim, in_dim)), np.zeros(out_dim))


def fd_gradcheck(
    loss_fn: Callable[[dict], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``params`` maps names to arrays; every coordinate is perturbed in place and
    restored. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. The floor sits above the round-off
    of a central difference (about ``1e-16 * |loss| / eps``), so coordinates
    whose true gradient is zero do not report noise as error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for name, arr in params.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn(params)
            flat[j] = orig - eps
            down = loss_fn(params)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{j}]")
            num = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[j]), abs(num), floor)
            worst = max(worst, abs(gflat[j] - num) / denom)
    return worst
