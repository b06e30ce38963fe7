"""Student network: a shared rectified adapter feeding the MIDN, the K
refinement heads and the R-CNN head, with a hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .midn import MidnParams, MidnScores, midn_backward, midn_forward
from .msr import RcnnParams
from .numcore import AffineParams, affine_backward, affine_forward, init_affine, relu, softmax_backward, softmax_over_classes
from .oic import OicParams


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 5
    num_oic: int = 3
    init_seed: int = 0


@dataclass
class Student:
    adapter: AffineParams
    midn: MidnParams
    oic: OicParams
    rcnn: RcnnParams

    def layers(self) -> dict[str, AffineParams]:
        out = {"adapter": self.adapter, "midn_cls": self.midn.cls, "midn_det": self.midn.det}
        for k, head in enumerate(self.oic.heads):
            out[f"oic{k + 1}"] = head
        out["rcnn_cls"] = self.rcnn.cls
        out["rcnn_reg"] = self.rcnn.reg
        return out

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> array view; the arrays are the live parameters."""
        out = {}
        for name, layer in self.layers().items():
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def copy(self) -> "Student":
        return Student(
            self.adapter.copy(),
            MidnParams(self.midn.cls.copy(), self.midn.det.copy()),
            OicParams([h.copy() for h in self.oic.heads]),
            RcnnParams(self.rcnn.cls.copy(), self.rcnn.reg.copy()),
        )

    @property
    def num_classes(self) -> int:
        return self.midn.cls.weight.shape[0]


def init_student(cfg: ModelConfig) -> Student:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.init_seed), 0x6D6F64]))
    c, h = cfg.num_classes, cfg.hidden_dim
    adapter = init_affine(rng, h, cfg.feature_dim, scale=np.sqrt(2.0 / cfg.feature_dim))
    adapter.bias[:] = 0.01
    return Student(
        adapter=adapter,
        midn=MidnParams(init_affine(rng, c, h, 0.01), init_affine(rng, c, h, 0.01)),
        oic=OicParams([init_affine(rng, c + 1, h, 0.01) for _ in range(cfg.num_oic)]),
        rcnn=RcnnParams(init_affine(rng, c + 1, h, 0.01), init_affine(rng, 4 * c, h, 0.001)),
    )


@dataclass
class Forward:
    hidden_pre: np.ndarray
    hidden: np.ndarray
    midn: MidnScores
    oic_probs: list[np.ndarray]
    cls_probs: np.ndarray
    reg: np.ndarray


def student_forward(student: Student, features: np.ndarray) -> Forward:
    hidden_pre = affine_forward(student.adapter, features)
    hidden = relu(hidden_pre)
    midn = midn_forward(student.midn, hidden)
    oic_probs = [softmax_over_classes(affine_forward(h, hidden)) for h in student.oic.heads]
    cls_probs = softmax_over_classes(affine_forward(student.rcnn.cls, hidden))
    reg = affine_forward(student.rcnn.reg, hidden)
    return Forward(hidden_pre, hidden, midn, oic_probs, cls_probs, reg)


@dataclass
class OutputGrads:
    """Loss gradients with respect to the student's outputs (``None`` = no signal)."""

    x_midn: np.ndarray | None = None
    oic_probs: list[np.ndarray | None] = field(default_factory=list)
    cls_probs: np.ndarray | None = None
    reg: np.ndarray | None = None


def student_backward(student: Student, features: np.ndarray, fwd: Forward,
                     grads: OutputGrads) -> dict[str, np.ndarray]:
    """Parameter gradients, keyed like :meth:`Student.named`."""
    out: dict[str, np.ndarray] = {}
    d_hidden = np.zeros_like(fwd.hidden)

    def through(name: str, layer: AffineParams, d_out: np.ndarray | None) -> None:
        nonlocal d_hidden
        if d_out is None:
            out[f"{name}.weight"] = np.zeros_like(layer.weight)
            out[f"{name}.bias"] = np.zeros_like(layer.bias)
            return
        gw, gb, gx = affine_backward(layer, fwd.hidden, d_out)
        out[f"{name}.weight"], out[f"{name}.bias"] = gw, gb
        d_hidden = d_hidden + gx

    if grads.x_midn is not None:
        d_cls, d_det = midn_backward(fwd.midn, grads.x_midn)
    else:
        d_cls = d_det = None
    through("midn_cls", student.midn.cls, d_cls)
    through("midn_det", student.midn.det, d_det)
    oic_grads = list(grads.oic_probs) + [None] * (len(student.oic.heads) - len(grads.oic_probs))
    for k, (head, probs, g) in enumerate(zip(student.oic.heads, fwd.oic_probs, oic_grads)):
        through(f"oic{k + 1}", head, None if g is None else softmax_backward(probs, g, axis=0))
    d_cls_logits = None if grads.cls_probs is None else softmax_backward(fwd.cls_probs, grads.cls_probs, axis=0)
    through("rcnn_cls", student.rcnn.cls, d_cls_logits)
    through("rcnn_reg", student.rcnn.reg, grads.reg)

    d_pre = d_hidden * (fwd.hidden_pre > 0)
    gw, gb, _ = affine_backward(student.adapter, features, d_pre)
    out["adapter.weight"], out["adapter.bias"] = gw, gb
    names = student.named()
    return {name: out[name] for name in names}
