"""Training loop: schedules, total loss, SGD, teacher updates, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .crd import CrdConfig, PositiveSet, build_positive_set, crd_loss, tau_schedule
from .midn import midn_loss
from .model import Forward, ModelConfig, OutputGrads, Student, init_student, student_backward, student_forward
from .msr import (
    RcnnLabels,
    ensemble_scores,
    gen_rcnn_labels,
    mine_seeds,
    rcnn_cls_loss,
    rcnn_loss,
    rcnn_reg_loss,
    seed_confidence,
    top_scoring_seeds,
)
from .numcore import AffineParams
from .oic import RefineLabels, gen_refine_labels, oic_loss
from .synthscene import Scene
from .wet import EmaConfig, WetState, wet_forward, wet_init, wet_update

log = logging.getLogger(__name__)

ALL_TERMS = frozenset({"midn", "crd", "oic", "cls", "reg"})


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``diagnostics`` names the offending scene."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    iterations: int = 70_000
    lr: float = 1e-3
    lr_after_drop: float = 1e-4
    lr_drop_fraction: float = 50 / 70
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    hidden_dim: int = 32
    num_oic: int = 3
    gamma: float = 0.4
    mu_s: float = 0.7
    mu_n: float = 0.05
    msr_nms_thresh: float = 0.3
    match_thresh: float = 0.5
    neighbor_thresh: float = 0.5
    msr_start_fraction: float = 0.4
    use_wet: bool = True
    use_crd: bool = True
    use_msr: bool = True
    crd_teacher: str = "wet"
    grad_clip: float | None = None
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def validate(self) -> None:
        for name in ("iterations", "batch_size", "hidden_dim", "num_oic", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("msr_start_fraction", "lr_drop_fraction", "mu_s", "mu_n"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.crd_teacher not in ("wet", "oic_last"):
            raise ValueError(f"crd_teacher must be 'wet' or 'oic_last', got {self.crd_teacher!r}")
        if self.crd_teacher == "wet" and self.use_crd and not self.use_wet:
            raise ValueError("CRD with the WET teacher needs use_wet")
        if self.use_msr and not self.use_wet:
            raise ValueError("MSR needs use_wet")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def lr_at(self, it: int) -> float:
        return self.lr if it < round(self.lr_drop_fraction * self.iterations) else self.lr_after_drop

    def msr_start(self) -> int:
        return int(round(self.msr_start_fraction * self.iterations))


@dataclass
class LossReport:
    iteration: int
    lr: float
    lam: float
    tau: float
    msr_active: bool
    midn: float
    crd: float
    oic: list[float]
    cls: float
    reg: float
    rcnn: float
    total: float

    def row(self) -> list[str]:
        vals = [self.lr, self.lam, self.tau]
        vals2 = [self.midn, self.crd, *self.oic, self.cls, self.reg, self.rcnn, self.total]
        return [str(self.iteration), *map(repr, vals), str(int(self.msr_active)), *map(repr, vals2)]


def history_header(num_oic: int) -> list[str]:
    return (["iteration", "lr", "lambda", "tau", "msr_active", "L_midn", "L_crd"]
            + [f"L_oic{k + 1}" for k in range(num_oic)] + ["L_cls", "L_reg", "L_rcnn", "L_total"])


def lambda_schedule(iter_cur: float, horizon: int) -> float:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return max(0.0, 1.0 - iter_cur / horizon)


def total_loss(midn: float, crd: float, oic_sum: float, rcnn: float, lam: float) -> float:
    return lam * midn + (1.0 - lam) * crd + oic_sum + rcnn


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, velocity: dict[str, np.ndarray]):
    """``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.

    Parameters and velocity are updated in place and also returned.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += grads[name] + weight_decay * p
        p -= lr * v
    return params, velocity


@dataclass
class SceneTargets:
    oic: list[RefineLabels]
    crd_sets: list[PositiveSet]
    crd_teacher: np.ndarray | None
    rcnn: RcnnLabels
    seeds: list = field(default_factory=list)
    crd_temperature: float = 1.0


def build_targets(scene: Scene, fwd: Forward, x_wet: np.ndarray | None, cfg: TrainConfig,
                  tau: float, msr_active: bool, crd_temperature: float = 1.0) -> SceneTargets:
    """All pseudo labels for one scene; every score source is treated as a constant."""
    y, props, ov = scene.y_img, scene.proposals, scene.overlaps
    c = len(y)
    oic_labels = [gen_refine_labels(fwd.midn.x_midn, y, props, cfg.neighbor_thresh, ov)]
    for probs in fwd.oic_probs[:-1]:
        oic_labels.append(gen_refine_labels(probs, y, props, cfg.neighbor_thresh, ov))

    crd_sets: list[PositiveSet] = []
    teacher = None
    if cfg.use_crd:
        teacher = x_wet if cfg.crd_teacher == "wet" else fwd.oic_probs[-1]
        crd_sets = [build_positive_set(teacher, props, int(k), tau, ov) for k in scene.present_classes]

    last = fwd.oic_probs[-1]
    if msr_active:
        seeds = mine_seeds(ensemble_scores(x_wet, last), props, y, cfg.mu_s, cfg.mu_n, cfg.msr_nms_thresh, ov)
        seeds = seed_confidence(seeds, [last, x_wet], props, cfg.gamma, cfg.mu_s, cfg.mu_n, cfg.match_thresh, ov)
    else:
        seeds = top_scoring_seeds(last, y)
    rcnn = gen_rcnn_labels(seeds, props, c, ov)
    return SceneTargets(oic_labels, crd_sets, teacher, rcnn, seeds, crd_temperature)


def scene_objective(student: Student, features: np.ndarray, y_img: np.ndarray, targets: SceneTargets,
                    lam: float, terms: Iterable[str] = ALL_TERMS, backward: bool = True,
                    fwd: Forward | None = None):
    """Loss parts for one scene and, optionally, the parameter gradients of
    ``total_loss`` restricted to ``terms``."""
    terms = frozenset(terms)
    if fwd is None:
        fwd = student_forward(student, features)
    l_midn, g_img = midn_loss(fwd.midn.x_img, y_img)
    d_midn = np.zeros_like(fwd.midn.x_midn)
    if "midn" in terms:
        d_midn += lam * g_img[:, None]
    l_crd = 0.0
    if targets.crd_sets:
        l_crd, g_crd = crd_loss(targets.crd_sets, fwd.midn.x_midn, targets.crd_teacher, targets.crd_temperature)
        if "crd" in terms:
            d_midn += (1.0 - lam) * g_crd
    l_oic, g_oic = [], []
    for probs, lab in zip(fwd.oic_probs, targets.oic):
        value, g = oic_loss(probs, lab)
        l_oic.append(value)
        g_oic.append(g if "oic" in terms else None)
    l_cls, g_cls = rcnn_cls_loss(fwd.cls_probs, targets.rcnn)
    l_reg, g_reg = rcnn_reg_loss(fwd.reg, targets.rcnn)
    l_rcnn = rcnn_loss(l_cls, l_reg)
    parts = {"midn": l_midn, "crd": l_crd, "oic": l_oic, "cls": l_cls, "reg": l_reg, "rcnn": l_rcnn,
             "total": total_loss(l_midn, l_crd, sum(l_oic), l_rcnn, lam)}
    if not backward:
        return parts, None, fwd
    grads = OutputGrads(
        x_midn=d_midn if ({"midn", "crd"} & terms) else None,
        oic_probs=g_oic,
        cls_probs=g_cls if "cls" in terms else None,
        reg=g_reg if "reg" in terms else None,
    )
    return parts, student_backward(student, features, fwd, grads), fwd


@dataclass
class TrainState:
    student: Student
    teacher: WetState | None
    velocity: dict[str, np.ndarray]
    iteration: int = 0
    history: list[LossReport] = field(default_factory=list)


def model_config(cfg: TrainConfig, num_classes: int, feature_dim: int) -> ModelConfig:
    return ModelConfig(feature_dim=feature_dim, hidden_dim=cfg.hidden_dim, num_classes=num_classes,
                       num_oic=cfg.num_oic, init_seed=cfg.seed)


def init_state(cfg: TrainConfig, ema: EmaConfig, num_classes: int, feature_dim: int) -> TrainState:
    student = init_student(model_config(cfg, num_classes, feature_dim))
    teacher = None
    if cfg.use_wet:
        teacher = wet_init(student.adapter, student.oic.heads, student.rcnn.cls, ema)
    return TrainState(student, teacher, {name: np.zeros_like(p) for name, p in student.named().items()})


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def train(cfg: TrainConfig, scenes: list[Scene], ema: EmaConfig | None = None, crd: CrdConfig | None = None,
          state: TrainState | None = None, callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.iterations`` optimisation steps on ``scenes`` (the training split).

    ``callback`` is invoked after every iteration with the live state; it is
    how checkpoints and progress logging hook in.
    """
    ema = ema or EmaConfig()
    crd = crd or CrdConfig()
    cfg.validate()
    ema.validate()
    crd.validate()
    if not scenes:
        raise ValueError("empty training set")
    num_classes = len(scenes[0].y_img)
    if state is None:
        state = init_state(cfg, ema, num_classes, scenes[0].features.shape[0])
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x747261696E]))
    # fast-forward the sampler so resumed runs draw the same batches
    for _ in range(state.iteration):
        rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False)
    params = state.student.named()
    msr_start = cfg.msr_start()

    while state.iteration < cfg.iterations:
        it = state.iteration
        lam = lambda_schedule(it, cfg.iterations) if cfg.use_crd else 1.0
        tau = tau_schedule(it, crd)
        msr_active = cfg.use_msr and it >= msr_start
        batch = rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False)
        acc = {name: np.zeros_like(p) for name, p in params.items()}
        sums = {"midn": 0.0, "crd": 0.0, "oic": np.zeros(cfg.num_oic), "cls": 0.0, "reg": 0.0, "rcnn": 0.0,
                "total": 0.0}
        for b in batch:
            scene = scenes[int(b)]
            fwd = student_forward(state.student, scene.features)
            x_wet = wet_forward(state.teacher, scene.features) if state.teacher is not None else None
            targets = build_targets(scene, fwd, x_wet, cfg, tau, msr_active, crd.temperature)
            parts, grads, _ = scene_objective(state.student, scene.features, scene.y_img, targets, lam, fwd=fwd)
            if not np.isfinite(parts["total"]):
                raise TrainingAborted(f"non-finite loss at iteration {it}",
                                      {"iteration": it, "scene": scene.id, "parts": repr(parts)})
            for name, g in grads.items():
                acc[name] += g
            for key in sums:
                sums[key] = sums[key] + (np.asarray(parts[key]) if key == "oic" else parts[key])
        n = len(batch)
        for g in acc.values():
            g /= n
        if cfg.grad_clip is not None:
            _clip(acc, cfg.grad_clip)
        lr = cfg.lr_at(it)
        try:
            sgd_step(params, acc, lr, cfg.momentum, cfg.weight_decay, state.velocity)
        except FloatingPointError as exc:
            raise TrainingAborted(str(exc), {"iteration": it, "scenes": [int(scenes[int(b)].id) for b in batch]})
        if state.teacher is not None:
            s = state.student
            state.teacher = wet_update(state.teacher, s.adapter, s.oic.heads, s.rcnn.cls, ema)
        state.iteration = it + 1
        if it % cfg.log_every == 0 or state.iteration == cfg.iterations:
            state.history.append(LossReport(
                it, lr, lam, tau, msr_active, sums["midn"] / n, sums["crd"] / n,
                [float(v) / n for v in sums["oic"]], sums["cls"] / n, sums["reg"] / n, sums["rcnn"] / n,
                sums["total"] / n))
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------------------
# Checkpoint container
#
#   8 bytes   magic b"CBLCKPT\0"
#   uint32    format version (little endian)
#   uint32    header length in bytes
#   header    UTF-8 JSON: {"iteration", "config", "tensors": [{"name", "shape"}, ...]}
#   payload   every tensor in header order as little-endian float64, row major
# ---------------------------------------------------------------------------

MAGIC = b"CBLCKPT\0"
VERSION = 1


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"student/{k}": v for k, v in state.student.named().items()}
    if state.teacher is not None:
        out.update({f"teacher/{k}": v for k, v in state.teacher.named().items()})
    out.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    return out


def save_checkpoint(path, state: TrainState, config: dict | None = None) -> None:
    tensors = _state_tensors(state)
    header = {
        "iteration": state.iteration,
        "config": config or {},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return header, tensors


def load_checkpoint(path, cfg: TrainConfig, ema: EmaConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``cfg`` must describe the same architecture."""
    header, tensors = read_checkpoint(path)
    ema = ema or EmaConfig()
    w = tensors["student/midn_cls.weight"]
    num_classes = w.shape[0]
    feature_dim = tensors["student/adapter.weight"].shape[1]
    state = init_state(cfg, ema, num_classes, feature_dim)
    for name, arr in state.student.named().items():
        arr[...] = tensors[f"student/{name}"]
    if state.teacher is not None:
        if "teacher/head.weight" not in tensors:
            raise ValueError("checkpoint has no teacher but the config enables it")
        state.teacher = WetState(
            AffineParams(tensors["teacher/adapter.weight"].copy(), tensors["teacher/adapter.bias"].copy()),
            AffineParams(tensors["teacher/head.weight"].copy(), tensors["teacher/head.bias"].copy()),
        )
    state.velocity = {name[len("velocity/"):]: arr.copy() for name, arr in tensors.items()
                      if name.startswith("velocity/")}
    state.iteration = int(header["iteration"])
    return state


def write_history(path, history: list[LossReport], num_oic: int) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(history_header(num_oic))
        for rep in history:
            writer.writerow(rep.row())


def config_dict(**parts) -> dict:
    return {k: asdict(v) if hasattr(v, "__dataclass_fields__") else v for k, v in parts.items()}
