"""Synthetic weakly labelled scenes.

Each scene places a few class-labelled objects on the unit square and draws a
proposal set from three pools: jittered copies of the objects, "part" boxes
that cover a strict sub-rectangle of one object, and background boxes that
barely touch any object. Proposal features mix orthogonal class prototypes by
overlap, so a box that covers its object well carries the most class mass,
while part boxes additionally carry a class-specific part signature. That
signature is what lures a multiple-instance head onto object parts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou_matrix

SOURCE_JITTER, SOURCE_PART, SOURCE_BACKGROUND = 0, 1, 2


class ConfigError(ValueError):
    """Invalid generator or run configuration."""


@dataclass
class GenConfig:
    num_classes: int = 5
    min_objects: int = 1
    max_objects: int = 3
    num_proposals: int = 60
    jitter_scale: float = 0.08
    part_fraction: float = 0.25
    background_fraction: float = 0.4
    feature_dim: int = 16
    noise_sigma: float = 0.05
    part_bonus: float = 1.0
    part_min_area: float = 0.15
    part_max_area: float = 0.7
    min_object_size: float = 0.2
    max_object_size: float = 0.5
    num_scenes: int = 600
    seed: int = 0

    def validate(self) -> None:
        counts = dict(num_classes=self.num_classes, min_objects=self.min_objects,
                      max_objects=self.max_objects, num_proposals=self.num_proposals,
                      feature_dim=self.feature_dim, num_scenes=self.num_scenes)
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.max_objects < self.min_objects:
            raise ConfigError("max_objects must be >= min_objects")
        for name in ("part_fraction", "background_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.part_fraction + self.background_fraction > 1.0:
            raise ConfigError("part_fraction + background_fraction must be <= 1")
        if self.feature_dim < self.num_classes:
            raise ConfigError("feature_dim must be >= num_classes")
        if not 0.0 < self.min_object_size <= self.max_object_size < 1.0:
            raise ConfigError("object sizes must satisfy 0 < min <= max < 1 (unit canvas)")
        if not 0.0 < self.part_min_area <= self.part_max_area < 1.0:
            raise ConfigError("part areas must satisfy 0 < min <= max < 1 (strict sub-rectangles)")
        if self.jitter_scale < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter_scale and noise_sigma must be non-negative")
        if self.num_proposals < self.max_objects:
            raise ConfigError("num_proposals must cover at least one box per object")

    @property
    def jitter_fraction(self) -> float:
        return 1.0 - self.part_fraction - self.background_fraction


@dataclass
class Scene:
    id: int
    gt_boxes: np.ndarray  # (G, 4)
    gt_classes: np.ndarray  # (G,) 0-based
    y_img: np.ndarray  # (C,) in {0, 1}
    proposals: np.ndarray  # (N, 4)
    features: np.ndarray  # (D, N)
    source: np.ndarray | None = None  # (N,) SOURCE_* per proposal, None if loaded without it
    flags: list[str] = field(default_factory=list)
    _overlaps: np.ndarray | None = field(default=None, repr=False, compare=False)
    _gt_overlaps: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    @property
    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.y_img)

    @property
    def overlaps(self) -> np.ndarray:
        """Cached proposal x proposal IoU."""
        if self._overlaps is None:
            self._overlaps = iou_matrix(self.proposals, self.proposals)
        return self._overlaps

    @property
    def gt_overlaps(self) -> np.ndarray:
        """Cached proposal x gt IoU."""
        if self._gt_overlaps is None:
            self._gt_overlaps = iou_matrix(self.proposals, self.gt_boxes)
        return self._gt_overlaps


def scene_rng(seed: int, scene_index: int) -> np.random.Generator:
    """Independent stream per (seed, scene_index), so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_index)]))


def class_prototypes(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal class prototypes and part signatures, each ``(D, C)``.

    Part signatures use the directions left over after the prototypes; when
    the feature space has no room left they wrap onto the spare directions,
    or fall back to the class prototype itself.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x70726F74]))
    q, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, cfg.feature_dim)))
    protos = q[:, : cfg.num_classes]
    spare = cfg.feature_dim - cfg.num_classes
    if spare == 0:
        parts = protos.copy()
    else:
        cols = [cfg.num_classes + (c % spare) for c in range(cfg.num_classes)]
        parts = q[:, cols]
    return protos, parts


def _sample_objects(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes: list[np.ndarray] = []
    for _ in range(n_obj):
        for attempt in range(50):
            w, h = rng.uniform(cfg.min_object_size, cfg.max_object_size, size=2)
            x1 = rng.uniform(0.0, 1.0 - w)
            y1 = rng.uniform(0.0, 1.0 - h)
            box = np.array([x1, y1, x1 + w, y1 + h])
            if not boxes or iou_matrix(box, np.array(boxes)).max() < 0.2:
                break
        boxes.append(box)
    classes = rng.integers(0, cfg.num_classes, size=n_obj)
    return np.array(boxes), classes


def _jitter(box: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    noise = rng.normal(0.0, scale, size=4) * np.array([w, h, w, h])
    out = np.clip(box + noise, 0.0, 1.0)
    if out[2] - out[0] < 1e-3 or out[3] - out[1] < 1e-3:
        return box.copy()
    return out


def _part(box: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Strict sub-rectangle covering a fraction in ``[lo, hi]`` of the object's area."""
    w, h = box[2] - box[0], box[3] - box[1]
    frac = rng.uniform(lo, hi)
    aspect = rng.uniform(0.6, 1.6)
    fw = min(math.sqrt(frac * aspect), 0.95)
    fh = min(frac / fw, 0.95)
    pw, ph = fw * w, fh * h
    x1 = box[0] + rng.uniform(0.0, w - pw)
    y1 = box[1] + rng.uniform(0.0, h - ph)
    return np.array([x1, y1, x1 + pw, y1 + ph])


def gen_proposals(gt_boxes: np.ndarray, cfg: GenConfig, rng: np.random.Generator,
                  max_retries: int = 200) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Return ``(proposals, source, flags)``.

    The first proposal drawn for each object is re-jittered until it overlaps
    the object by at least 0.5 (falling back to an exact copy), so every
    object always has a usable proposal.
    """
    if len(gt_boxes) == 0:
        raise ConfigError("scene has no objects")
    n = cfg.num_proposals
    n_part = int(round(cfg.part_fraction * n))
    n_bg = int(round(cfg.background_fraction * n))
    n_jit = max(n - n_part - n_bg, len(gt_boxes))
    n_bg = n - n_jit - n_part
    if n_bg < 0:
        n_part += n_bg
        n_bg = 0
    flags: list[str] = []
    boxes: list[np.ndarray] = []
    source: list[int] = []
    g = len(gt_boxes)
    for k in range(n_jit):
        parent = gt_boxes[k % g]
        box = _jitter(parent, cfg.jitter_scale, rng)
        if k < g:
            for _ in range(20):
                if iou_matrix(box, parent)[0, 0] >= 0.5:
                    break
                box = _jitter(parent, cfg.jitter_scale, rng)
            else:
                box = parent.copy()
        boxes.append(box)
        source.append(SOURCE_JITTER)
    for _ in range(n_part):
        parent = gt_boxes[int(rng.integers(g))]
        boxes.append(_part(parent, cfg.part_min_area, cfg.part_max_area, rng))
        source.append(SOURCE_PART)
    relaxed = 0
    for _ in range(n_bg):
        best, best_ov = None, np.inf
        for _ in range(max_retries):
            w, h = rng.uniform(0.05, 0.5, size=2)
            x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
            cand = np.array([x1, y1, x1 + w, y1 + h])
            ov = iou_matrix(cand, gt_boxes).max()
            if ov < best_ov:
                best, best_ov = cand, ov
            if ov < 0.3:
                break
        if best_ov >= 0.3:
            relaxed += 1
        boxes.append(best)
        source.append(SOURCE_BACKGROUND)
    if relaxed:
        flags.append(f"background_relaxed={relaxed}")
    return np.array(boxes), np.array(source, dtype=np.int64), flags


def featurize(proposals: np.ndarray, source: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
              cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Feature matrix ``(D, N)``: prototypes weighted by overlap, part signature, noise."""
    protos, parts = class_prototypes(cfg)
    ov = iou_matrix(proposals, gt_boxes)  # (N, G)
    feats = protos[:, gt_classes] @ ov.T  # (D, N)
    is_part = source == SOURCE_PART
    if np.any(is_part):
        owner = ov[is_part].argmax(axis=1)
        feats[:, is_part] += cfg.part_bonus * parts[:, gt_classes[owner]]
    if cfg.noise_sigma > 0:
        feats = feats + rng.normal(0.0, cfg.noise_sigma, size=feats.shape)
    return feats


def gen_scene(cfg: GenConfig, scene_index: int) -> Scene:
    cfg.validate()
    rng = scene_rng(cfg.seed, scene_index)
    gt_boxes, gt_classes = _sample_objects(cfg, rng)
    y_img = np.zeros(cfg.num_classes, dtype=np.int64)
    y_img[gt_classes] = 1
    proposals, source, flags = gen_proposals(gt_boxes, cfg, rng)
    features = featurize(proposals, source, gt_boxes, gt_classes, cfg, rng)
    return Scene(scene_index, gt_boxes, gt_classes, y_img, proposals, features, source, flags)


def gen_corpus(cfg: GenConfig) -> list[Scene]:
    return [gen_scene(cfg, i) for i in range(cfg.num_scenes)]


def split(scenes: list[Scene]) -> tuple[list[Scene], list[Scene]]:
    """Train (even ids) and test (odd ids)."""
    return [s for s in scenes if s.id % 2 == 0], [s for s in scenes if s.id % 2 == 1]


# Snapshot: JSON lines, keys in the fixed order id, gt, y_img, proposals, features.
# gt is a list of [x1, y1, x2, y2, class]; features is a list of D rows.

def scene_to_record(scene: Scene) -> dict:
    rec = {
        "id": int(scene.id),
        "gt": [[*map(float, b), int(c)] for b, c in zip(scene.gt_boxes, scene.gt_classes)],
        "y_img": [int(v) for v in scene.y_img],
        "proposals": [[float(v) for v in b] for b in scene.proposals],
        "features": [[float(v) for v in row] for row in scene.features],
    }
    if scene.source is not None:
        rec["source"] = [int(v) for v in scene.source]
    return rec


def scene_from_record(rec: dict) -> Scene:
    gt = np.asarray(rec["gt"], dtype=np.float64).reshape(-1, 5)
    source = rec.get("source")
    return Scene(
        id=int(rec["id"]),
        gt_boxes=gt[:, :4].copy(),
        gt_classes=gt[:, 4].astype(np.int64),
        y_img=np.asarray(rec["y_img"], dtype=np.int64),
        proposals=np.asarray(rec["proposals"], dtype=np.float64).reshape(-1, 4),
        features=np.asarray(rec["features"], dtype=np.float64),
        source=None if source is None else np.asarray(source, dtype=np.int64),
    )


def save_snapshot(scenes: list[Scene], path, cfg: GenConfig | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if cfg is not None:
            fh.write(json.dumps({"gen_config": asdict(cfg)}) + "\n")
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s)) + "\n")


def load_snapshot(path) -> tuple[list[Scene], GenConfig | None]:
    scenes: list[Scene] = []
    cfg = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "gen_config" in rec:
                cfg = GenConfig(**rec["gen_config"])
                continue
            scenes.append(scene_from_record(rec))
    return scenes, cfg
