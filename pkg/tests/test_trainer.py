import time

import numpy as np
import pytest

from cbl.crd import CrdConfig, tau_schedule
from cbl.model import ModelConfig, init_student, student_forward
from cbl.numcore import fd_gradcheck
from cbl.synthscene import GenConfig, Scene, gen_corpus, split
from cbl.trainer import (
    TrainConfig,
    TrainingAborted,
    _clip,
    build_targets,
    lambda_schedule,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    scene_objective,
    sgd_step,
    total_loss,
    train,
)
from cbl.wet import EmaConfig, wet_forward, wet_init
from conftest import random_boxes


def _quick(**kw):
    base = dict(iterations=30, lr=0.01, lr_after_drop=0.001, hidden_dim=8, log_every=1, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_lambda_examples():
    assert lambda_schedule(0, 100) == 1.0
    assert lambda_schedule(100, 100) == 0.0
    assert lambda_schedule(50, 100) == 0.5
    assert lambda_schedule(500, 100) == 0.0
    with pytest.raises(ValueError):
        lambda_schedule(0, 0)


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 3.0, 4.0, 0.25) == 8.75
    assert total_loss(1.0, 1e6, 0.0, 0.0, 1.0) == 1.0
    assert total_loss(1e6, 2.0, 0.0, 0.0, 0.0) == 2.0


def test_sgd_examples():
    p = {"a": np.array([1.0, -2.0])}
    sgd_step(p, {"a": np.zeros(2)}, 0.1, 0.9, 0.0, {})
    assert p["a"].tolist() == [1.0, -2.0]
    p = {"a": np.array([1.0])}
    sgd_step(p, {"a": np.array([1.0])}, 0.1, 0.0, 0.0, {})
    assert p["a"][0] == pytest.approx(0.9, abs=1e-15)
    p, v = {"a": np.array([0.0])}, {}
    g = np.array([0.3])
    sgd_step(p, {"a": g}, 0.1, 0.9, 0.0, v)
    sgd_step(p, {"a": g}, 0.1, 0.9, 0.0, v)
    assert v["a"][0] == pytest.approx(1.9 * 0.3, abs=1e-15)
    with pytest.raises(FloatingPointError):
        sgd_step(p, {"a": np.array([np.nan])}, 0.1, 0.9, 0.0, v)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.num_oic) == (0.9, 5e-4, 4, 3)
    assert (cfg.lr, cfg.lr_after_drop, cfg.iterations) == (1e-3, 1e-4, 70_000)
    assert cfg.lr_at(49_999) == 1e-3 and cfg.lr_at(50_000) == 1e-4
    assert (cfg.gamma, cfg.mu_s, cfg.mu_n, cfg.msr_start_fraction) == (0.4, 0.7, 0.05, 0.4)
    assert cfg.msr_start() == 28_000
    for bad in (dict(iterations=0), dict(mu_n=0.0), dict(use_wet=False), dict(crd_teacher="cls")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_clip_rescales_to_max_norm():
    g = {"a": np.array([6.0, 8.0]), "b": np.array([0.0])}
    _clip(g, 5.0)
    assert np.allclose(g["a"], [3.0, 4.0])
    h = {"a": np.array([0.3, 0.4])}
    _clip(h, 5.0)
    assert h["a"].tolist() == [0.3, 0.4]


def test_frozen_teacher_stays_at_init(tiny_corpus):
    cfg = _quick(iterations=2)
    ema = EmaConfig(alpha=1.0)
    state = train(cfg, tiny_corpus[:12], ema)
    fresh = init_student(ModelConfig(8, 8, 3, 3, cfg.seed))
    init = wet_init(fresh.adapter, fresh.oic.heads, fresh.rcnn.cls, ema)
    for name, arr in state.teacher.named().items():
        assert np.array_equal(arr, init.named()[name])
    assert not np.array_equal(state.student.adapter.weight, fresh.adapter.weight)


def test_reports_follow_closed_form_schedules(tiny_corpus):
    cfg = _quick()
    crd = CrdConfig(iter_max=30)
    state = train(cfg, tiny_corpus[:12], crd=crd)
    assert [r.iteration for r in state.history] == list(range(30))
    lams = [r.lam for r in state.history]
    taus = [r.tau for r in state.history]
    assert lams == sorted(lams, reverse=True) and taus == sorted(taus)
    for r in state.history:
        assert r.lam == lambda_schedule(r.iteration, cfg.iterations)
        assert r.tau == tau_schedule(r.iteration, crd)
        assert r.lr == cfg.lr_at(r.iteration)
        assert r.msr_active == (r.iteration >= cfg.msr_start())
        assert r.rcnn == pytest.approx(r.cls + r.reg, abs=1e-12)
        assert r.total == pytest.approx(total_loss(r.midn, r.crd, sum(r.oic), r.rcnn, r.lam), rel=1e-12, abs=1e-12)


def test_baseline_arm_keeps_lambda_one_and_never_mines(tiny_corpus):
    cfg = _quick(use_wet=False, use_crd=False, use_msr=False)
    state = train(cfg, tiny_corpus[:12])
    assert state.teacher is None
    assert all(r.lam == 1.0 and not r.msr_active and r.crd == 0.0 for r in state.history)


def test_same_seed_gives_identical_history_and_checkpoint(tiny_corpus, tmp_path):
    runs = []
    for k in range(2):
        state = train(_quick(iterations=15), tiny_corpus[:12], crd=CrdConfig(iter_max=15))
        path = tmp_path / f"run{k}.ckpt"
        save_checkpoint(path, state, {"tag": "x"})
        runs.append(([r.row() for r in state.history], path.read_bytes()))
    assert runs[0] == runs[1]


def test_checkpoint_round_trip_and_resume(tiny_corpus, tmp_path):
    cfg = _quick(iterations=12)
    crd = CrdConfig(iter_max=12)
    path = tmp_path / "mid.ckpt"

    def snap(state):
        if state.iteration == 5:
            save_checkpoint(path, state)

    full = train(cfg, tiny_corpus[:12], crd=crd, callback=snap)
    header, tensors = read_checkpoint(path)
    assert header["iteration"] == 5
    assert {n.split("/")[0] for n in tensors} == {"student", "teacher", "velocity"}
    resumed = train(cfg, tiny_corpus[:12], crd=crd, state=load_checkpoint(path, cfg))
    for name, arr in full.student.named().items():
        assert np.array_equal(arr, resumed.student.named()[name]), name
    for name, arr in full.teacher.named().items():
        assert np.array_equal(arr, resumed.teacher.named()[name]), name
    assert [r.row() for r in full.history[5:]] == [r.row() for r in resumed.history]

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        read_checkpoint(bad)


def test_non_finite_loss_aborts_with_diagnostics(tiny_corpus):
    scenes = [s for s in tiny_corpus[:4]]
    broken = Scene(scenes[0].id, scenes[0].gt_boxes, scenes[0].gt_classes, scenes[0].y_img,
                   scenes[0].proposals, np.full_like(scenes[0].features, np.nan))
    with pytest.raises(TrainingAborted) as info:
        train(_quick(iterations=3, batch_size=4), [broken] + scenes[1:4])
    assert info.value.diagnostics["iteration"] == 0
    assert info.value.diagnostics["scene"] == broken.id


def _random_scene(rng, c, n, d):
    y = np.zeros(c, dtype=int)
    y[rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False)] = 1
    cls = np.flatnonzero(y)
    gt = random_boxes(rng, len(cls))
    return Scene(0, gt, cls, y, random_boxes(rng, n), rng.normal(size=(d, n)))


def test_gradients_through_shared_adapter(rng):
    lam = 0.3
    weight = {"midn": lambda p: lam * p["midn"], "crd": lambda p: (1 - lam) * p["crd"],
              "oic": lambda p: sum(p["oic"]), "cls": lambda p: p["cls"], "reg": lambda p: p["reg"]}
    for trial in range(20):
        c, n, d = int(rng.integers(1, 5)), int(rng.integers(2, 13)), 5
        student = init_student(ModelConfig(d, 4, c, 2, trial))
        for arr in student.named().values():
            arr[...] = rng.normal(size=arr.shape) * 0.7
        scene = _random_scene(rng, c, n, d)
        teacher = wet_init(student.adapter, student.oic.heads, student.rcnn.cls, EmaConfig())
        teacher.head.weight[...] += rng.normal(size=teacher.head.weight.shape)
        fwd = student_forward(student, scene.features)
        cfg = TrainConfig(num_oic=2, mu_n=0.5)
        targets = build_targets(scene, fwd, wet_forward(teacher, scene.features), cfg, 0.4,
                                msr_active=bool(trial % 2), crd_temperature=0.5)
        params = {k: v for k, v in student.named().items() if k.startswith("adapter")}
        for term, pick in weight.items():
            def loss(_ps):
                return pick(scene_objective(student, scene.features, scene.y_img, targets, lam, backward=False)[0])

            _, grads, _ = scene_objective(student, scene.features, scene.y_img, targets, lam, terms={term})
            err = fd_gradcheck(loss, params, {k: grads[k] for k in params})
            assert err < 1e-4, (trial, term, err)


def test_gradient_isolation_from_teacher(tiny_corpus):
    scene = tiny_corpus[0]
    student = init_student(ModelConfig(8, 8, 3, 3, 0))
    teacher = wet_init(student.adapter, student.oic.heads, student.rcnn.cls, EmaConfig())
    fwd = student_forward(student, scene.features)
    cfg = TrainConfig(hidden_dim=8)
    t1 = build_targets(scene, fwd, wet_forward(teacher, scene.features), cfg, 0.5, False)
    parts1, grads, _ = scene_objective(student, scene.features, scene.y_img, t1, 0.5)
    assert set(grads) == set(student.named())
    bumped = teacher.copy()
    bumped.head.weight[...] += np.random.default_rng(0).normal(size=bumped.head.weight.shape)
    t2 = build_targets(scene, fwd, wet_forward(bumped, scene.features), cfg, 0.5, False)
    parts2, _, _ = scene_objective(student, scene.features, scene.y_img, t2, 0.5)
    assert parts1["crd"] != parts2["crd"]


def test_smoke_run_under_five_minutes():
    scenes = gen_corpus(GenConfig(num_classes=3, num_scenes=200, seed=11))
    train_split, _ = split(scenes)
    start = time.perf_counter()
    state = train(TrainConfig(iterations=2000, lr=0.01, lr_after_drop=0.001, log_every=100, seed=1),
                  train_split, crd=CrdConfig(iter_max=2000))
    elapsed = time.perf_counter() - start
    assert state.iteration == 2000
    assert all(np.isfinite(r.total) for r in state.history)
    assert elapsed < 300, elapsed
