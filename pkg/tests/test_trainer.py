import json
from dataclasses import asdict, replace

import numpy as np
import pytest

from clipjoint import artifacts
from clipjoint.losses import LossWeights
from clipjoint.nanodet import SceneConfig, generate_dataset
from clipjoint.trainer import (
    GROUPS,
    Model,
    TrainConfig,
    Trainer,
    TrainingAborted,
    _decays,
    forward_backward,
    gate_rows,
    gradcheck_all,
    make_batch,
    predict,
    toy_train_config,
)
from clipjoint.nanodet import detector_forward
from clipjoint.vlhead import TAU_MIN, VLHeadConfig

SC = SceneConfig()
SMALL_VL = VLHeadConfig(embed_dim=32, hidden_dim=16)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SC, 0, 48), generate_dataset(SC, 0, 16, split=1)


def small_config(**kw):
    base = dict(epochs=2, batch_size=8, n_train=48, n_val=16)
    base.update(kw)
    return toy_train_config(**base)


def params(model):
    return {t.name: t.value.copy() for t in model.tensors()}


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.momentum, c.weight_decay, c.gamma, c.lr_step_epochs) == (0.005, 0.9, 1e-4, 0.1, 3)
        assert (c.lambda_cont, c.lambda_aux, c.alpha, c.iou_positive) == (0.5, 0.8, 0.7, 0.5)

    def test_step_lr(self):
        c = TrainConfig(lr=0.01, lr_scale=2.0)
        assert [c.lr_at(e) for e in (0, 2)] == [0.02, 0.02]
        assert abs(c.lr_at(3) - 0.002) < 1e-15 and abs(c.lr_at(6) - 0.0002) < 1e-15

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(momentum=1.0), dict(iou_positive=1.0),
                                     dict(alpha=1.2), dict(vl_gate="all"), dict(lambda_aux=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_mode(self):
        assert TrainConfig().mode == "joint"
        assert TrainConfig(lambda_cont=0, lambda_aux=0).mode == "ce-baseline"

    def test_decay_targets(self):
        assert _decays("backbone.W1") and _decays("head.cls.W") and _decays("proj.W2")
        assert not any(map(_decays, ["backbone.b1", "head.obj.b", "tau", "text", "proj.b2"]))


class TestModel:
    def test_groups(self):
        m = Model.init(SC, 0, vl=SMALL_VL)
        assert tuple(m.groups()) == GROUPS
        assert tuple(Model.init(SC, 0, vl_branch=False).groups()) == ("backbone", "heads")

    def test_default_embed_dim(self):
        m = Model.init(SC, 0)
        assert m.text.embeddings.shape == (8, 512) and m.temps.tau.value.tolist() == [0.07] * 8

    def test_detector_init_independent_of_branch(self):
        a, b = Model.init(SC, 3, vl=SMALL_VL), Model.init(SC, 3, vl_branch=False)
        for x, y in zip(a.detector.tensors(), b.detector.tensors()):
            assert np.array_equal(x.value, y.value)


class TestGating:
    def test_union_contains_both(self, scenes):
        m = Model.init(SC, 0, vl=SMALL_VL)
        b = make_batch(scenes[0][:8], SC, 0.5)
        off = detector_forward(b.raw, m.detector).box_offsets
        u = gate_rows(b, off, "union", SC, 0.5)
        p = gate_rows(b, off, "predicted", SC, 0.5)
        assert set(b.vl_rows) <= set(u.vl_rows) and set(p.vl_rows) <= set(u.vl_rows)
        assert len(set(u.vl_rows)) == len(u.vl_rows)
        lab = dict(zip(u.vl_rows, u.vl_labels))
        assert all(lab[r] == c for r, c in zip(b.vl_rows, b.vl_labels))

    def test_anchor_is_identity(self, scenes):
        b = make_batch(scenes[0][:4], SC, 0.5)
        assert gate_rows(b, None, "anchor", SC, 0.5) is b


class TestGradients:
    def test_zero_vl_weights_zero_branch_grads(self, scenes):
        m = Model.init(SC, 0, vl=SMALL_VL)
        b = make_batch(scenes[0][:8], SC, 0.5)
        assert len(b.vl_rows) > 0
        forward_backward(m, b, LossWeights(0.0, 0.0))
        for t in m.groups()["text_embeddings"] + m.groups()["temperatures"] + m.groups()["projection"]:
            assert not t.grad.any(), t.name

    def test_no_positives_zero_branch_grads(self):
        empty = [s for s in generate_dataset(SC, 5, 60) if len(make_batch([s], SC, 0.5).vl_rows) == 0][:4]
        assert empty
        m = Model.init(SC, 0, vl=SMALL_VL)
        res = forward_backward(m, make_batch(empty, SC, 0.5), LossWeights(0.5, 0.8), gate="anchor")
        assert res.losses.n_positives == 0 and res.losses.l_cont == 0.0 and res.losses.l_aux == 0.0
        for g in ("projection", "text_embeddings", "temperatures"):
            assert not any(t.grad.any() for t in m.groups()[g]), g

    def test_gradcheck_seed0(self):
        rep = gradcheck_all(0)
        assert set(rep.errors) == set(GROUPS)
        assert rep.passed, rep.errors
        assert rep.n_positives >= 4


class TestTraining:
    def test_deterministic(self, scenes):
        runs = []
        for _ in range(2):
            t = Trainer(small_config(), SC, *scenes, vl=SMALL_VL)
            t.fit()
            runs.append(([asdict(r) for r in t.history], params(t.model)))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_zero_weights_match_branch_free_build(self, scenes):
        cfg = small_config(lambda_cont=0.0, lambda_aux=0.0, freeze_vl=True, alpha=1.0)
        with_vl = Trainer(cfg, SC, *scenes, vl=SMALL_VL)
        without = Trainer(cfg, SC, *scenes, vl_branch=False)
        with_vl.fit()
        without.fit()
        for a, b in zip(with_vl.model.detector.tensors(), without.model.detector.tensors()):
            assert np.array_equal(a.value, b.value), a.name
        for ra, rb in zip(with_vl.history, without.history):
            assert (ra.l_det, ra.l_total, ra.map50, ra.map5095) == (rb.l_det, rb.l_total, rb.map50, rb.map5095)

    def test_alpha_one_equals_detector_only(self, scenes):
        t = Trainer(small_config(epochs=1), SC, *scenes, vl=SMALL_VL)
        t.fit()
        bare = Model(t.model.detector)
        a = predict(t.model, scenes[1], SC, alpha=1.0)
        b = predict(bare, scenes[1], SC, alpha=0.7)
        assert [[(d.box, d.class_id, d.score) for d in x] for x in a] == \
               [[(d.box, d.class_id, d.score) for d in x] for x in b]

    def test_checkpoint_round_trip(self, scenes, tmp_path):
        train = scenes[0]
        b1, b2 = train[:8], train[8:16]
        cfg = small_config()
        straight = Trainer(cfg, SC, train, vl=SMALL_VL)
        straight.step(b1)
        straight.step(b2)

        first = Trainer(cfg, SC, train, vl=SMALL_VL)
        first.step(b1)
        artifacts.save_checkpoint(tmp_path / "ck.json", first, {"train": asdict(cfg)}, vl_branch=True)
        resumed = Trainer(cfg, SC, train, vl=replace(SMALL_VL, tau_init=0.5))
        artifacts.restore_trainer(resumed, artifacts.load_checkpoint(tmp_path / "ck.json"))
        assert resumed.step_count == 1
        resumed.step(b2)
        for k, v in params(straight.model).items():
            assert np.array_equal(v, params(resumed.model)[k]), k
        for k in straight.velocity:
            assert np.array_equal(straight.velocity[k], resumed.velocity[k]), k

    def test_checkpoint_shape_mismatch(self, scenes, tmp_path):
        t = Trainer(small_config(), SC, scenes[0], vl=SMALL_VL)
        artifacts.save_checkpoint(tmp_path / "ck.json", t, {}, vl_branch=True)
        other = Trainer(small_config(), SC, scenes[0], vl=replace(SMALL_VL, embed_dim=16))
        with pytest.raises(ValueError):
            artifacts.restore_trainer(other, artifacts.load_checkpoint(tmp_path / "ck.json"))

    def test_tau_stays_above_floor(self, scenes):
        t = Trainer(small_config(temperature_lr_mult=50.0, epochs=1), SC, scenes[0], vl=SMALL_VL)
        t.model.temps.tau.value[:] = 2 * TAU_MIN
        for k in range(0, 48, 8):
            t.step(scenes[0][k:k + 8])
            assert np.all(t.model.temps.tau.value >= TAU_MIN)

    def test_abort_on_nan(self, scenes):
        t = Trainer(small_config(), SC, scenes[0], vl=SMALL_VL)
        t.model.detector.cls_W.value[0, 0] = np.nan
        with pytest.raises(TrainingAborted, match="non-finite"):
            t.step(scenes[0][:4])

    def test_one_record_per_epoch(self, scenes):
        t = Trainer(small_config(epochs=3, eval_every=2), SC, *scenes, vl=SMALL_VL)
        hist = t.fit()
        assert [r.epoch for r in hist] == [1, 2, 3]
        assert hist[0].map50 is None and hist[1].map50 is not None and hist[2].map50 is not None
        json.dumps([asdict(r) for r in hist])

    def test_zero_epochs(self, scenes):
        t = Trainer(small_config(epochs=0), SC, *scenes)
        assert t.fit() == [] and t.step_count == 0


def test_loss_decreases_over_default_schedule():
    cfg = toy_train_config()
    t = Trainer(cfg, SC, generate_dataset(SC, cfg.seed, cfg.n_train))
    hist = t.fit()
    assert len(hist) == 15
    assert hist[-1].l_total < hist[0].l_total
