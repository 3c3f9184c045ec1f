from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import SMALL_DIMS, small_train
from mcmd.distillation import DistillConfig
from mcmd.evaluation import evaluate_model
from mcmd.model import ModelDims, ShapeError, init_params, params_hash
from mcmd.training import (
    FoldTrainer,
    TrainConfig,
    TrainingDivergedError,
    distill_target,
    make_optimizer,
    pretrain_source,
    resume,
    set_deterministic,
    train_step,
)


@pytest.fixture(autouse=True, scope="module")
def _deterministic():
    set_deterministic(True)
    yield


def _m0(seed=11):
    return init_params(seed, SMALL_DIMS, dropout=0.1)


def _fold(ds, cfg, i=0):
    return cfg.make_folds(ds.subject_ids)[i]


def _trainer(ds, cfg, mode="distill", m0=None, **kw):
    return FoldTrainer(ds, _fold(ds, cfg), cfg, m0 if m0 is not None else _m0(), mode, **kw)


def _batch(trainer, n=4):
    return trainer._batch(list(range(n)))


# ---------------------------------------------------------------- single steps

def test_zero_learning_rate_leaves_params(target_ds):
    cfg = small_train(learning_rate=0.0)
    tr = _trainer(target_ds, cfg)
    before = {r: params_hash(m) for r, m in tr.models.items()}
    batch, y = _batch(tr)
    bd = train_step(tr.models, batch, y, cfg, tr.optimizers)
    assert bd.total > 0 and np.isfinite(bd.total)
    assert {r: params_hash(m) for r, m in tr.models.items()} == before


def _one_step(ds, cfg):
    tr = _trainer(ds, cfg)
    batch, y = _batch(tr)
    bd = train_step(tr.models, batch, y, cfg, tr.optimizers)
    return bd, params_hash(tr.models["student"])


def test_clip_zero_means_no_clipping(target_ds):
    _, h0 = _one_step(target_ds, small_train(grad_clip_norm=0.0))
    _, hbig = _one_step(target_ds, small_train(grad_clip_norm=1e30))
    _, hsmall = _one_step(target_ds, small_train(grad_clip_norm=1e-3))
    assert h0 == hbig
    assert h0 != hsmall


def test_step_breakdown_reproducible(target_ds):
    a = _one_step(target_ds, small_train())
    b = _one_step(target_ds, small_train())
    assert a[0].to_dict() == b[0].to_dict()
    assert a[1] == b[1]


def test_non_finite_loss_aborts_with_step(target_ds):
    cfg = small_train()
    tr = _trainer(target_ds, cfg)
    batch, y = _batch(tr)
    batch["student"] = batch["student"].clone()
    batch["student"][0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergedError) as e:
        train_step(tr.models, batch, y, cfg, tr.optimizers, step=17)
    assert e.value.step == 17


# ---------------------------------------------------------------- trajectories

def test_kd_off_student_matches_student_alone(target_ds):
    off = DistillConfig(alpha=0.0, beta=0.0, gamma=0.0)
    cfg = small_train(distill=off)
    joint = _trainer(target_ds, cfg, "distill")
    joint.run()
    alone = _trainer(target_ds, cfg, "student")
    alone.run()
    assert params_hash(joint.models["student"]) == params_hash(alone.models["student"])
    assert [v["student"] for v in joint.record.validation] == [v["student"] for v in alone.record.validation]


def test_teacher_trajectory_ignores_student(target_ds):
    cfg = small_train()
    joint = _trainer(target_ds, cfg, "distill")
    joint.run()
    alone = _trainer(target_ds, cfg, "teacher")
    alone.run()
    assert params_hash(joint.models["teacher"]) == params_hash(alone.models["teacher"])


def test_blocked_teacher_without_ce_never_moves(target_ds):
    cfg = small_train(distill=DistillConfig(ce_teacher_weight=0.0))
    m0 = _m0()
    tr = _trainer(target_ds, cfg, m0=m0)
    tr.run()
    assert params_hash(tr.models["teacher"]) == params_hash(m0)
    assert params_hash(tr.models["student"]) != params_hash(m0)


def test_both_models_step_together(target_ds):
    tr = _trainer(target_ds, small_train())
    rec = tr.run()
    assert rec.steps["teacher"] == rec.steps["student"] == tr.step > 0
    assert len(rec.step_losses) == tr.step


def test_selection_is_earliest_argmax(target_ds):
    tr = _trainer(target_ds, small_train(max_epochs=4))
    rec = tr.run()
    accs = [v["student"]["acc"] for v in rec.validation]
    assert rec.selection_epoch == int(np.argmax(accs))


def test_patience_stops_early(target_ds):
    cfg = small_train(learning_rate=0.0, max_epochs=10, patience=2)
    rec = _trainer(target_ds, cfg).run()
    assert len(rec.validation) == 3  # epoch 0 plus two stagnant epochs


def test_teacher_warmup_freezes_student(target_ds):
    cfg = small_train(max_epochs=1, teacher_warmup_epochs=1)
    m0 = _m0()
    tr = _trainer(target_ds, cfg, m0=m0)
    tr.run()
    assert params_hash(tr.models["student"]) == params_hash(m0)
    assert tr.steps["student"] == 0 < tr.steps["teacher"]


# ---------------------------------------------------------------- checkpoint / resume

def test_resume_matches_uninterrupted(target_ds, tmp_path):
    cfg = small_train(max_epochs=6)
    full = _trainer(target_ds, cfg)
    full.run()

    part = _trainer(target_ds, cfg)
    part.run(stop_at_step=10)
    assert part.step == 10
    path = tmp_path / "state.ckpt"
    part.checkpoint(path)
    del part
    back = resume(path, target_ds, cfg, _m0())
    back.run()
    assert back.step == full.step
    for role in ("teacher", "student"):
        assert params_hash(back.models[role]) == params_hash(full.models[role])
        assert params_hash(back.best_model(role)) == params_hash(full.best_model(role))
    assert back.record.validation == full.record.validation


def test_resume_missing_file(target_ds, tmp_path):
    with pytest.raises(FileNotFoundError):
        resume(tmp_path / "nope.ckpt", target_ds, small_train())


def test_resume_changed_dims_names_dim(target_ds, tmp_path):
    cfg = small_train()
    tr = _trainer(target_ds, cfg)
    tr.run(stop_at_step=2)
    tr.checkpoint(tmp_path / "s.ckpt")
    other = replace(cfg, dims=ModelDims(M=4, H_e=5, H_s=4))
    with pytest.raises(ShapeError) as e:
        resume(tmp_path / "s.ckpt", target_ds, other)
    assert e.value.dim == "H_e"


# ---------------------------------------------------------------- the two procedures

def test_pretrain_zero_epochs_returns_initial(source_ds):
    cfg = small_train(max_epochs=0, folds=[0])
    res = pretrain_source(source_ds, cfg)
    assert params_hash(res.model) == params_hash(init_params(cfg.seed, cfg.dims, cfg.dropout))
    assert any("max_epochs=0" in w for w in res.records[0].warnings)


def test_pretrain_deterministic_and_improves(source_ds):
    cfg = small_train(max_epochs=5, folds=[0, 1])
    a = pretrain_source(source_ds, cfg)
    b = pretrain_source(source_ds, cfg)
    assert params_hash(a.model) == params_hash(b.model)
    rec = a.records[[r.fold_index for r in a.records].index(a.best_fold)]
    tr = FoldTrainer(source_ds, _fold(source_ds, cfg, a.best_fold), replace(cfg, max_epochs=0), None, "pretrain")
    valid = tr.valid_set
    acc = evaluate_model(a.model, valid, "source").accuracy
    assert acc == rec.best_valid_acc()
    assert acc >= rec.validation[0]["model"]["acc"]


def test_pretrain_empty_dataset(source_ds):
    from mcmd.dataset import TFRDataset
    with pytest.raises(ValueError, match="empty"):
        pretrain_source(TFRDataset("source", {}), small_train())


def test_layout_mismatch(source_ds):
    with pytest.raises(ValueError, match="layout mismatch"):
        distill_target(_m0(), source_ds, small_train())


def test_dims_mismatch_between_m0_and_config(target_ds):
    m0 = init_params(0, ModelDims(M=5, H_e=4, H_s=4))
    with pytest.raises(ShapeError) as e:
        distill_target(m0, target_ds, small_train(folds=[0]))
    assert e.value.dim == "M"


# ---------------------------------------------------------------- leakage

def test_test_subjects_never_in_training_batches(target_ds):
    tr = _trainer(target_ds, small_train(max_epochs=2))
    seen = set()
    orig = tr.train_set.provenance

    def spy(ids):
        out = orig(ids)
        seen.update(out)
        return out

    tr.train_set.provenance = spy
    tr.run()
    assert seen and not (seen & tr.test_subjects)
    assert not (set(tr.norm_subjects) & tr.test_subjects)
    assert not (set(tr.norm_subjects) & set(tr.fold.valid_subjects))


def test_leak_is_detected(target_ds):
    tr = _trainer(target_ds, small_train())
    tr.test_subjects = {tr.train_set.subject_of(0)}
    with pytest.raises(RuntimeError, match="test subjects"):
        tr.run()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(grad_clip_norm=-1)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rat": 1})
    assert TrainConfig.from_dict({"dims": {"M": 4}}).dims.M == 4


def test_make_optimizer_skips_frozen():
    m = init_params(0, SMALL_DIMS)
    m.freeze_filterbank()
    opt = make_optimizer(m, small_train())
    n = sum(p.numel() for g in opt.param_groups for p in g["params"])
    assert n == sum(p.numel() for p in m.parameters()) - m.filterbank.numel()
    assert isinstance(opt, torch.optim.Adam)
