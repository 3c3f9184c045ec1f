"""Source pre-training and simultaneous teacher/student distillation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .dataset import SequenceSet, TFRDataset, fold_parts, norm_stats
from .distillation import DistillConfig, LossBreakdown, sequence_ce_logits, target_loss
from .evaluation import MetricsReport, evaluate_model
from .model import ModelDims, SeqSleepNet, ShapeError, check_finite_gradients, clone, init_params
from .signal_io import FoldSplit, make_folds

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_ROLE_IDS = {"model": 0, "teacher": 1, "student": 2}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class CheckpointError(RuntimeError):
    pass


def set_deterministic(flag: bool = True) -> None:
    """Fixed reduction order: single intra-op thread and deterministic kernels."""
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int | None = None  # stagnant validation epochs before stopping
    grad_clip_norm: float = 5.0  # 0 disables clipping
    seed: int = 0
    seq_len: int = 30
    eval_stride: int = 10
    dropout: float = 0.25
    dtype: str = "float32"
    deterministic: bool = True
    freeze_filterbank: bool = False
    teacher_warmup_epochs: int = 0
    fold_scheme: str = "leave_one_subject_out"
    n_folds: int | None = None  # None: one fold per subject
    valid_fraction: float = 0.1
    folds: list[int] | None = None  # subset of fold indices to run
    dims: ModelDims = field(default_factory=ModelDims)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0 or self.seq_len < 1:
            raise ValueError("learning_rate >= 0, batch_size >= 1, max_epochs >= 0 and seq_len >= 1 required")
        if self.grad_clip_norm < 0:
            raise ValueError("grad_clip_norm must be >= 0")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if isinstance(self.dims, dict):
            self.dims = ModelDims(**self.dims)
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def make_folds(self, subjects: Sequence[str]) -> list[FoldSplit]:
        k = self.n_folds or len(subjects)
        return make_folds(subjects, k, self.fold_scheme, self.seed, self.valid_fraction)


@dataclass
class RunRecord:
    fold_index: int
    selector: str
    train_subjects: list[str]
    valid_subjects: list[str]
    test_subjects: list[str]
    step_losses: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)  # per epoch: {"epoch", role: {acc, mf1, kappa}}
    selection_epoch: int = 0
    best_checkpoint: str | None = None
    steps: dict[str, int] = field(default_factory=dict)
    test: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def best_valid_acc(self) -> float:
        return self.validation[self.selection_epoch][self.selector]["acc"]

    def to_dict(self) -> dict:
        return asdict(self)


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _metrics_summary(m: MetricsReport) -> dict:
    return {"acc": m.accuracy, "mf1": m.macro_f1, "kappa": m.kappa, "n": m.n_epochs_scored}


@dataclass
class FoldSets:
    parts: dict
    train: SequenceSet
    valid: SequenceSet | None
    test: SequenceSet | None


def build_fold_sets(ds: TFRDataset, fold: FoldSplit, cfg: TrainConfig, views: Sequence[str]) -> FoldSets:
    """Train/valid/test sequences of one fold, normalized with training-part statistics only."""
    parts = fold_parts(ds, fold)
    if not parts["train"]:
        raise ValueError(f"fold {fold.fold_index}: no training data")
    stats = {v: norm_stats(ds, parts["train"], v) for v in views}
    np_dtype = np.float64 if cfg.dtype == "float64" else np.float32

    def seqs(name, stride, mode):
        if not parts[name]:
            return None
        return SequenceSet(ds, parts[name], views, stats, cfg.seq_len, stride, mode, np_dtype)

    return FoldSets(parts, seqs("train", cfg.seq_len, "train"), seqs("valid", cfg.eval_stride, "eval"),
                    seqs("test", cfg.eval_stride, "eval"))


def make_optimizer(model: SeqSleepNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.learning_rate, foreach=False)


def train_step(
    models: dict[str, SeqSleepNet],
    batch: dict[str, torch.Tensor],
    labels: torch.Tensor,
    cfg: TrainConfig,
    optimizers: dict[str, torch.optim.Optimizer],
    step: int = 0,
    frozen: Sequence[str] = (),
) -> LossBreakdown:
    """One forward/backward pass and one clipped Adam update per model.

    ``models`` holds any of the roles "teacher", "student" (joint objective)
    or "model" (cross-entropy only). Roles in ``frozen`` are not updated.
    """
    traces = {}
    for role, m in models.items():
        m.train()
        traces[role] = m(batch[role])[1]
    if "student" in models:
        bd, loss = target_loss(traces.get("teacher"), traces["student"], labels, cfg.distill)
    else:
        role = next(iter(models))
        loss = sequence_ce_logits(labels, traces[role].logits)
        v = float(loss.detach())
        bd = LossBreakdown(v, 0.0, 0.0, 0.0, 0.0, v)
    if not math.isfinite(bd.total):
        raise TrainingDivergedError(step)
    for m in models.values():
        m.zero_grad(set_to_none=True)
    loss.backward()
    for role, m in models.items():
        if role in frozen:
            continue
        check_finite_gradients(m)
        if cfg.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_([p for p in m.parameters() if p.grad is not None],
                                           cfg.grad_clip_norm, foreach=False)
        optimizers[role].step()
        m.clamp_filterbank_()
    return bd


class FoldTrainer:
    """Resumable training loop for one fold.

    ``mode``: "pretrain" (single 4-channel model on the source view),
    "distill" (teacher + student, joint objective), "student" (student alone,
    cross-entropy only) or "teacher" (teacher alone).
    """

    VIEWS = {
        "pretrain": {"model": "source"},
        "distill": {"teacher": "teacher", "student": "student"},
        "student": {"student": "student"},
        "teacher": {"teacher": "teacher"},
    }

    def __init__(self, ds: TFRDataset, fold: FoldSplit, cfg: TrainConfig, m0: SeqSleepNet | None = None,
                 mode: str = "distill", views: dict[str, str] | None = None, log_path: str | None = None):
        if mode not in self.VIEWS:
            raise ValueError(f"unknown training mode {mode!r}")
        self.ds, self.fold, self.cfg, self.mode = ds, fold, cfg, mode
        self.views = dict(views or self.VIEWS[mode])
        self.selector = "student" if "student" in self.views else next(iter(self.views))
        self.log_path = log_path
        for role, view in self.views.items():
            if view not in ds.view_names:
                raise ValueError(f"layout mismatch: role {role!r} needs view {view!r}, dataset has {ds.view_names}")

        fs = build_fold_sets(ds, fold, cfg, sorted(set(self.views.values())))
        self.parts, self.train_set, self.valid_set, self.test_set = fs.parts, fs.train, fs.valid, fs.test
        self.norm_subjects = sorted({p.subject_id for p in self.parts["train"]})
        if len(self.train_set) == 0:
            raise ValueError(f"fold {fold.fold_index}: no training sequence of length {cfg.seq_len}")
        self.test_subjects = set(fold.test_subjects) - set(fold.train_subjects)

        self.models: dict[str, SeqSleepNet] = {}
        for role in self.views:
            if m0 is not None:
                m = clone(m0).to(cfg.torch_dtype)
            else:
                m = init_params(cfg.seed, cfg.dims, cfg.dropout, cfg.torch_dtype)
            if m.dims != cfg.dims:
                for f in fields(ModelDims):
                    if getattr(m.dims, f.name) != getattr(cfg.dims, f.name):
                        raise ShapeError(f.name, getattr(cfg.dims, f.name), getattr(m.dims, f.name))
            m.dropout = cfg.dropout
            m.reseed_dropout(_seed_for(cfg.seed, fold.fold_index, _ROLE_IDS[role]))
            m.freeze_filterbank(cfg.freeze_filterbank)
            self.models[role] = m
        self.optimizers = {r: make_optimizer(m, cfg) for r, m in self.models.items()}
        self.rng = np.random.default_rng([cfg.seed, fold.fold_index, 7])

        self.record = RunRecord(fold.fold_index, self.selector, list(fold.train_subjects),
                                list(fold.valid_subjects), list(fold.test_subjects))
        self.epoch = 0  # completed epochs
        self.batch_pos = 0
        self.perm: np.ndarray | None = None
        self.step = 0
        self.steps = {r: 0 for r in self.models}
        self.best_states: dict[str, dict] = {}
        self.stagnant = 0
        self.finished = False
        self._validate()

    # -- internals

    def _state_snapshot(self) -> dict[str, dict]:
        return {r: {k: v.detach().clone() for k, v in m.state_dict().items()} for r, m in self.models.items()}

    def _validate(self) -> None:
        eval_set = self.valid_set if self.valid_set is not None else self.train_set
        entry = {"epoch": self.epoch}
        for role, m in self.models.items():
            entry[role] = _metrics_summary(evaluate_model(m, eval_set, self.views[role], self.cfg.batch_size * 2))
        self.record.validation.append(entry)
        best = self.record.validation[self.record.selection_epoch][self.selector]["acc"]
        if self.epoch == 0 or entry[self.selector]["acc"] > best:
            self.record.selection_epoch = self.epoch
            self.best_states = self._state_snapshot()
            self.stagnant = 0
        else:
            self.stagnant += 1

    def _log_step(self, bd: LossBreakdown) -> None:
        entry = {"step": self.step, "fold": self.fold.fold_index, "epoch": self.epoch + 1, **bd.to_dict()}
        self.record.step_losses.append(entry)
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(entry) + "\n")

    def _frozen_roles(self) -> tuple[str, ...]:
        if self.mode == "distill" and self.epoch < self.cfg.teacher_warmup_epochs:
            return ("student",)
        return ()

    def _batch(self, ids) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
        leaked = self.train_set.provenance(ids) & self.test_subjects
        if leaked:
            raise RuntimeError(f"test subjects {sorted(leaked)} found in a training batch")
        batch, labels = {}, None
        for role, view in self.views.items():
            x, y = self.train_set.batch(ids, view)
            batch[role] = torch.as_tensor(x, dtype=self.cfg.torch_dtype)
            labels = torch.as_tensor(y)
        return batch, labels

    # -- public

    def run(self, stop_at_step: int | None = None) -> RunRecord:
        cfg = self.cfg
        if cfg.max_epochs == 0 and not self.record.warnings:
            self.record.warnings.append("max_epochs=0: returning initial parameters")
        n = len(self.train_set)
        while not self.finished and self.epoch < cfg.max_epochs:
            if self.perm is None:
                self.perm = self.rng.permutation(n)
                self.batch_pos = 0
            while self.batch_pos < n:
                if stop_at_step is not None and self.step >= stop_at_step:
                    return self.record
                ids = self.perm[self.batch_pos:self.batch_pos + cfg.batch_size].tolist()
                batch, labels = self._batch(ids)
                frozen = self._frozen_roles()
                bd = train_step(self.models, batch, labels, cfg, self.optimizers, self.step, frozen)
                self.step += 1
                for r in self.models:
                    if r not in frozen:
                        self.steps[r] += 1
                self._log_step(bd)
                self.batch_pos += cfg.batch_size
            self.perm = None
            self.epoch += 1
            self._validate()
            if cfg.patience and self.stagnant >= cfg.patience:
                log.info("fold %d: early stop after epoch %d", self.fold.fold_index, self.epoch)
                self.finished = True
        self.finished = True
        self.record.steps = dict(self.steps)
        return self.record

    def best_model(self, role: str | None = None) -> SeqSleepNet:
        role = role or self.selector
        m = clone(self.models[role])
        m.load_state_dict(self.best_states[role])
        return m

    def evaluate_test(self) -> dict[str, dict]:
        if self.test_set is None:
            return {}
        out = {}
        for role in self.models:
            rep = evaluate_model(self.best_model(role), self.test_set, self.views[role], self.cfg.batch_size * 2)
            out[role] = {**_metrics_summary(rep), "confusion": rep.confusion.tolist()}
        self.record.test = out
        return out

    # -- checkpointing

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "fold": asdict(self.fold),
            "config_hash": self.cfg.hash(),
            "dims": asdict(self.cfg.dims),
            "models": {r: m.state_dict() for r, m in self.models.items()},
            "dropout_rng": {r: m.dropout_generator.get_state() for r, m in self.models.items()},
            "optimizers": {r: o.state_dict() for r, o in self.optimizers.items()},
            "rng": self.rng.bit_generator.state,
            "epoch": self.epoch,
            "batch_pos": self.batch_pos,
            "perm": None if self.perm is None else self.perm.copy(),
            "step": self.step,
            "steps": dict(self.steps),
            "best_states": self.best_states,
            "stagnant": self.stagnant,
            "finished": self.finished,
            "record": self.record.to_dict(),
        }

    def checkpoint(self, path) -> None:
        torch.save(self.state_dict(), path)

    def load_state_dict(self, st: dict) -> None:
        if st.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint format version {st.get('format_version')} != {CHECKPOINT_VERSION}")
        for f in fields(ModelDims):
            if st["dims"][f.name] != getattr(self.cfg.dims, f.name):
                raise ShapeError(f.name, getattr(self.cfg.dims, f.name), st["dims"][f.name])
        if st["mode"] != self.mode or set(st["models"]) != set(self.models):
            raise CheckpointError(f"checkpoint is for mode {st['mode']!r}, trainer is {self.mode!r}")
        for r, m in self.models.items():
            m.load_state_dict(st["models"][r])
            m.dropout_generator.set_state(st["dropout_rng"][r])
            self.optimizers[r].load_state_dict(st["optimizers"][r])
        self.rng.bit_generator.state = st["rng"]
        self.epoch, self.batch_pos, self.step = st["epoch"], st["batch_pos"], st["step"]
        self.perm = None if st["perm"] is None else np.asarray(st["perm"])
        self.steps = dict(st["steps"])
        self.best_states = st["best_states"]
        self.stagnant, self.finished = st["stagnant"], st["finished"]
        self.record = RunRecord(**st["record"])


def resume(path, ds: TFRDataset, cfg: TrainConfig, m0: SeqSleepNet | None = None, log_path: str | None = None) -> FoldTrainer:
    """Rebuild a FoldTrainer from a checkpoint written by ``FoldTrainer.checkpoint``."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    st = torch.load(path, weights_only=False)
    if st.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {st.get('format_version')} != {CHECKPOINT_VERSION}")
    for f in fields(ModelDims):
        if st["dims"][f.name] != getattr(cfg.dims, f.name):
            raise ShapeError(f.name, getattr(cfg.dims, f.name), st["dims"][f.name])
    fold = FoldSplit(**{k: tuple(v) if isinstance(v, list) else v for k, v in st["fold"].items()})
    trainer = FoldTrainer(ds, fold, cfg, m0, st["mode"], log_path=log_path)
    trainer.load_state_dict(st)
    return trainer


# ---------------------------------------------------------------- the two steps


@dataclass
class PretrainResult:
    model: SeqSleepNet
    records: list[RunRecord]
    best_fold: int


@dataclass
class DistillResult:
    teachers: list[SeqSleepNet]
    students: list[SeqSleepNet]
    records: list[RunRecord]

    def __iter__(self):
        return iter((self.teachers, self.students, self.records))


def _selected_folds(folds: list[FoldSplit], wanted) -> list[FoldSplit]:
    if wanted is None:
        return folds
    by_idx = {f.fold_index: f for f in folds}
    missing = [i for i in wanted if i not in by_idx]
    if missing:
        raise ValueError(f"fold indices {missing} out of range (0..{len(folds) - 1})")
    return [by_idx[i] for i in wanted]


def _fold_dir(run_dir, i) -> str | None:
    if run_dir is None:
        return None
    d = os.path.join(run_dir, f"fold_{i}")
    os.makedirs(d, exist_ok=True)
    return d


def pretrain_source(ds: TFRDataset, cfg: TrainConfig, view: str = "source", run_dir=None) -> PretrainResult:
    """Cross-entropy training on the source domain; keeps the best validation model over all folds."""
    if not ds.subjects or ds.n_epochs() == 0:
        raise ValueError("empty source dataset")
    folds = _selected_folds(cfg.make_folds(ds.subject_ids), cfg.folds)
    best, best_acc, best_fold, records = None, -1.0, -1, []
    for fold in folds:
        d = _fold_dir(run_dir, fold.fold_index)
        trainer = FoldTrainer(ds, fold, cfg, None, "pretrain", views={"model": view},
                              log_path=os.path.join(d, "steps.jsonl") if d else None)
        rec = trainer.run()
        trainer.evaluate_test()
        records.append(rec)
        acc = rec.best_valid_acc()
        if acc > best_acc:
            best, best_acc, best_fold = trainer.best_model("model"), acc, fold.fold_index
    return PretrainResult(best, records, best_fold)


def distill_target(m0: SeqSleepNet | None, ds: TFRDataset, cfg: TrainConfig, run_dir=None,
                   mode: str = "distill", checkpoint_every: int | None = None,
                   views: dict[str, str] | None = None) -> DistillResult:
    """Joint teacher/student training per target fold, both initialised from ``m0``.

    ``mode="student"`` / ``"teacher"`` trains one model alone (ablation baselines);
    ``m0=None`` starts from random initialisation.
    """
    folds = _selected_folds(cfg.make_folds(ds.subject_ids), cfg.folds)
    teachers, students, records = [], [], []
    for fold in folds:
        d = _fold_dir(run_dir, fold.fold_index)
        trainer = FoldTrainer(ds, fold, cfg, m0, mode, views=views,
                              log_path=os.path.join(d, "steps.jsonl") if d else None)
        if checkpoint_every and d:
            while not trainer.finished:
                trainer.run(stop_at_step=trainer.step + checkpoint_every)
                trainer.checkpoint(os.path.join(d, "state.ckpt"))
        else:
            trainer.run()
        trainer.evaluate_test()
        rec = trainer.record
        teachers.append(trainer.best_model("teacher") if "teacher" in trainer.models else None)
        students.append(trainer.best_model("student") if "student" in trainer.models else None)
        records.append(rec)
    return DistillResult(teachers, students, records)
