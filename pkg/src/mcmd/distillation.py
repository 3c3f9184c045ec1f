"""Sequence cross-entropy, L2 feature distillation and the combined target loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as Fn

from .model import N_CLASSES, ForwardTrace

PROB_CLAMP = 1e-12
_LOG_CLAMP = math.log(PROB_CLAMP)


@dataclass
class DistillConfig:
    alpha: float = 1500.0  # filterbank
    beta: float = 1500.0  # epoch-wise LSTM
    gamma: float = 1500.0  # final hidden layer
    enable_output_kd: bool = True
    enable_filterbank_kd: bool = True
    enable_lstm_kd: bool = True
    gradient_block: bool = True
    kd_reduction: str = "mean"
    output_tap: str = "hidden"
    ce_teacher_weight: float = 1.0
    ce_student_weight: float = 1.0

    def __post_init__(self):
        for n in ("alpha", "beta", "gamma", "ce_teacher_weight", "ce_student_weight"):
            if getattr(self, n) < 0:
                raise ValueError(f"{n} must be >= 0")
        if self.kd_reduction not in ("mean", "sum"):
            raise ValueError(f"kd_reduction must be 'mean' or 'sum', got {self.kd_reduction!r}")
        if self.output_tap not in ("hidden", "logits"):
            raise ValueError(f"output_tap must be 'hidden' or 'logits', got {self.output_tap!r}")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (
            self.alpha if self.enable_filterbank_kd else 0.0,
            self.beta if self.enable_lstm_kd else 0.0,
            self.gamma if self.enable_output_kd else 0.0,
        )

    @property
    def any_kd(self) -> bool:
        return any(w > 0 for w in self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    ce_teacher: float
    ce_student: float
    kd_filter: float
    kd_lstm: float
    kd_output: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _one_hot(y: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if y.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
        return Fn.one_hot(y.long(), N_CLASSES).to(like.dtype)
    return y.to(like.dtype)


def sequence_ce(y, p) -> torch.Tensor:
    """Mean over batch and sequence of -sum_i y_i log p_i, with p clamped at 1e-12.

    ``y`` may be one-hot (N, L, 5) or integer labels (N, L).
    """
    p = torch.as_tensor(p)
    y = _one_hot(torch.as_tensor(y), p)
    if y.shape != p.shape or p.dim() != 3:
        raise ValueError(f"sequence_ce shape mismatch: y {tuple(y.shape)} vs p {tuple(p.shape)}")
    return -(y * torch.log(p.clamp_min(PROB_CLAMP))).sum(dim=-1).mean()


def sequence_ce_logits(y, logits: torch.Tensor) -> torch.Tensor:
    """Same value as ``sequence_ce(y, softmax(logits))`` but computed in log-space."""
    y = _one_hot(torch.as_tensor(y), logits)
    if y.shape != logits.shape:
        raise ValueError(f"sequence_ce shape mismatch: y {tuple(y.shape)} vs logits {tuple(logits.shape)}")
    logp = torch.log_softmax(logits, dim=-1).clamp_min(_LOG_CLAMP)
    return -(y * logp).sum(dim=-1).mean()


def kd_l2(u_hat, v, reduction: str = "mean") -> torch.Tensor:
    """Squared L2 distance between a teacher tap and a student tap."""
    u_hat, v = torch.as_tensor(u_hat), torch.as_tensor(v)
    if u_hat.shape != v.shape:
        raise ValueError(f"kd_l2 shape mismatch: {tuple(u_hat.shape)} vs {tuple(v.shape)}")
    sq = (u_hat - v) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def apply_gradient_block(trace: ForwardTrace, cfg: DistillConfig) -> ForwardTrace:
    """Teacher taps as seen by the distillation terms: constants when blocked."""
    if not cfg.gradient_block:
        return trace
    return ForwardTrace(*(t.detach() for t in trace))


def target_loss(
    teacher_trace: ForwardTrace | None,
    student_trace: ForwardTrace,
    labels,
    cfg: DistillConfig,
) -> tuple[LossBreakdown, torch.Tensor]:
    """Combined teacher/student objective; returns the breakdown and the graph root.

    Disabled or zero-weighted distillation terms are not built at all, so they
    contribute exactly nothing to any gradient.
    """
    labels = torch.as_tensor(labels)
    ce_s = sequence_ce_logits(labels, student_trace.logits)
    zero = student_trace.logits.new_zeros(())
    ce_t = sequence_ce_logits(labels, teacher_trace.logits) if teacher_trace is not None else zero
    terms = [zero, zero, zero]
    if teacher_trace is not None and cfg.any_kd:
        shown = apply_gradient_block(teacher_trace, cfg)
        t_taps = shown.taps(cfg.output_tap)
        s_taps = student_trace.taps(cfg.output_tap)
        for i, w in enumerate(cfg.weights):
            if w > 0:
                terms[i] = kd_l2(t_taps[i], s_taps[i], cfg.kd_reduction)
    total = cfg.ce_student_weight * ce_s
    if teacher_trace is not None:
        total = total + cfg.ce_teacher_weight * ce_t
    for w, t in zip(cfg.weights, terms):
        if w > 0:
            total = total + w * t
    bd = LossBreakdown(
        ce_teacher=float(ce_t.detach()),
        ce_student=float(ce_s.detach()),
        kd_filter=float(terms[0].detach()),
        kd_lstm=float(terms[1].detach()),
        kd_output=float(terms[2].detach()),
        total=float(total.detach()),
    )
    return bd, total
