"""Hierarchical recurrent sleep-staging network with exposed feature taps.

Per-channel filterbank -> epoch-wise Bi-LSTM over time frames -> attention
pooling -> sequence-wise Bi-LSTM over epochs -> 5-way softmax head.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

N_CLASSES = 5
PARAMS_MAGIC = b"MCMDPRM\x00"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    F: int = 129
    T: int = 29
    C: int = 4
    M: int = 32
    H_e: int = 64
    H_s: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"model dim {f.name} must be positive")


TINY_DIMS = ModelDims(F=8, T=5, C=4, M=4, H_e=3, H_s=3)


class ShapeError(ValueError):
    def __init__(self, dim: str, expected, got):
        super().__init__(f"shape mismatch in dimension {dim}: expected {expected}, got {got}")
        self.dim = dim


class ParamsFormatError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class ForwardTrace(NamedTuple):
    fb_out: torch.Tensor  # (N, L, T, M, C)
    epoch_rnn_out: torch.Tensor  # (N, L, T, 2H_e)
    hidden_out: torch.Tensor  # (N, L, 2H_s), input of the softmax head
    logits: torch.Tensor  # (N, L, 5)
    probs: torch.Tensor  # (N, L, 5)

    def taps(self, output_tap: str = "hidden") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        third = self.hidden_out if output_tap == "hidden" else self.logits
        return self.fb_out, self.epoch_rnn_out, third


class SeqSleepNet(nn.Module):
    def __init__(self, dims: ModelDims = ModelDims(), dropout: float = 0.25):
        super().__init__()
        self.dims = dims
        self.dropout = dropout
        F, C, M, He, Hs = dims.F, dims.C, dims.M, dims.H_e, dims.H_s
        self.filterbank = nn.Parameter(torch.empty(C, F, M))
        self.epoch_rnn = nn.LSTM(M * C, He, batch_first=True, bidirectional=True)
        self.attn_proj = nn.Linear(2 * He, 2 * He)
        self.attn_context = nn.Parameter(torch.empty(2 * He))
        self.seq_rnn = nn.LSTM(2 * He, Hs, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * Hs, N_CLASSES)
        self.dropout_generator = torch.Generator().manual_seed(0)

    # -- init / housekeeping

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.filterbank.uniform_(0.0, 2.0 / self.dims.F, generator=g)
            for rnn in (self.epoch_rnn, self.seq_rnn):
                bound = 1.0 / np.sqrt(rnn.hidden_size)
                H = rnn.hidden_size
                for name, p in rnn.named_parameters():
                    if name.startswith("weight"):
                        p.uniform_(-bound, bound, generator=g)
                    else:
                        p.zero_()
                        if name.startswith("bias_ih"):
                            p[H:2 * H] = 1.0  # forget gate
            for lin in (self.attn_proj, self.head):
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=g)
                lin.bias.uniform_(-bound, bound, generator=g)
            bound = 1.0 / np.sqrt(self.attn_context.numel())
            self.attn_context.uniform_(-bound, bound, generator=g)
        self.dropout_generator.manual_seed(seed + 1)

    def reseed_dropout(self, seed: int) -> None:
        self.dropout_generator.manual_seed(seed)

    def clamp_filterbank_(self) -> None:
        with torch.no_grad():
            self.filterbank.clamp_(min=0.0)

    def freeze_filterbank(self, frozen: bool = True) -> None:
        self.filterbank.requires_grad_(not frozen)

    def _drop(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.dropout <= 0:
            return x
        keep = torch.rand(x.shape, generator=self.dropout_generator, dtype=x.dtype) >= self.dropout
        return x * keep / (1.0 - self.dropout)

    # -- forward

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5:
            raise ShapeError("rank", "5 (N, L, F, T, C)", x.dim())
        d = self.dims
        for name, axis in (("F", 2), ("T", 3), ("C", 4)):
            if x.shape[axis] != getattr(d, name):
                raise ShapeError(name, getattr(d, name), x.shape[axis])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ForwardTrace]:
        self.check_input(x)
        N, L, F, T, C = x.shape
        fb = torch.einsum("nlftc,cfm->nltmc", x, self.filterbank)
        frames = fb.reshape(N * L, T, self.dims.M * C)
        h, _ = self.epoch_rnn(frames)  # (N*L, T, 2He)
        scores = torch.tanh(self.attn_proj(h)) @ self.attn_context  # (N*L, T)
        alpha = torch.softmax(scores, dim=1)
        pooled = (alpha.unsqueeze(-1) * h).sum(dim=1).reshape(N, L, -1)
        hidden, _ = self.seq_rnn(self._drop(pooled))  # (N, L, 2Hs)
        logits = self.head(self._drop(hidden))
        probs = torch.softmax(logits, dim=-1)
        trace = ForwardTrace(fb, h.reshape(N, L, T, -1), hidden, logits, probs)
        return probs, trace


def init_params(seed: int, dims: ModelDims = ModelDims(), dropout: float = 0.25,
                dtype: torch.dtype = torch.float32) -> SeqSleepNet:
    model = SeqSleepNet(dims, dropout)
    model.reset_parameters(seed)
    return model.to(dtype)


def forward(x, params: SeqSleepNet) -> tuple[torch.Tensor, ForwardTrace]:
    x = torch.as_tensor(x, dtype=next(params.parameters()).dtype)
    return params(x)


def clone_init(m0: SeqSleepNet) -> tuple[SeqSleepNet, SeqSleepNet]:
    """Two independent deep copies of ``m0`` (teacher, student)."""
    return clone(m0), clone(m0)


def clone(m: SeqSleepNet) -> SeqSleepNet:
    dtype = next(m.parameters()).dtype
    out = SeqSleepNet(m.dims, m.dropout).to(dtype)
    with torch.no_grad():
        for (_, dst), (_, src) in zip(out.named_parameters(), m.named_parameters()):
            dst.copy_(src)
            dst.requires_grad_(src.requires_grad)
    out.dropout_generator.set_state(m.dropout_generator.get_state())
    out.train(m.training)
    return out


def params_hash(m: SeqSleepNet) -> str:
    h = hashlib.sha256()
    for name, p in sorted(m.state_dict().items()):
        t = p.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def gradients(m: SeqSleepNet) -> dict[str, torch.Tensor]:
    """Named gradients; parameters without a gradient report zeros."""
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in m.named_parameters()}


def check_finite_gradients(m: SeqSleepNet) -> None:
    for n, p in m.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(n)


def backward(loss: torch.Tensor, *models: SeqSleepNet) -> list[dict[str, torch.Tensor]]:
    """Backpropagate ``loss`` and return named gradients for each model."""
    for m in models:
        m.zero_grad(set_to_none=True)
    loss.backward()
    for m in models:
        check_finite_gradients(m)
    return [gradients(m) for m in models]


# ---------------------------------------------------------------- persistence


def save_params(m: SeqSleepNet, path) -> str:
    names, blobs, meta = [], [], []
    offset = 0
    for name, p in m.state_dict().items():
        arr = p.detach().cpu().contiguous().numpy()
        b = arr.tobytes()
        meta.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        names.append(name)
        blobs.append(b)
        offset += len(b)
    digest = params_hash(m)
    header = json.dumps({
        "dims": asdict(m.dims), "dropout": m.dropout, "tensors": meta, "hash": digest,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    return digest


def load_params(path, expected_dims: ModelDims | None = None) -> SeqSleepNet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != PARAMS_MAGIC:
        raise ParamsFormatError(f"{path}: bad magic bytes {blob[:8]!r}")
    if len(blob) < 16:
        raise ParamsFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"{path}: unsupported params format version {version}")
    try:
        header = json.loads(blob[16:16 + hlen])
    except ValueError as exc:
        raise ParamsFormatError(f"{path}: corrupt header ({exc})") from None
    dims = ModelDims(**header["dims"])
    if expected_dims is not None:
        for f in fields(ModelDims):
            if getattr(dims, f.name) != getattr(expected_dims, f.name):
                raise ShapeError(f.name, getattr(expected_dims, f.name), getattr(dims, f.name))
    data = blob[16 + hlen:]
    state = {}
    for t in header["tensors"]:
        raw = data[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise ParamsFormatError(f"{path}: tensor {t['name']} truncated")
        state[t["name"]] = torch.from_numpy(np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy())
    dtype = state["filterbank"].dtype
    model = SeqSleepNet(dims, header["dropout"]).to(dtype)
    model.load_state_dict(state)
    if params_hash(model) != header["hash"]:
        raise ParamsFormatError(f"{path}: content hash mismatch")
    return model
