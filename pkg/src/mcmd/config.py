"""Experiment configuration: one nested YAML document, resolved into typed sections.

Top-level keys::

    name: run name (run directory is <runs>/<name>)
    seed: global seed, copied into every section that takes one
    data: dataset locations, layouts, channel map, wake trimming
    stft: time-frequency settings
    synth: synthetic generator settings
    train: TrainConfig for the target (distillation) step
    pretrain: overrides of ``train`` for the source step
    pretrained: path of M0 parameters for ``distill`` (optional)
    ablation: {grid, seeds}

``--config`` also accepts the built-in preset names in ``PRESETS``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .signal_io import SynthConfig
from .tfr import StftConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    root: str = "data"
    source_dir: str | None = None  # default <root>/source
    target_dir: str | None = None  # default <root>/target
    cache_dir: str | None = None  # default <root>/cache
    source_layouts: list[str] = field(default_factory=lambda: ["source", "source_single"])
    target_layouts: list[str] = field(default_factory=lambda: ["teacher", "student"])
    channel_map: dict[str, str] = field(default_factory=dict)  # role -> label in the files
    trim_minutes: float | None = 30.0
    hypnogram_drop: list[str] | None = None  # None: library default

    def dir(self, which: str) -> str:
        explicit = getattr(self, f"{which}_dir")
        return explicit if explicit else os.path.join(self.root, which)

    def cache(self, domain: str) -> str:
        return os.path.join(self.cache_dir or os.path.join(self.root, "cache"), domain)


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    pretrained: str | None = None
    ablation: dict = field(default_factory=lambda: {"grid": "scenarios_student", "seeds": [0, 1, 2, 3, 4]})
    raw: dict = field(default_factory=dict, repr=False)  # the resolved input document

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "data": asdict(self.data),
            "stft": asdict(self.stft),
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "pretrained": self.pretrained,
            "ablation": dict(self.ablation),
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        doc = self.to_dict()
        doc["config_hash"] = self.hash()
        with open(path, "w") as f:
            yaml.safe_dump(doc, f, sort_keys=True)


class ConfigError(ValueError):
    pass


DISTILL_BUDGET = {"max_epochs": 50, "patience": 10}
PRETRAIN_BUDGET = {"max_epochs": 100, "patience": None}

# desk-scale settings calibrated on the synthetic task; "tiny" is for smoke runs
_DESK_TRAIN = {
    "learning_rate": 3e-3, "batch_size": 8, "max_epochs": 20, "seq_len": 10, "eval_stride": 5,
    "dropout": 0.1, "dims": {"M": 8, "H_e": 16, "H_s": 16}, "patience": None,
    "fold_scheme": "grouped", "n_folds": 3, "folds": [0],
}
PRESETS: dict[str, dict] = {
    "default": {},
    "desk": {
        "name": "desk",
        "data": {"trim_minutes": None},
        "synth": {"n_subjects_source": 10, "n_subjects_target": 6, "epochs_per_subject": 120},
        "train": _DESK_TRAIN,
        "pretrain": {"max_epochs": 15},
    },
    "tiny": {
        "name": "tiny",
        "data": {"trim_minutes": None},
        "synth": {"n_subjects_source": 3, "n_subjects_target": 3, "epochs_per_subject": 24},
        "train": {"learning_rate": 3e-3, "batch_size": 4, "max_epochs": 2, "seq_len": 5, "eval_stride": 5,
                  "dropout": 0.1, "dims": {"M": 4, "H_e": 4, "H_s": 4}, "fold_scheme": "leave_one_subject_out"},
        "pretrain": {"max_epochs": 1},
        "ablation": {"grid": "scenarios_student", "seeds": [0]},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("channel_map",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: str, d: dict, cls) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def resolve(doc: dict, seed: int | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a (possibly partial) document."""
    doc = copy.deepcopy(doc or {})
    known = {"name", "seed", "data", "stft", "synth", "train", "pretrain", "pretrained", "ablation"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if seed is not None:
        doc["seed"] = seed
    s = int(doc.get("seed", 0))
    user_train = doc.get("train") or {}
    # epoch budgets differ by step unless the document sets them
    train_d = {**DISTILL_BUDGET, **user_train, "seed": s}
    pre_d = _merge({**PRETRAIN_BUDGET, **user_train}, doc.get("pretrain") or {})
    pre_d["seed"] = s
    data_d = doc.get("data") or {}
    stft_d = doc.get("stft") or {}
    _check_keys("data", data_d, DataConfig)
    _check_keys("stft", stft_d, StftConfig)
    try:
        cfg = ExperimentConfig(
            name=str(doc.get("name", "default")),
            seed=s,
            data=DataConfig(**data_d),
            stft=StftConfig(**stft_d),
            synth=SynthConfig.from_dict(doc.get("synth") or {}),
            train=TrainConfig.from_dict(train_d),
            pretrain=TrainConfig.from_dict(pre_d),
            pretrained=doc.get("pretrained"),
            ablation={"grid": "scenarios_student", "seeds": [0, 1, 2, 3, 4], **(doc.get("ablation") or {})},
            raw=doc,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path_or_preset: str, seed: int | None = None) -> ExperimentConfig:
    """Load a YAML file, or a built-in preset when no such file exists."""
    if os.path.isfile(path_or_preset):
        with open(path_or_preset) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path_or_preset}: top level must be a mapping")
        doc.pop("config_hash", None)  # snapshots carry their hash; it is recomputed
        base = doc.pop("preset", None)
        if base is not None:
            if base not in PRESETS:
                raise ConfigError(f"unknown preset {base!r}")
            doc = _merge(PRESETS[base], doc)
    elif path_or_preset in PRESETS:
        doc = PRESETS[path_or_preset]
    else:
        raise ConfigError(f"config {path_or_preset!r} is neither a file nor a preset ({', '.join(PRESETS)})")
    return resolve(doc, seed)
