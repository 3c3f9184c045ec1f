"""Recording ingest: EDF I/O, hypnograms, epoching, folds, synthetic data."""
from .edf import EDFError, EDFParseError, EDFScalingError, EDFTruncatedError, load_edf, read_annotations, write_edf
from .epochs import MissingChannelError, make_epochs, trim_wake
from .folds import FoldSplit, make_folds
from .hypnogram import (
    DEFAULT_DROP,
    DEFAULT_STAGE_MAP,
    SLEEP_EDF_DROP,
    HypnogramError,
    load_hypnogram,
    write_hypnogram_csv,
)
from .synth import SynthConfig, SynthConfigError, SynthDataset, synth_generate
from .types import (
    EPOCH_SECONDS,
    LAYOUTS,
    N_CLASSES,
    SOURCE_LAYOUT,
    SOURCE_SINGLE_LAYOUT,
    STUDENT_LAYOUT,
    TEACHER_LAYOUT,
    Channel,
    ChannelLayout,
    LabeledEpoch,
    RawRecording,
    StageLabel,
)
