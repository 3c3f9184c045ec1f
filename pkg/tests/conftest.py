import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mcmd.dataset import build_dataset  # noqa: E402
from mcmd.model import ModelDims  # noqa: E402
from mcmd.signal_io import SynthConfig, synth_generate  # noqa: E402
from mcmd.training import TrainConfig  # noqa: E402

SMALL_DIMS = ModelDims(M=4, H_e=4, H_s=4)


def small_train(**kw) -> TrainConfig:
    base = dict(learning_rate=3e-3, batch_size=4, max_epochs=2, seq_len=5, eval_stride=5, dropout=0.1,
                dims=SMALL_DIMS, fold_scheme="leave_one_subject_out")
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(n_subjects_source=4, n_subjects_target=4, epochs_per_subject=30), 0)


@pytest.fixture(scope="session")
def target_ds(small_synth):
    _, tgt = small_synth
    return build_dataset("target", tgt.recordings, tgt.hypnograms, ["teacher", "student"], trim_minutes=None)


@pytest.fixture(scope="session")
def source_ds(small_synth):
    src, _ = small_synth
    return build_dataset("source", src.recordings, src.hypnograms, ["source", "source_single"], trim_minutes=None)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
