import numpy as np
import pytest

from prognosis import eeg_io
from prognosis import train as train_mod


@pytest.fixture(scope="session")
def small_dataset():
    """2 Good + 2 Poor synthetic patients, one hour each, native 250 Hz."""
    dataset = {}
    for i in range(2):
        recs, meta = eeg_io.synthesize_patient(
            eeg_io.SynthesisProfile(outcome=eeg_io.GOOD, seed=10 + i)
        )
        dataset[meta.patient_id] = (meta, recs)
    for i in range(2):
        recs, meta = eeg_io.synthesize_patient(
            eeg_io.SynthesisProfile(outcome=eeg_io.POOR, seed=100010 + i)
        )
        dataset[meta.patient_id] = (meta, recs)
    return dataset


@pytest.fixture(scope="session")
def small_store(small_dataset, tmp_path_factory):
    cache = tmp_path_factory.mktemp("segment-cache")
    return train_mod.build_store(small_dataset, cache)


@pytest.fixture(scope="session")
def one_hour_recording(small_dataset):
    pid = sorted(small_dataset)[0]
    return small_dataset[pid][1][0]
