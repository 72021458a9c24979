import numpy as np
import pytest

from mmdes.data_model import FeatureGroup, GroupSpec, Modality, MultimodalDataset, PersonRecord, SyntheticConfig


def make_person(pid, T=10, dims=(("acoustic", "audio", 3), ("geometric", "video", 2)), seed=0):
    rng = np.random.default_rng(seed)
    groups = tuple(FeatureGroup(n, Modality(m), rng.normal(size=(T, d))) for n, m, d in dims)
    return PersonRecord(pid, groups, rng.uniform(-1, 1, size=(T, 2)))


@pytest.fixture
def small_dataset():
    persons = tuple(make_person(f"p{i}", T=40, seed=i) for i in range(8))
    schema = tuple(g.spec for g in persons[0].groups)
    return MultimodalDataset(persons, 25.0, schema)


@pytest.fixture
def small_synthetic_config():
    return SyntheticConfig(
        persons=8,
        frames=300,
        groups=(
            GroupSpec("acoustic", Modality.AUDIO, 4),
            GroupSpec("mfcc", Modality.AUDIO, 3),
            GroupSpec("appearance", Modality.VIDEO, 3),
            GroupSpec("geometric", Modality.VIDEO, 2),
        ),
    )


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
