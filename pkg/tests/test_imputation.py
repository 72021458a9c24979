import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdes.data_model import FeatureGroup, Modality, PersonRecord, Standardizer, window_batch
from mmdes.imputation import (
    ImputationKind,
    ImputationMode,
    apply_imputation,
    compute_means,
)

from conftest import make_person

ZERO_AUDIO = ImputationMode(ImputationKind.ZERO, Modality.AUDIO)
MEAN_VIDEO = ImputationMode(ImputationKind.MEAN, Modality.VIDEO)


def _person(pid, values, modality="video", name="g"):
    values = np.asarray(values, dtype=float)
    return PersonRecord(pid, (FeatureGroup(name, modality, values),), np.zeros((len(values), 2)))


def test_compute_means():
    np.testing.assert_array_equal(compute_means([_person("a", [[1, 3], [3, 5]])])["g"], [2, 4])
    np.testing.assert_array_equal(compute_means([_person("a", np.zeros((4, 3)))])["g"], [0, 0, 0])
    pooled = compute_means([_person("a", [[1], [1]]), _person("b", [[3], [3]])])
    np.testing.assert_array_equal(pooled["g"], [2])
    with pytest.raises(ValueError):
        compute_means([])


def test_mode_parsing():
    assert ImputationMode.parse("none").kind is ImputationKind.NONE
    assert ImputationMode.parse("zero:audio") == ZERO_AUDIO
    assert ImputationMode.parse("MEAN:video") == MEAN_VIDEO
    assert MEAN_VIDEO.key == "mean:video"
    with pytest.raises(ValueError):
        ImputationMode.parse("zero")
    with pytest.raises(ValueError):
        ImputationMode(ImputationKind.NONE, Modality.AUDIO)


def test_none_is_identity():
    p = make_person("x")
    assert apply_imputation(p, ImputationMode()) is p


def test_zero_audio_on_sample():
    p = make_person("x", dims=(("a1", "audio", 4), ("a2", "audio", 5), ("v1", "video", 5)))
    s = window_batch(p, 1).samples()[3]
    out = apply_imputation(s, ZERO_AUDIO, layout=window_batch(p, 1).layout)
    np.testing.assert_array_equal(out.x[:9], 0.0)
    np.testing.assert_array_equal(out.x[9:14], s.x[9:14])
    np.testing.assert_array_equal(out.y, s.y)


def test_mean_video_broadcast_over_window():
    p = make_person("x", dims=(("acoustic", "audio", 3), ("geometric", "video", 2)))
    batch = window_batch(p, 2)
    out = apply_imputation(batch, MEAN_VIDEO, {"geometric": np.array([2.0, 4.0])})
    np.testing.assert_array_equal(out.group_slice("geometric"), np.tile([2.0, 4.0, 2.0, 4.0], (10, 1)))
    np.testing.assert_array_equal(out.group_slice("acoustic"), batch.group_slice("acoustic"))


def test_mean_requires_means_and_known_groups():
    p = make_person("x")
    with pytest.raises(ValueError):
        apply_imputation(p, MEAN_VIDEO)
    with pytest.raises(KeyError):
        apply_imputation(p, MEAN_VIDEO, {"other": np.zeros(2)})


def test_record_imputation_labels_untouched():
    p = make_person("x")
    out = apply_imputation(p, ZERO_AUDIO)
    np.testing.assert_array_equal(out.labels, p.labels)
    np.testing.assert_array_equal(out.group("acoustic").values, 0.0)
    assert out.group("geometric").values.tobytes() == p.group("geometric").values.tobytes()


modes = st.sampled_from(["zero:audio", "zero:video", "mean:audio", "mean:video"]).map(ImputationMode.parse)


@settings(max_examples=50, deadline=None)
@given(modes, st.integers(0, 10_000), st.integers(1, 4))
def test_idempotent_and_local(mode, seed, c):
    p = make_person("x", T=8, seed=seed)
    means = compute_means([make_person("t", T=8, seed=seed + 1)])
    batch = window_batch(p, c)
    once = apply_imputation(batch, mode, means)
    twice = apply_imputation(once, mode, means)
    np.testing.assert_array_equal(once.x, twice.x)
    other = batch.layout.modality_columns(Modality.VIDEO if mode.target_modality is Modality.AUDIO else Modality.AUDIO)
    assert once.x[:, other].tobytes() == batch.x[:, other].tobytes()
    rec = apply_imputation(p, mode, means)
    np.testing.assert_array_equal(window_batch(rec, c).x, once.x)


def test_mean_imputation_is_zero_after_standardization():
    train = [make_person(f"t{i}", T=30, seed=i) for i in range(3)]
    std = Standardizer.fit(train)
    means = compute_means(train)
    out = std.transform(apply_imputation(make_person("x", seed=9), MEAN_VIDEO, means))
    np.testing.assert_allclose(out.group("geometric").values, 0.0, atol=1e-12)
    zero = std.transform(apply_imputation(make_person("x", seed=9), ImputationMode.parse("zero:video"), means))
    assert not np.allclose(zero.group("geometric").values, 0.0)
