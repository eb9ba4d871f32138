import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgm.data import (FeatureSequence, FrameLabels, SynthSpec, gen_synthetic, load_dataset,
                      load_features, load_labels, save_dataset, save_features, save_labels,
                      summarize, write_manifest)
from tgm.errors import ConfigError, FormatError
from tgm.model import ModelConfig, TgmModel
from tgm.train import evaluate


def test_feature_round_trip_is_bit_exact(tmp_path):
    values = np.random.default_rng(0).normal(size=(1, 4, 7)).astype(np.float32)
    save_features(tmp_path / "f.tgmf", FeatureSequence(values))
    loaded = load_features(tmp_path / "f.tgmf")
    assert loaded.values.dtype == np.float64
    assert loaded.values.astype(np.float32).tobytes() == values.tobytes()


def test_feature_layout(tmp_path):
    values = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    save_features(tmp_path / "f.tgmf", FeatureSequence(values))
    blob = (tmp_path / "f.tgmf").read_bytes()
    assert blob[:4] == b"TGMF"
    assert struct.unpack_from("<IIII", blob, 4) == (1, 1, 2, 3)
    assert np.frombuffer(blob, "<f4", offset=20).tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), d=st.integers(1, 5), t=st.integers(1, 9), seed=st.integers(0, 999))
def test_feature_round_trip_property(tmp_path_factory, c, d, t, seed):
    path = tmp_path_factory.mktemp("f") / "x.tgmf"
    values = np.random.default_rng(seed).normal(size=(c, d, t)).astype(np.float32)
    save_features(path, FeatureSequence(values))
    assert load_features(path).values.astype(np.float32).tobytes() == values.tobytes()


def test_header_only_feature_file(tmp_path):
    path = tmp_path / "f.tgmf"
    path.write_bytes(b"TGMF" + struct.pack("<IIII", 1, 1, 4, 7))
    with pytest.raises(FormatError) as exc:
        load_features(path)
    assert exc.value.offset == 20
    assert "offset 20" in str(exc.value)


def test_feature_format_errors(tmp_path):
    path = tmp_path / "f.tgmf"
    save_features(path, FeatureSequence(np.zeros((1, 2, 3))))
    blob = path.read_bytes()
    for data, offset in [(b"XGMF" + blob[4:], 0), (blob[:4] + struct.pack("<I", 9) + blob[8:], 4),
                         (blob[:10], 10), (blob + b"\0", len(blob))]:
        path.write_bytes(data)
        with pytest.raises(FormatError) as exc:
            load_features(path)
        assert exc.value.offset == offset


def test_label_round_trip_and_layout(tmp_path):
    z = (np.random.default_rng(1).random((6, 3)) < 0.5).astype(np.uint8)
    save_labels(tmp_path / "l.tgml", FrameLabels(z))
    blob = (tmp_path / "l.tgml").read_bytes()
    assert blob[:4] == b"TGML"
    assert struct.unpack_from("<III", blob, 4) == (1, 3, 6)
    assert blob[16:] == z.tobytes()
    np.testing.assert_array_equal(load_labels(tmp_path / "l.tgml").z, z)


def test_all_zero_labels_are_legal(tmp_path):
    save_labels(tmp_path / "l.tgml", FrameLabels(np.zeros((5, 2))))
    assert not load_labels(tmp_path / "l.tgml").z.any()


def test_label_byte_above_one(tmp_path):
    path = tmp_path / "l.tgml"
    path.write_bytes(b"TGML" + struct.pack("<III", 1, 2, 2) + bytes([0, 1, 2, 0]))
    with pytest.raises(FormatError) as exc:
        load_labels(path)
    assert exc.value.offset == 18


def test_in_memory_validation():
    with pytest.raises(ConfigError):
        FeatureSequence(np.array([[[np.nan]]]))
    with pytest.raises(ConfigError):
        FeatureSequence(np.zeros((1, 2, 0)))
    with pytest.raises(ConfigError):
        FrameLabels(np.array([[2]]))


def test_manifest_round_trip(tmp_path):
    videos = gen_synthetic(SynthSpec(num_videos=3, t_min=20, t_max=25))
    manifest = save_dataset(videos, tmp_path)
    loaded = load_dataset(manifest)
    for (f, l), (f2, l2) in zip(videos, loaded):
        assert f.values.tobytes() == f2.values.tobytes()
        np.testing.assert_array_equal(l.z, l2.z)


def test_manifest_detects_length_mismatch(tmp_path):
    save_features(tmp_path / "a.tgmf", FeatureSequence(np.zeros((1, 2, 5))))
    save_labels(tmp_path / "a.tgml", FrameLabels(np.zeros((6, 1))))
    write_manifest(tmp_path / "m.json", [("a.tgmf", "a.tgml")])
    with pytest.raises(ConfigError, match="5 feature frames but 6 label frames"):
        load_dataset(tmp_path / "m.json")


def test_manifest_is_strict(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps([{"features": "a", "labels": "b", "x": 1}]))
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "m.json")


# --- synthetic generator ----------------------------------------------------------


def test_generator_is_deterministic():
    a = gen_synthetic(SynthSpec(num_videos=5, seed=3))
    b = gen_synthetic(SynthSpec(num_videos=5, seed=3))
    c = gen_synthetic(SynthSpec(num_videos=5, seed=4))
    assert all(x[0].values.tobytes() == y[0].values.tobytes() for x, y in zip(a, b))
    assert a[0][0].values.tobytes() != c[0][0].values.tobytes()


def test_default_spec_shape():
    spec = SynthSpec()
    videos = gen_synthetic(spec)
    assert len(videos) == 200
    assert all(80 <= f.t <= 120 and f.d == 16 and l.num_classes == 5 for f, l in videos)
    s = summarize(videos)
    assert s["videos"] == 200 and all(p > 0 for p in s["positives_per_class"])


def test_trigger_directions_are_orthonormal():
    dirs = SynthSpec(seed=7).trigger_directions()
    np.testing.assert_allclose(dirs.T @ dirs, np.eye(5))


@pytest.mark.parametrize("bad", [
    dict(delays=[0, 2]),
    dict(delays=[0, 2, 4, 6, -1]),
    dict(delays=[0, 2, 4, 6, 80]),
    dict(num_classes=20, delays=[0] * 20),
    dict(t_min=50, t_max=40),
])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        SynthSpec(**bad).validate()


def test_spec_from_dict_is_strict():
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"num_videos": 3, "colour": "red"})
    assert SynthSpec.from_dict({"num_videos": 3}).num_videos == 3


def test_zero_delay_is_linearly_detectable():
    # at the default noise level even the true direction gives mAP near 0.5, so use less noise
    spec = SynthSpec(delays=[0] * 5, noise_std=0.2, num_videos=40)
    weight = 20.0 * spec.trigger_directions().T
    model = TgmModel(ModelConfig(num_classes=5, d=16),
                     params={"classifier.weight": weight, "classifier.bias": np.full(5, -10.0)})
    assert evaluate(model, gen_synthetic(spec))["map"] > 0.95


def test_cross_correlation_peaks_at_delay():
    spec = SynthSpec(delays=[0, 2, 4, 6, 8], num_videos=60, seed=1)
    dirs = spec.trigger_directions()
    videos = gen_synthetic(spec)
    for c, delay in enumerate(spec.delays):
        scores = np.zeros(15)
        for f, l in videos:
            proj = dirs[:, c] @ f.values[0]
            z = l.z[:, c].astype(float)
            for lag in range(15):
                scores[lag] += np.dot(proj[:f.t - lag], z[lag:])
        assert int(np.argmax(scores)) == delay
