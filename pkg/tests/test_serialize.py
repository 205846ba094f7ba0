import struct

import crc32c
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_dbn.data import LabeledPatchSet
from adaptive_dbn.dbn import DbnModel, OutputHead, StructureEvent, forward
from adaptive_dbn.rbm import RbmParams
from adaptive_dbn.serialize import (
    FORMAT_VERSION,
    MODEL_MAGIC,
    CorruptFileError,
    ModelFileError,
    VersionError,
    load_features,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_features,
    save_model,
)


def logged_model(sizes=(12, 7, 5), n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    layers = [RbmParams(rng.normal(size=a), rng.normal(size=b), rng.normal(size=(a, b)))
              for a, b in zip(sizes, sizes[1:])]
    log = [StructureEvent("layer-add", 0, 0, sizes[1] - 1, input_dim=sizes[0]),
           StructureEvent("generate", 0, 3, sizes[1], (2,))]
    log += [StructureEvent("layer-add", k, 9, b, input_dim=a)
            for k, (a, b) in enumerate(zip(sizes[1:], sizes[2:]), start=1)]
    head = OutputHead(rng.normal(size=(sizes[-1], n_classes)), rng.normal(size=n_classes))
    return DbnModel(layers, head, log, "gray-32-area")


def test_round_trip_outputs_are_bit_identical(tmp_path):
    model = logged_model()
    path = save_model(model, tmp_path / "m.adbn")
    loaded = load_model(path)
    x = np.random.default_rng(1).random((100, 12))
    assert np.array_equal(forward(model, x), forward(loaded, x))
    assert all(a.equals(b) for a, b in zip(model.layers, loaded.layers))
    assert [e.to_line() for e in loaded.structure_log] == [e.to_line() for e in model.structure_log]
    assert loaded.preprocess_digest == model.preprocess_digest
    assert model_to_bytes(loaded) == path.read_bytes()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.integers(2, 4),
       st.integers(0, 10 ** 6))
def test_round_trip_any_shape(hidden, n_classes, seed):
    rng = np.random.default_rng(seed)
    sizes = [5] + hidden
    layers = [RbmParams(rng.normal(size=a), rng.normal(size=b), rng.normal(size=(a, b)))
              for a, b in zip(sizes, sizes[1:])]
    model = DbnModel(layers, OutputHead(rng.normal(size=(sizes[-1], n_classes)),
                                        rng.normal(size=n_classes)))
    loaded = model_from_bytes(model_to_bytes(model))
    assert loaded.hidden_sizes == model.hidden_sizes and loaded.n_classes == n_classes
    assert np.array_equal(loaded.head.weights, model.head.weights)


def test_weights_are_stored_column_major():
    W = np.arange(6.0).reshape(2, 3)
    model = DbnModel([RbmParams(np.zeros(2), np.zeros(3), W)],
                     OutputHead(np.zeros((3, 2)), np.zeros(2)))
    blob = model_to_bytes(model)
    header = 8 + 4 + 4 * 4 + 4 + len(model.preprocess_digest.encode())
    offset = header + 8 * (2 + 3)
    stored = np.frombuffer(blob[offset:offset + 48], dtype="<f8")
    np.testing.assert_array_equal(stored, [0.0, 3.0, 1.0, 4.0, 2.0, 5.0])


def test_truncated_file_is_corrupt(tmp_path):
    path = save_model(logged_model(), tmp_path / "m.adbn")
    blob = path.read_bytes()
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(CorruptFileError):
            load_model(path)


def test_flipped_bit_fails_the_checksum():
    blob = bytearray(model_to_bytes(logged_model()))
    blob[len(blob) // 2] ^= 0x10
    with pytest.raises(CorruptFileError, match="checksum"):
        model_from_bytes(bytes(blob))


def test_version_error_names_both_versions():
    body = bytearray(model_to_bytes(logged_model())[:-4])
    body[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    blob = bytes(body) + struct.pack("<I", crc32c.crc32c(bytes(body)))
    with pytest.raises(VersionError) as info:
        model_from_bytes(blob)
    assert str(FORMAT_VERSION + 1) in str(info.value) and str(FORMAT_VERSION) in str(info.value)
    assert isinstance(info.value, ModelFileError)


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "f.adbf"
    save_features(LabeledPatchSet(np.zeros((2, 3)), [0, 1]), path)
    with pytest.raises(CorruptFileError, match="not a model"):
        load_model(path)


def test_log_that_disagrees_with_header_is_corrupt():
    model = logged_model()
    bad = DbnModel(model.layers, model.head, model.structure_log[:1] + model.structure_log[2:],
                   model.preprocess_digest)
    with pytest.raises(CorruptFileError, match="replay"):
        model_from_bytes(model_to_bytes(bad))


def test_magic_and_checksum_trailer():
    blob = model_to_bytes(logged_model())
    assert blob.startswith(MODEL_MAGIC)
    assert struct.unpack("<I", blob[-4:])[0] == crc32c.crc32c(blob[:-4])


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    data = LabeledPatchSet(rng.random((9, 4)), rng.integers(0, 3, 9), 3, "gray-2-area")
    loaded = load_features(save_features(data, tmp_path / "x.adbf"))
    assert np.array_equal(loaded.features, data.features)
    assert np.array_equal(loaded.labels, data.labels)
    assert loaded.n_classes == 3 and loaded.provenance == "gray-2-area"


def test_saving_leaves_no_temporary_files(tmp_path):
    save_model(logged_model(), tmp_path / "m.adbn")
    save_model(logged_model(seed=1), tmp_path / "m.adbn")
    assert [p.name for p in tmp_path.iterdir()] == ["m.adbn"]
