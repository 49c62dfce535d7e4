import numpy as np
import pytest

from app.encoders import (
    EncoderDims,
    FeatureVector,
    embed,
    embed_texts,
    encode,
    encode_batch,
    featurize_text,
    fnv1a_64,
    init_dual_encoder,
    init_encoder,
    load_dual_encoder,
    save_dual_encoder,
    tokenize,
)
from app.errors import MissingArtifactError, ShapeError


def test_fnv1a_reference_values():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


def test_tokenize_lowercases_and_splits():
    assert tokenize("A red-Car, parked_here!") == ["a", "red", "car", "parked", "here"]


def test_featurize_text():
    vector = featurize_text("red car red", 16)
    assert vector.source == "text-hashed"
    assert not vector.degenerate
    assert np.linalg.norm(vector.values) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(vector.values, featurize_text("RED car, red", 16).values)

    empty = featurize_text("  ...  ", 16)
    assert empty.degenerate
    assert not np.any(empty.values)


def test_init_is_deterministic_and_xavier_bounded(dims):
    a = init_encoder(5, dims)
    b = init_encoder(5, dims)
    for la, lb, (fan_in, fan_out) in zip(a.layers, b.layers, dims.layer_shapes()):
        assert np.array_equal(la.weight, lb.weight)
        assert np.max(np.abs(la.weight)) <= np.sqrt(6.0 / (fan_in + fan_out))
        assert not np.any(la.bias)
    model = init_dual_encoder(5, dims)
    assert not np.array_equal(model.vision.layers[0].weight, model.text.layers[0].weight)


def test_encode_outputs_unit_vectors(model, dims):
    rng = np.random.default_rng(0)
    features = rng.standard_normal((6, dims.d_in)).astype(np.float32)
    out = encode_batch(model.vision, features).data
    assert out.shape == (6, dims.d_e)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_single_and_batched_encoding_are_bit_identical(model, dims):
    rng = np.random.default_rng(1)
    features = rng.standard_normal((20, dims.d_in)).astype(np.float32)
    batched = embed(model.vision, features, batch_size=7)
    for i in (0, 6, 7, 19):
        single = encode(model.vision, FeatureVector(features[i], "image-synthetic")).data
        assert np.array_equal(single.astype(np.float32), batched[i])


def test_encode_rejects_wrong_dimension(model):
    with pytest.raises(ShapeError):
        encode(model.text, FeatureVector(np.ones(5, dtype=np.float32), "text-hashed"))


def test_imported_vectors_are_only_normalized(model, dims):
    raw = np.arange(1, dims.d_e + 1, dtype=np.float32)
    out = encode(model.text, FeatureVector(raw, "imported")).data
    assert np.allclose(out, raw / np.linalg.norm(raw))


def test_embed_texts_flags_empty_texts(model):
    embeddings, mask = embed_texts(model.text, ["red car", "", "blue boat"])
    assert mask.tolist() == [False, True, False]
    assert not np.any(embeddings[1])
    assert np.linalg.norm(embeddings[0]) == pytest.approx(1.0, abs=1e-6)


def test_dual_encoder_file_round_trip(tmp_path, model):
    save_dual_encoder(model, tmp_path)
    loaded = load_dual_encoder(tmp_path)
    for original, restored in zip(model.vision.layers + model.text.layers, loaded.vision.layers + loaded.text.layers):
        assert np.array_equal(original.weight, restored.weight)
        assert np.array_equal(original.bias, restored.bias)


def test_missing_encoder_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_dual_encoder(tmp_path / "nowhere")


def test_relu_towers(dims):
    model = init_dual_encoder(2, EncoderDims(**{**dims.model_dump(), "nonlinearity": "relu"}))
    out = embed(model.vision, np.random.default_rng(2).standard_normal((3, dims.d_in)))
    assert out.shape == (3, dims.d_e)
