"""Networks, feature keys, and the weight file format."""

import numpy as np
import pytest

from wmlab import nets
from wmlab.nets import (ActivationKey, DetectorNet, ExtractorNet, Mlp,
                        MlpClassifier, WeightLayerKey, arch_hash,
                        extract_features, extract_features_t, load_weights,
                        pack_weights, save_weights, sorted_features,
                        unpack_weights)
from wmlab.tensor import Tensor


def make_model(dims=(6, 4, 3), seed=0):
    return MlpClassifier.init(list(dims), np.random.default_rng(seed))


def test_zero_weight_model_gives_zero_logits():
    m = make_model()
    for w in m.weights:
        w.data[:] = 0.0
    out = m.logits_np(np.random.default_rng(1).normal(size=(5, 6)))
    np.testing.assert_array_equal(out, np.zeros((5, 3)))


def test_single_example_matches_batch_of_one():
    m = make_model(seed=3)
    x = np.random.default_rng(2).normal(size=(1, 6))
    a = m.logits_np(x)
    b = m.classify(Tensor(x)).data
    np.testing.assert_array_equal(a, b)


def test_classify_shape_mismatch():
    m = make_model()
    with pytest.raises(ValueError):
        m.logits_np(np.zeros((2, 5)))  # wrong input width


def test_weight_layer_features_row_major():
    m = MlpClassifier(
        [4, 3, 2],
        [(np.arange(12.0).reshape(4, 3), np.zeros(3)),
         (np.zeros((3, 2)), np.zeros(2))])
    q = extract_features(m, WeightLayerKey(0))
    np.testing.assert_array_equal(q, np.arange(12.0))
    assert q.size == 12


def test_activation_features_zero_inputs_zero_biases():
    m = make_model(seed=5)
    for b in m.biases:
        b.data[:] = 0.0
    key = ActivationKey(0, np.zeros((3, 6)))
    np.testing.assert_array_equal(extract_features(m, key), np.zeros(3 * 4))


def test_feature_extraction_deterministic():
    m = make_model(seed=7)
    key = ActivationKey(1, np.random.default_rng(0).normal(size=(4, 6)))
    np.testing.assert_array_equal(extract_features(m, key),
                                  extract_features(m, key))


def test_feature_key_out_of_range():
    m = make_model()
    with pytest.raises(IndexError):
        extract_features(m, WeightLayerKey(5))
    with pytest.raises(IndexError):
        extract_features(m, ActivationKey(2, np.zeros((2, 6))))


def test_tensor_features_match_numpy_features():
    m = make_model(seed=11)
    rng = np.random.default_rng(4)
    for key in (WeightLayerKey(1), ActivationKey(0, rng.normal(size=(3, 6)))):
        qt = extract_features_t(m, key)
        np.testing.assert_allclose(qt.data.reshape(-1), extract_features(m, key))


def test_weight_layer_features_linear_in_weights():
    m = make_model(seed=13)
    q1 = extract_features(m, WeightLayerKey(1))
    for w in m.weights:
        w.data *= 3.0
    q3 = extract_features(m, WeightLayerKey(1))
    np.testing.assert_allclose(q3, 3.0 * q1)


def test_sorted_features_examples():
    np.testing.assert_array_equal(sorted_features(np.array([0.3, -0.1, 0.5])),
                                  [0.5, 0.3, -0.1])
    s = sorted_features(np.array([2.0, 1.0, 0.0]))
    np.testing.assert_array_equal(sorted_features(s), s)
    with pytest.raises(ValueError):
        sorted_features(np.array([]))


def test_sorted_features_neuron_permutation_invariant():
    rng = np.random.default_rng(17)
    m = make_model(seed=19)
    base = sorted_features(extract_features(m, WeightLayerKey(1)))
    for _ in range(5):
        perm = rng.permutation(m.dims[1])
        m2 = m.clone()
        # permute hidden neurons: rows of layer 1 and columns of layer 0
        m2.weights[1].data[:] = m2.weights[1].data[perm]
        m2.weights[0].data[:] = m2.weights[0].data[:, perm]
        m2.biases[0].data[:] = m2.biases[0].data[perm]
        np.testing.assert_array_equal(
            sorted_features(extract_features(m2, WeightLayerKey(1))), base)


def test_extractor_output_strictly_inside_unit_interval():
    rng = np.random.default_rng(23)
    ext = ExtractorNet.init([10, 8, 6, 4], rng)
    for scale in (1.0, 100.0, 10000.0):
        out = ext.extract_np(rng.normal(size=10) * scale)
        assert np.all(out > 0.0) and np.all(out < 1.0)


def test_detector_modes():
    rng = np.random.default_rng(29)
    det = DetectorNet.init([5, 4, 3, 1], rng)
    x = rng.normal(size=(2, 5))
    probs = det.score_np(x)
    assert np.all((probs > 0) & (probs < 1))
    raw = det.score_np(x, critic=True)
    from wmlab import kernels
    np.testing.assert_allclose(kernels.sigmoid(raw), probs)


def test_weight_roundtrip_bit_exact(tmp_path):
    for cls, dims in ((MlpClassifier, [7, 5, 3]), (ExtractorNet, [6, 4, 4, 2]),
                      (DetectorNet, [8, 4, 2, 1])):
        net = cls.init(dims, np.random.default_rng(31))
        path = tmp_path / f"{cls.__name__}.bin"
        save_weights(path, net, seed=99)
        loaded, seed = load_weights(path, cls)
        assert seed == 99
        assert loaded.dims == net.dims
        for (w1, b1), (w2, b2) in zip(net.layer_arrays(), loaded.layer_arrays()):
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(b1, b2)
        assert path.read_bytes() == pack_weights(net.dims, net.layer_arrays(), 99)


def test_weight_blob_trailing_bytes_rejected():
    net = make_model()
    blob = pack_weights(net.dims, net.layer_arrays(), 0)
    with pytest.raises(ValueError):
        unpack_weights(blob + b"\x00")


def test_arch_hash_distinguishes():
    assert arch_hash([4, 3, 2]) != arch_hash([4, 3, 3])
    assert arch_hash([4, 3, 2]) == arch_hash([4, 3, 2])


def test_mlp_layer_validation():
    with pytest.raises(ValueError):
        Mlp([4, 3], [(np.zeros((4, 2)), np.zeros(2))])
    with pytest.raises(ValueError):
        Mlp([4, 3], [])


def test_clone_is_independent():
    m = make_model(seed=37)
    c = m.clone()
    c.weights[0].data[:] = 0.0
    assert m.weights[0].data.any()
