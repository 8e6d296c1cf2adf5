"""Messages, metrics, keys, task training, and small-scale embeddings."""

import logging
import math

import numpy as np
import pytest

from wmlab import data, schemes
from wmlab.nets import WeightLayerKey, extract_features
from wmlab.schemes import (BitsMessage, HidingConfig, ImageMessage,
                           NonWmPool, ber, critic_emd_estimate, design_loss,
                           embedding_loss, hard_bits, load_key, load_message,
                           riga_extract, save_key, save_message, train,
                           uchida_extract)

logging.disable(logging.WARNING)


@pytest.fixture(scope="module")
def toy():
    # small and easy: keeps embedding tests at seconds
    return data.make_synthetic(seed=1, n_train=400, n_test=200, dim=8,
                               n_classes=4, spread=0.7)


def small_embed_kw():
    # 400-sample task at batch 25 gives the co-trained nets enough steps
    return dict(epochs=40, batch_size=25, eps_loss=1e-2, target_accuracy=0.9)


# ---------------------------------------------------------------------------
# messages and metrics
# ---------------------------------------------------------------------------

def test_bits_message_validation():
    with pytest.raises(ValueError):
        BitsMessage(np.array([0.0, 0.5, 1.0]))
    with pytest.raises(ValueError):
        BitsMessage(np.array([]))
    m = BitsMessage(np.array([0, 1, 1, 0]))
    assert m.t == 4


def test_image_message_validation():
    with pytest.raises(ValueError):
        ImageMessage(np.zeros(5), 2, 2)
    with pytest.raises(ValueError):
        ImageMessage(np.full(4, 1.5), 2, 2)
    m = ImageMessage(np.linspace(0, 1, 6), 3, 2)
    assert m.t == 6


def test_ber_examples():
    m = BitsMessage(np.array([1.0, 0, 1, 1]))
    assert ber(np.array([1.0, 0, 1, 1]), m) == 0.0
    assert ber(np.array([0.0, 1, 0, 0]), m) == 1.0
    # |0.9-1|=.1, |0.4-0|=.4, |0.2-1|=.8 err, |0.6-1|=.4
    assert ber(np.array([0.9, 0.4, 0.2, 0.6]), m) == 0.25
    # an offset of exactly 0.5 counts as correct: the indicator is strict
    assert ber(np.array([0.5, 0.5, 0.5, 0.5]), m) == 0.0
    with pytest.raises(ValueError):
        ber(np.array([0.5]), m)


def test_hard_bits_tie_reads_as_one():
    np.testing.assert_array_equal(hard_bits(np.array([0.5, 0.49, 0.51])),
                                  [1, 0, 1])


def test_embedding_loss_bits():
    m = BitsMessage(np.ones(3))
    sat = np.full(3, 1 - 1e-7)
    assert embedding_loss(sat, m) < 1e-6
    assert abs(embedding_loss(np.full(3, 0.5), m) - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        embedding_loss(np.ones(2), m)


def test_embedding_loss_image():
    m = ImageMessage(np.linspace(0, 1, 4), 2, 2)
    assert embedding_loss(m.pixels.copy(), m) == 0.0
    off = embedding_loss(np.clip(m.pixels + 0.1, 0, 1), m)
    assert off > 0


def test_message_files_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    bits = BitsMessage.random(19, rng)
    save_message(tmp_path / "bits.txt", bits)
    loaded = load_message(tmp_path / "bits.txt")
    assert isinstance(loaded, BitsMessage)
    np.testing.assert_array_equal(loaded.bits, bits.bits)
    img = ImageMessage.random(3, 4, rng)
    save_message(tmp_path / "img.txt", img)
    loaded = load_message(tmp_path / "img.txt")
    assert isinstance(loaded, ImageMessage)
    assert (loaded.width, loaded.height) == (3, 4)
    np.testing.assert_array_equal(loaded.pixels, img.pixels)


# ---------------------------------------------------------------------------
# extraction primitives
# ---------------------------------------------------------------------------

def test_uchida_extract_zero_weights():
    soft = uchida_extract(np.zeros(10), np.random.default_rng(0).normal(size=(4, 10)))
    np.testing.assert_array_equal(soft, np.full(4, 0.5))
    np.testing.assert_array_equal(hard_bits(soft), np.ones(4, dtype=int))


def test_uchida_extract_null_projection_row():
    q = np.random.default_rng(1).normal(size=8)
    soft = uchida_extract(q, np.zeros((1, 8)))
    assert soft[0] == 0.5


def test_uchida_extract_dim_mismatch():
    with pytest.raises(ValueError):
        uchida_extract(np.zeros(5), np.zeros((2, 4)))


def test_uchida_soft_values_shrink_toward_half_with_scale():
    rng = np.random.default_rng(2)
    q = rng.normal(size=16)
    z = rng.normal(size=(6, 16))
    full = np.abs(uchida_extract(q, z) - 0.5)
    tenth = np.abs(uchida_extract(0.1 * q, z) - 0.5)
    assert np.all(tenth <= full + 1e-12)


def test_riga_extract_untrained_well_formed(toy):
    from wmlab.nets import ExtractorNet
    ext = ExtractorNet.init([12, 8, 6, 5], np.random.default_rng(3))
    soft = riga_extract(np.random.default_rng(4).normal(size=12), ext)
    assert soft.shape == (5,)
    assert np.all((soft > 0) & (soft < 1))
    with pytest.raises(ValueError):
        riga_extract(np.zeros(11), ext)


# ---------------------------------------------------------------------------
# task training
# ---------------------------------------------------------------------------

def test_design_loss_uniform_and_perfect(toy):
    task = design_loss(toy)
    model = schemes.new_classifier(toy, 0)
    for w in model.params():
        w.data[:] = 0.0
    loss = task.batch_loss(model, np.arange(32))
    assert abs(loss.item() - math.log(toy.n_classes)) < 1e-12
    # near-one-hot logits on true labels
    from wmlab import tensor as T
    from wmlab.tensor import Tensor
    logits = np.full((8, toy.n_classes), -50.0)
    logits[np.arange(8), toy.y_train[:8]] = 50.0
    assert T.softmax_cross_entropy(Tensor(logits), toy.y_train[:8]).item() < 1e-12


def test_design_loss_empty_dataset():
    with pytest.raises(ValueError):
        schemes.TaskLoss(np.zeros((0, 4)), np.zeros(0, dtype=int), 3)


def test_train_rejects_zero_epochs(toy):
    model = schemes.new_classifier(toy, 0)
    with pytest.raises(ValueError):
        train(design_loss(toy), model, 0)


def test_train_deterministic_and_learns(toy):
    losses = []
    task = design_loss(toy)
    model = schemes.new_classifier(toy, 5)
    from wmlab import tensor as T
    for epoch in range(5):
        rng = np.random.default_rng(epoch)
        idx = rng.permutation(toy.x_train.shape[0])[:128]
        losses.append(task.batch_loss(model, idx).item())
        train(task, model, 1, seed=epoch)
    assert losses[-1] < losses[0]

    m1 = schemes.train_baseline(toy, epochs=3, seed=9)
    m2 = schemes.train_baseline(toy, epochs=3, seed=9)
    for a, b in zip(m1.params(), m2.params()):
        np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# embeddings at toy scale
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_pool(toy):
    models = [schemes.train_baseline(toy, epochs=10, seed=800 + i) for i in range(8)]
    return NonWmPool(np.stack([extract_features(m, WeightLayerKey(1)) for m in models]))


def test_uchida_embed_recovers_message(toy):
    msg = BitsMessage.random(16, np.random.default_rng(6))
    res = schemes.uchida_embed(toy, msg, seed=1, **small_embed_kw())
    assert res.final_ber == 0.0
    assert res.final_accuracy > 0.8
    soft = schemes.extract_message(res.model, res.key)
    assert ber(soft, msg) == 0.0
    # wrong-key extraction: mean BER over fresh random keys near one half
    rng = np.random.default_rng(7)
    q = extract_features(res.model, res.key.feature_key)
    bers = [ber(uchida_extract(q, rng.normal(size=res.key.matrix.shape)), msg)
            for _ in range(100)]
    assert 0.4 <= float(np.mean(bers)) <= 0.6


def test_uchida_embed_message_too_long(toy):
    msg = BitsMessage.random(5000, np.random.default_rng(8))
    with pytest.raises(ValueError):
        schemes.uchida_embed(toy, msg, seed=1, epochs=1)


def test_uchida_lambda_zero_leaves_message_unembedded(toy):
    msg = BitsMessage.random(64, np.random.default_rng(9))
    res = schemes.uchida_embed(toy, msg, lam=0.0, seed=2, **small_embed_kw())
    assert res.final_ber is not None and 0.2 <= res.final_ber <= 0.8


def test_riga_embed_toy(toy, toy_pool):
    msg = BitsMessage.random(12, np.random.default_rng(10))
    cfg = HidingConfig(nonwm_pool=toy_pool)
    res = schemes.riga_embed(toy, msg, cfg, hiding_on=True, seed=3,
                             extractor_hidden=(48, 24), detector_hidden=(32, 16),
                             **small_embed_kw())
    assert res.final_ber == 0.0
    assert res.final_embedding_loss < 1e-2
    assert res.final_accuracy > 0.85
    # determinism
    res2 = schemes.riga_embed(toy, msg, cfg, hiding_on=True, seed=3,
                              extractor_hidden=(48, 24), detector_hidden=(32, 16),
                              **small_embed_kw())
    assert res2.epochs_run == res.epochs_run
    for a, b in zip(res.model.params(), res2.model.params()):
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(res.key.extractor.params(), res2.key.extractor.params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_riga_embed_decoy_side_condition(toy, toy_pool):
    # the extractor maps each pool model to its own fixed decoy message
    msg = BitsMessage.random(12, np.random.default_rng(11))
    cfg = HidingConfig(nonwm_pool=toy_pool)
    res = schemes.riga_embed(toy, msg, cfg, hiding_on=False, seed=4,
                             extractor_hidden=(48, 24), epochs=40, batch_size=25,
                             eps_loss=0.0, target_accuracy=2.0)
    ss = np.random.SeedSequence([0x816A, 4])
    r_mr = np.random.default_rng(ss.spawn(6)[3])
    decoys = [schemes.random_like(msg, r_mr) for _ in range(len(toy_pool))]
    losses = [embedding_loss(riga_extract(toy_pool.raw[j], res.key.extractor),
                             decoys[j]) for j in range(len(toy_pool))]
    assert float(np.mean(losses)) < 0.1
    assert embedding_loss(schemes.extract_message(res.model, res.key), msg) < 0.1


def test_riga_embed_requires_pool(toy):
    msg = BitsMessage.random(8, np.random.default_rng(12))
    with pytest.raises(ValueError):
        schemes.riga_embed(toy, msg, HidingConfig(nonwm_pool=None), seed=0, epochs=1)


def test_riga_image_message(toy, toy_pool):
    img = ImageMessage.random(4, 4, np.random.default_rng(13))
    cfg = HidingConfig(nonwm_pool=toy_pool)
    res = schemes.riga_embed(toy, img, cfg, hiding_on=False, seed=5,
                             extractor_hidden=(48, 24), **small_embed_kw())
    assert res.final_embedding_loss < 1e-2
    assert res.final_ber is None


def test_deepsigns_embed_and_trigger_specificity(toy):
    msg = BitsMessage.random(16, np.random.default_rng(14))
    res = schemes.deepsigns_embed(toy, msg, seed=6, n_triggers=4, **small_embed_kw())
    assert res.final_ber == 0.0
    # resampled trigger sets degrade extraction toward chance
    rng = np.random.default_rng(15)
    from wmlab.nets import ActivationKey
    bers = []
    for _ in range(50):
        key2 = ActivationKey(res.key.feature_key.layer_index,
                             toy.sample_inputs(4, rng))
        q2 = extract_features(res.model, key2)
        bers.append(ber(uchida_extract(q2, res.key.matrix), msg))
    assert float(np.mean(bers)) > 0.2


def test_deepsigns_zero_triggers_zero_biases_gives_half(toy):
    msg = BitsMessage.random(8, np.random.default_rng(16))
    res = schemes.deepsigns_embed(toy, msg, seed=7, epochs=1, eps_loss=0.0,
                                  target_accuracy=2.0)
    model = res.model
    for b in model.biases:
        b.data[:] = 0.0
    from wmlab.nets import ActivationKey
    key = ActivationKey(1, np.zeros((16, toy.input_dim)))
    q = extract_features(model, key)
    np.testing.assert_array_equal(q, np.zeros_like(q))
    soft = uchida_extract(q, res.key.matrix)
    np.testing.assert_array_equal(soft, np.full(8, 0.5))


def test_embed_result_metrics_recomputable(toy, toy_pool):
    msg = BitsMessage.random(8, np.random.default_rng(17))
    cfg = HidingConfig(nonwm_pool=toy_pool)
    res = schemes.riga_embed(toy, msg, cfg, hiding_on=False, seed=8,
                             extractor_hidden=(32, 16), **small_embed_kw())
    soft = schemes.extract_message(res.model, res.key)
    assert embedding_loss(soft, msg) == res.final_embedding_loss
    assert ber(soft, msg) == res.final_ber
    assert [r["epoch"] for r in res.curves] == list(range(1, res.epochs_run + 1))


# ---------------------------------------------------------------------------
# key files
# ---------------------------------------------------------------------------

def test_key_file_roundtrip(tmp_path, toy, toy_pool):
    msg = BitsMessage.random(8, np.random.default_rng(18))
    res_u = schemes.uchida_embed(toy, msg, seed=9, epochs=2, eps_loss=0.0,
                                 target_accuracy=2.0)
    save_key(tmp_path / "u.key", res_u.key)
    back = load_key(tmp_path / "u.key")
    assert back.scheme == "uchida"
    np.testing.assert_array_equal(back.matrix, res_u.key.matrix)
    assert back.feature_key.layer_index == res_u.key.feature_key.layer_index
    np.testing.assert_array_equal(schemes.extract_message(res_u.model, back),
                                  schemes.extract_message(res_u.model, res_u.key))

    res_d = schemes.deepsigns_embed(toy, msg, seed=10, epochs=2, eps_loss=0.0,
                                    target_accuracy=2.0)
    save_key(tmp_path / "d.key", res_d.key)
    back = load_key(tmp_path / "d.key")
    np.testing.assert_array_equal(back.feature_key.trigger_inputs,
                                  res_d.key.feature_key.trigger_inputs)
    np.testing.assert_array_equal(schemes.extract_message(res_d.model, back),
                                  schemes.extract_message(res_d.model, res_d.key))

    cfg = HidingConfig(nonwm_pool=toy_pool)
    res_r = schemes.riga_embed(toy, msg, cfg, hiding_on=False, seed=11,
                               extractor_hidden=(32, 16), epochs=2,
                               eps_loss=0.0, target_accuracy=2.0)
    save_key(tmp_path / "r.key", res_r.key)
    back = load_key(tmp_path / "r.key")
    assert back.scheme == "riga"
    np.testing.assert_array_equal(schemes.extract_message(res_r.model, back),
                                  schemes.extract_message(res_r.model, res_r.key))


# ---------------------------------------------------------------------------
# hiding machinery
# ---------------------------------------------------------------------------

def test_hide_step_indistinguishable_distributions():
    from wmlab.nets import DetectorNet
    from wmlab.optim import AdamState
    rng = np.random.default_rng(19)
    det = DetectorNet.init([16, 24, 12, 1], np.random.default_rng(20))
    cfg = HidingConfig(nonwm_pool=NonWmPool(rng.normal(size=(4, 16))))
    state = AdamState(lr=1e-3, beta1=0.5)
    for _ in range(300):
        schemes.hide_step(rng.normal(size=16), det, rng.normal(size=16), cfg, state)
    # same distribution on both sides: detector cannot separate fresh pairs
    wm = np.sort(rng.normal(size=(64, 16)), axis=1)[:, ::-1]
    non = np.sort(rng.normal(size=(64, 16)), axis=1)[:, ::-1]
    acc = 0.5 * ((det.score_np(non)[:, 0] >= 0.5).mean()
                 + (det.score_np(wm)[:, 0] < 0.5).mean())
    assert 0.3 <= acc <= 0.7
    # critic mode keeps every parameter inside the clip limit
    cfg2 = HidingConfig(nonwm_pool=cfg.nonwm_pool, critic_mode="wasserstein")
    for _ in range(20):
        schemes.hide_step(rng.normal(size=16), det, rng.normal(size=16), cfg2, state)
    for p in det.params():
        assert np.abs(p.data).max() <= cfg2.clip_limit + 1e-15


def test_hide_step_empty_pool_sample():
    from wmlab.nets import DetectorNet
    from wmlab.optim import AdamState
    det = DetectorNet.init([4, 4, 2, 1], np.random.default_rng(0))
    cfg = HidingConfig(nonwm_pool=NonWmPool(np.zeros((1, 4))))
    with pytest.raises(ValueError):
        schemes.hide_step(np.ones(4), det, np.array([]), cfg, AdamState())


def test_hiding_config_validation():
    with pytest.raises(ValueError):
        HidingConfig(lambda1=-0.1)
    with pytest.raises(ValueError):
        HidingConfig(clip_limit=0.0)
    with pytest.raises(ValueError):
        HidingConfig(critic_mode="other")


def test_critic_emd_identical_samples_zero():
    rng = np.random.default_rng(21)
    a = rng.normal(size=64)
    assert critic_emd_estimate(a, a, steps=50) == 0.0


def test_critic_emd_size_mismatch():
    with pytest.raises(ValueError):
        critic_emd_estimate(np.zeros(4), np.zeros(5), steps=1)
