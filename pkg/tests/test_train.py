"""Training loops: argument validation, frozen-model guarantees,
budget compliance, log structure, and bitwise determinism."""

import numpy as np
import pytest

from gama.errors import CompatibilityError, ConfigError
from gama.nets import JointEncoder, SurrogateClassifier, build_vocab
from gama.promptbank import PromptBank
from gama.rng import Streams
from gama.scenegen import DatasetConfig, generate_dataset
from gama.tensor import Tensor, no_grad
from gama.train import (encoder_mean_rank, pretrain_joint_encoder,
                        train_generator, train_surrogate)

EPS = 10 / 255


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(DatasetConfig(n_samples=80, seed=5))


@pytest.fixture(scope="module")
def surrogate(ds):
    model, _ = train_surrogate(ds, 0, Streams(1), epochs=1)
    return model


def fake_bank(k=64, p=10, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((p, k)).astype(np.float32)
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return PromptBank(pairs=[(i, i + 1) for i in range(p)],
                      prompts=[f"t{i}" for i in range(p)], matrix=m,
                      encoder_fingerprint="0" * 8, k=k)


# surrogate training -------------------------------------------------------


def test_surrogate_loss_decreases(ds):
    _, history = train_surrogate(ds, 0, Streams(2), epochs=3)
    assert len(history) == 3
    assert history[-1] < history[0]


def test_surrogate_training_deterministic(ds):
    a, _ = train_surrogate(ds, 0, Streams(4), epochs=1)
    b, _ = train_surrogate(ds, 0, Streams(4), epochs=1)
    assert a.weight_checksum() == b.weight_checksum()


def test_surrogate_seed_changes_weights(ds):
    a, _ = train_surrogate(ds, 0, Streams(4), epochs=1)
    b, _ = train_surrogate(ds, 0, Streams(5), epochs=1)
    assert a.weight_checksum() != b.weight_checksum()


# encoder pretraining ------------------------------------------------------


def test_pretraining_beats_untrained_retrieval(ds):
    untrained = JointEncoder(build_vocab(ds.class_names),
                             Streams(8).stream("init", 0))
    base = encoder_mean_rank(untrained, ds, Streams(8))
    enc, _ = pretrain_joint_encoder(ds, Streams(8), epochs=2)
    trained = encoder_mean_rank(enc, ds, Streams(8))
    assert trained < base


def test_encoder_pretraining_deterministic(ds):
    a, _ = pretrain_joint_encoder(ds, Streams(9), epochs=1)
    b, _ = pretrain_joint_encoder(ds, Streams(9), epochs=1)
    assert a.weight_checksum() == b.weight_checksum()


# generator training -------------------------------------------------------


def test_generator_rejects_unknown_method(ds, surrogate):
    with pytest.raises(ConfigError):
        train_generator(ds, "nope", [surrogate], Streams(0))


def test_generator_needs_surrogates(ds):
    with pytest.raises(ConfigError):
        train_generator(ds, "ls_only", [], Streams(0))


def test_generator_encoder_and_bank_requirements(ds, surrogate):
    with pytest.raises(ConfigError):
        train_generator(ds, "gama", [surrogate], Streams(0))
    enc = JointEncoder(build_vocab(ds.class_names), Streams(0).stream("init", 0))
    with pytest.raises(ConfigError):
        train_generator(ds, "gama", [surrogate], Streams(0), encoder=enc)


def test_generator_rejects_narrow_bank(ds, surrogate):
    enc = JointEncoder(build_vocab(ds.class_names), Streams(0).stream("init", 0))
    with pytest.raises(CompatibilityError):
        train_generator(ds, "gama", [surrogate], Streams(0), encoder=enc,
                        bank=fake_bank(k=32), epochs=1)


def test_generator_rejects_bad_resample(ds, surrogate):
    with pytest.raises(ConfigError):
        train_generator(ds, "ls_only", [surrogate], Streams(0),
                        candidate_resample="never")


def test_generator_log_budget_and_frozen_surrogate(ds, surrogate):
    before = surrogate.weight_checksum()
    gen, log = train_generator(ds, "ls_only", [surrogate], Streams(3),
                               epochs=1, batch=16)
    assert surrogate.weight_checksum() == before
    n_train = len(ds.split_indices["train"])
    assert len(log) == -(-n_train // 16)
    assert {"step", "epoch", "lr", "total"} <= set(log[0])
    x = ds.images[ds.split_indices["test"]]
    with no_grad():
        adv = gen.forward(Tensor(x), EPS).data
    assert float(np.abs(adv - x).max()) <= EPS + 1e-6
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_generator_training_deterministic(ds, surrogate):
    a, _ = train_generator(ds, "ls_only", [surrogate], Streams(6), epochs=1)
    b, _ = train_generator(ds, "ls_only", [surrogate], Streams(6), epochs=1)
    assert a.weight_checksum() == b.weight_checksum()


def test_full_method_runs_and_freezes_encoder(ds, surrogate):
    enc, _ = pretrain_joint_encoder(ds, Streams(7), epochs=1)
    bank = fake_bank()
    enc_before = enc.weight_checksum()
    gen, log = train_generator(ds, "gama", [surrogate], Streams(7),
                               encoder=enc, bank=bank, epochs=1)
    assert enc.weight_checksum() == enc_before
    # the full loss carries every term in its breakdown
    assert {"l_s", "l_img", "l_txt"} <= set(log[0])


def test_ensemble_of_two_surrogates_runs(ds, surrogate):
    other, _ = train_surrogate(ds, 1, Streams(11), epochs=1)
    gen, log = train_generator(ds, "ls_only", [surrogate, other],
                               Streams(11), epochs=1)
    assert np.isfinite(log[-1]["total"])


@pytest.mark.parametrize("method", ["gap_bce", "cda_rel_bce"])
def test_baseline_methods_need_no_encoder(ds, surrogate, method):
    gen, log = train_generator(ds, method, [surrogate], Streams(12),
                               epochs=1)
    assert np.isfinite(log[-1]["total"])
    x = ds.images[:8]
    with no_grad():
        adv = gen.forward(Tensor(x), EPS).data
    assert float(np.abs(adv - x).max()) <= EPS + 1e-6
