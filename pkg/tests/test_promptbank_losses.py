"""Prompt construction/retrieval against brute-force oracles, and the
loss family's closed-form identities and gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gama import losses as L
from gama import tensor as gt
from gama.errors import CompatibilityError, ConfigError, DataFormatError
from gama.nets import JointEncoder, build_vocab
from gama.optim import finite_diff_check
from gama.promptbank import (PromptBank, build_bank, build_prompts, least_similar,
                             load_bank, sample_candidates, save_bank,
                             verify_bank_matches_encoder)
from gama.tensor import Tensor

RNG = np.random.default_rng(123)
NAMES = ["disk", "ring", "square", "diamond", "cross", "ex"]


def unit_rows(p, k, rng):
    m = rng.standard_normal((p, k)).astype(np.float32)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_bank(p=12, k=64, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(i, i + 1) for i in range(p)]
    return PromptBank(pairs=pairs, prompts=[f"p{i}" for i in range(p)],
                      matrix=unit_rows(p, k, rng), encoder_fingerprint="deadbeef", k=k)


# prompt construction ------------------------------------------------------


def test_build_prompts_orders_upper_triangle():
    o = np.zeros((6, 6), dtype=np.uint8)
    for i, j in [(0, 1), (2, 5), (1, 3)]:
        o[i, j] = o[j, i] = 1
    pairs, prompts = build_prompts(NAMES, o)
    assert pairs == [(0, 1), (1, 3), (2, 5)]
    assert prompts[0] == "a photo depicts disk and ring"
    assert prompts[1] == "a photo depicts ring and diamond"
    assert prompts[2] == "a photo depicts square and ex"


def test_build_prompts_zero_matrix_raises():
    with pytest.raises(ConfigError):
        build_prompts(NAMES, np.zeros((6, 6), dtype=np.uint8))
    with pytest.raises(ConfigError):
        build_prompts(NAMES, np.triu(np.ones((6, 6), dtype=np.uint8), 1))  # asymmetric


def test_pair_count_is_half_the_set_bits():
    o = np.zeros((6, 6), dtype=np.uint8)
    for i, j in [(0, 1), (0, 2), (3, 4), (4, 5), (1, 2)]:
        o[i, j] = o[j, i] = 1
    pairs, _ = build_prompts(NAMES, o)
    assert len(pairs) == int(o.sum()) // 2 == 5


# retrieval ----------------------------------------------------------------


def test_least_similar_matches_argmin_oracle():
    bank = make_bank(p=20, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(50):
        rho = unit_rows(1, 64, rng)[0]
        cand = rng.choice(20, size=8, replace=False)
        row, emb = least_similar(rho, bank, cand)
        sims = {int(c): float(bank.matrix[c] @ rho) for c in cand}
        best = min(sims.items(), key=lambda kv: (kv[1], kv[0]))[0]
        assert row == best
        np.testing.assert_array_equal(emb, bank.matrix[row])


def test_least_similar_tie_breaks_to_lowest_row_index():
    bank = make_bank(p=5, seed=0)
    bank.matrix[4] = bank.matrix[1]  # duplicate rows => exact similarity tie
    # aim the query opposite row 1 so rows 1 and 4 share the minimum
    target = -bank.matrix[1]
    rho = (target / np.linalg.norm(target)).astype(np.float32)
    row, _ = least_similar(rho, bank, np.array([4, 2, 1]))
    assert row == 1
    row, _ = least_similar(rho, bank, np.array([1, 4]))
    assert row == 1


def test_sample_candidates_replacement_rule():
    bank = make_bank(p=6)
    rng = np.random.default_rng(0)
    no_rep = sample_candidates(bank, 6, rng)
    assert sorted(no_rep.tolist()) == list(range(6))
    rep = sample_candidates(bank, 13, np.random.default_rng(1))
    assert len(rep) == 13
    assert rep.min() >= 0 and rep.max() < 6
    with pytest.raises(ConfigError):
        sample_candidates(bank, 0, rng)


def test_bank_round_trip_and_fingerprint(tmp_path):
    vocab = build_vocab(NAMES)
    enc = JointEncoder(vocab, np.random.default_rng(11))
    enc_path = tmp_path / "enc.gamc"
    enc.save(enc_path, {"seed": 11})
    o = np.zeros((6, 6), dtype=np.uint8)
    for i, j in [(0, 1), (2, 3), (4, 5)]:
        o[i, j] = o[j, i] = 1
    bank = build_bank(enc, enc_path, NAMES, o)
    assert bank.matrix.shape == (3, 64)
    np.testing.assert_allclose(np.linalg.norm(bank.matrix, axis=1),
                               np.ones(3), rtol=1e-5)

    path = tmp_path / "bank.gamb"
    save_bank(bank, path)
    back = load_bank(path)
    assert back.pairs == bank.pairs
    assert back.prompts == bank.prompts
    np.testing.assert_array_equal(back.matrix, bank.matrix)
    verify_bank_matches_encoder(back, enc_path)

    enc.params["txt.l2.b"].data = enc.params["txt.l2.b"].data + 0.5
    enc.save(enc_path, {"seed": 11})
    with pytest.raises(CompatibilityError):
        verify_bank_matches_encoder(back, enc_path)

    blob = bytearray(path.read_bytes())
    blob[10] ^= 0xFF
    bad = tmp_path / "bad.gamb"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        load_bank(bad)


# losses -------------------------------------------------------------------


def test_loss_s_known_values():
    a = Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
    b = Tensor(np.array([[-1.0, 0.0]]), dtype=np.float64)
    assert abs(L.loss_s(a, a).item() - 1.0) < 1e-12
    assert abs(L.loss_s(a, b).item() + 1.0) < 1e-12


def test_loss_img_equals_cosine_identity():
    # for unit vectors, squared distance = 2 - 2 cos, so the image loss
    # must equal -(2 - 2 cos) / K
    rng = np.random.default_rng(5)
    for _ in range(20):
        k = int(rng.integers(2, 65))
        rho = unit_rows(1, k, rng).astype(np.float64)
        zt = rng.standard_normal((1, k))
        rn = rho[0] / np.linalg.norm(rho[0])
        zn = zt[0] / np.linalg.norm(zt[0])
        cos = float(rn @ zn)
        got = L.loss_img(Tensor(rho, dtype=np.float64), Tensor(zt, dtype=np.float64)).item()
        assert abs(got - (-(2.0 - 2.0 * cos) / k)) < 1e-9


def test_loss_txt_identity_at_equal_features():
    # with perturbed == clean features the hinge is exactly alpha and the
    # whole loss collapses to (|z - rho|^2 + alpha) / K
    rng = np.random.default_rng(6)
    for _ in range(20):
        k = int(rng.integers(2, 65))
        z = unit_rows(1, k, rng)
        rho = unit_rows(1, k, rng)
        alpha = float(rng.uniform(0.2, 2.0))
        expected = (float(((z - rho) ** 2).sum()) + alpha) / k
        got = L.loss_txt(Tensor(z, dtype=np.float64), Tensor(z, dtype=np.float64),
                         Tensor(rho, dtype=np.float64), alpha).item()
        assert abs(got - expected) < 1e-6


def test_loss_txt_spec_point():
    v = Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
    assert abs(L.loss_txt(v, v, v, 1.0).item() - 0.5) < 1e-6


def test_loss_txt_hinge_inactive_when_far():
    # opposite unit vectors are distance 2 apart > alpha = 1: hinge = 0
    z = np.array([[1.0, 0.0]])
    zt = np.array([[-1.0, 0.0]])
    rho = np.array([[0.0, 1.0]])
    got = L.loss_txt(Tensor(zt, dtype=np.float64), Tensor(z, dtype=np.float64),
                     Tensor(rho, dtype=np.float64), 1.0).item()
    assert abs(got - (2.0 / 2.0)) < 1e-9  # |zt - rho|^2 = 2, hinge 0, K = 2


def test_loss_gradients_against_central_differences():
    rng = np.random.default_rng(8)
    z = Tensor(rng.standard_normal((3, 8)), dtype=np.float64)
    rho_i = Tensor(unit_rows(3, 8, rng), dtype=np.float64)
    rho_t = Tensor(unit_rows(3, 8, rng), dtype=np.float64)
    start = Tensor(rng.standard_normal((3, 8)), dtype=np.float64)
    assert finite_diff_check(lambda t: L.loss_s(z, t), start) < 1e-6
    assert finite_diff_check(lambda t: L.loss_img(rho_i, t), start) < 1e-6
    assert finite_diff_check(lambda t: L.loss_txt(t, z, rho_t, 1.0), start) < 1e-6


def test_total_loss_arms_compose():
    mk = lambda v: Tensor(np.array(v), dtype=np.float64)
    parts = {"l_s": mk(0.5), "l_img": mk(-0.25), "l_txt": mk(0.125)}
    total, br = L.total_loss("gama", parts)
    assert abs(total.item() - 0.375) < 1e-12
    assert br["l_s"] == 0.5 and br["total"] == pytest.approx(0.375)

    total, br = L.total_loss("ablate_img_txt", parts)
    assert abs(total.item() - (-0.125)) < 1e-12
    assert br["l_s"] == 0.0

    total, br = L.total_loss("ablate_img_only", parts)
    assert abs(total.item() + 0.25) < 1e-12

    total, br = L.total_loss("ls_only", parts)
    assert abs(total.item() - 0.5) < 1e-12
    assert br["l_img"] == br["l_txt"] == 0.0

    total, br = L.total_loss("gap_bce", {"baseline": mk(-0.7)})
    assert abs(total.item() + 0.7) < 1e-12
    assert br["l_s"] == br["l_img"] == br["l_txt"] == 0.0

    with pytest.raises(ConfigError):
        L.total_loss("pgd", parts)


def test_baseline_gap_bce_closed_form_at_zero_logits():
    logits = Tensor(np.zeros((4, 6)))
    y = np.random.default_rng(0).integers(0, 2, (4, 6))
    got = L.baseline_loss("gap_bce", logits, None, y).item()
    assert abs(got + np.log(2.0)) < 1e-6


def test_baseline_cda_uses_logit_shift():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((3, 6)).astype(np.float32)
    pert = Tensor(base.copy())
    clean = Tensor(base.copy())
    y = rng.integers(0, 2, (3, 6))
    # zero shift => sigma(0) = 0.5 => -BCE = -ln 2
    got = L.baseline_loss("cda_rel_bce", pert, clean, y).item()
    assert abs(got + np.log(2.0)) < 1e-6
    with pytest.raises(ConfigError):
        L.baseline_loss("cda_rel_bce", pert, None, y)


def test_prob_floor_keeps_extreme_logits_finite():
    logits = Tensor(np.array([[1000.0, -1000.0]]))
    y = np.array([[0, 1]])
    got = L.baseline_loss("gap_bce", logits, None, y).item()
    assert np.isfinite(got)
    assert abs(got - np.log(L.PROB_FLOOR)) < 1e-3


def test_multilabel_bce_matches_manual():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 6))
    y = rng.integers(0, 2, (5, 6)).astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-logits))
    manual = -(y * np.log(s) + (1 - y) * np.log(1 - s)).mean()
    got = L.multilabel_bce_logits(Tensor(logits, dtype=np.float64), y).item()
    assert abs(got - manual) < 1e-9
    assert finite_diff_check(
        lambda t: L.multilabel_bce_logits(t, y),
        Tensor(logits, dtype=np.float64)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(0, 10 ** 6))
def test_loss_img_identity_property(k, seed):
    rng = np.random.default_rng(seed)
    rho = unit_rows(1, k, rng).astype(np.float64)
    zt = unit_rows(1, k, rng).astype(np.float64)
    rn = rho[0] / np.linalg.norm(rho[0])
    zn = zt[0] / np.linalg.norm(zt[0])
    cos = float(rn @ zn)
    got = L.loss_img(Tensor(rho, dtype=np.float64), Tensor(zt, dtype=np.float64)).item()
    assert abs(got - (-(2.0 - 2.0 * cos) / k)) < 1e-9
