import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ohnem_loss_oracle, ohnem_oracle
from pyrseg import tensor as T
from pyrseg.losses import (hard_negative_count, inverse_frequency_weights, ohnem_loss, ohnem_select, select_batch,
                           total_loss, weighted_cross_entropy)
from pyrseg.tensor import Tensor


def plain_ce(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.take_along_axis(logp, labels[:, None].astype(int), axis=1).mean())


# ---------------------------------------------------------------- weighted CE

def test_uniform_logits_give_ln2():
    loss = weighted_cross_entropy(Tensor(np.zeros((2, 2, 4, 4))), np.zeros((2, 4, 4), int), (1, 1))
    assert abs(loss.item() - math.log(2)) < 1e-6


def test_confident_logits_give_zero():
    labels = np.random.default_rng(0).integers(0, 2, (1, 5, 5))
    logits = np.where(np.stack([labels == 0, labels == 1], axis=1), 50.0, -50.0)
    assert weighted_cross_entropy(Tensor(logits), labels, (1, 1)).item() < 1e-12


def test_doubling_weights_doubles_loss(rng):
    logits, labels = rng.standard_normal((2, 2, 6, 6)), rng.integers(0, 2, (2, 6, 6))
    a = weighted_cross_entropy(Tensor(logits), labels, (0.3, 1.7)).item()
    b = weighted_cross_entropy(Tensor(logits), labels, (0.6, 3.4)).item()
    assert b == 2 * a


def test_unit_weights_equal_plain_ce(rng):
    logits, labels = rng.standard_normal((3, 2, 7, 5)).astype(np.float32), rng.integers(0, 2, (3, 7, 5))
    assert abs(weighted_cross_entropy(Tensor(logits), labels, (1, 1)).item() - plain_ce(logits, labels)) < 1e-7


def test_large_logits_are_finite(rng):
    logits = rng.choice([-1e4, 1e4], size=(2, 2, 4, 4))
    labels = rng.integers(0, 2, (2, 4, 4))
    assert math.isfinite(weighted_cross_entropy(Tensor(logits), labels, (1, 1)).item())
    assert math.isfinite(ohnem_loss(Tensor(logits), labels).item())


def test_label_out_of_range():
    with pytest.raises(ValueError, match="label"):
        weighted_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2), (1, 1))


def test_inverse_frequency_weights():
    labels = np.zeros((1, 10, 10), int)
    labels[0, :2, :5] = 1  # 10 foreground of 100
    w = inverse_frequency_weights(labels, 2)
    np.testing.assert_allclose(w, [100 / (2 * 90), 100 / (2 * 10)])
    np.testing.assert_array_equal(inverse_frequency_weights(np.zeros((1, 4, 4), int), 2), [0.5, 0.0])
    tiny = np.zeros((1, 100, 100), int)
    tiny[0, 0, 0] = 1
    assert inverse_frequency_weights(tiny, 2)[1] == 10.0


# ---------------------------------------------------------------- OHNEM selection

def test_count_formula_examples():
    assert hard_negative_count(10, 1000) == 20
    assert hard_negative_count(0, 1000) == 5
    assert hard_negative_count(0, 12) == 3
    assert hard_negative_count(400, 100) == 100
    assert hard_negative_count(5, 0) == 0


def test_top_scores_selected():
    sel = ohnem_select(np.array([0.9, 0.1, 0.8, 0.2]), np.zeros(4, int))
    # four background voxels alone give c_hn = min(5, 4 // 4) = 1
    assert sel.c_hn == 1 and list(sel.selected_bg_indices) == [0]
    # one foreground voxel makes c_hn = 2; the first four background scores win over the 0.5 padding
    sel = ohnem_select(np.array([0.9, 0.1, 0.8, 0.2, 0.5, 0.5, 0.5, 0.5]),
                       np.array([0, 0, 0, 0, 1, 0, 0, 0]))
    assert sel.c_p == 1 and sel.c_hn == 2
    assert list(sel.selected_bg_indices) == [0, 2]


def test_ties_go_to_lower_index():
    sel = ohnem_select(np.full(10, 0.5), np.array([1] + [0] * 9))
    assert list(sel.selected_bg_indices) == [1, 2]


def test_selection_invariants(rng):
    for _ in range(50):
        probs = rng.random(64)
        labels = (rng.random(64) < rng.uniform(0, 0.5)).astype(int)
        sel = ohnem_select(probs, labels)
        assert sel.c_p + sel.c_n == 64
        assert len(sel.selected_bg_indices) == sel.c_hn == min(max(2 * sel.c_p, min(5, sel.c_n // 4)), sel.c_n)
        assert (labels[sel.selected_bg_indices] == 0).all()
        rest = np.setdiff1d(np.flatnonzero(labels == 0), sel.selected_bg_indices)
        if len(rest) and sel.c_hn:
            assert probs[rest].max() <= probs[sel.selected_bg_indices].min()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_selection_invariant_to_monotone_transform(seed):
    r = np.random.default_rng(seed)
    probs = r.random(100)
    labels = (r.random(100) < 0.1).astype(int)
    a = ohnem_select(probs, labels).selected_bg_indices
    b = ohnem_select(probs ** 2, labels).selected_bg_indices
    assert np.array_equal(a, b)


def test_selection_matches_oracle_with_ties(rng):
    for _ in range(200):
        probs = rng.integers(0, 4, 40) / 4.0  # heavy ties
        labels = (rng.random(40) < 0.15).astype(int)
        sel = ohnem_select(probs, labels)
        c_p, c_n, c_hn, idx = ohnem_oracle(probs, labels)
        assert (sel.c_p, sel.c_n, sel.c_hn) == (c_p, c_n, c_hn)
        assert list(sel.selected_bg_indices) == idx


# ---------------------------------------------------------------- OHNEM loss

def test_ohnem_loss_matches_oracle(rng):
    for _ in range(20):
        logits = rng.standard_normal((2, 2, 16, 16)).astype(np.float32) * 3
        labels = (rng.random((2, 16, 16)) < rng.uniform(0, 0.2)).astype(int)
        assert abs(ohnem_loss(Tensor(logits), labels).item() - ohnem_loss_oracle(logits, labels)) < 1e-6


def test_all_foreground_is_plain_ce(rng):
    logits = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    labels = np.ones((1, 5, 5), int)
    assert abs(ohnem_loss(Tensor(logits), labels).item() - plain_ce(logits, labels)) < 1e-6


def test_non_selected_voxels_get_zero_gradient(rng):
    logits = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    labels = np.zeros((1, 8, 8), int)
    labels[0, 3, 3] = 1
    (sel,) = select_batch(logits, labels)
    T.backward(ohnem_loss(logits, labels))
    g = np.abs(logits.grad[0]).sum(axis=0).ravel()
    member = np.zeros(64, bool)
    member[sel.selected_bg_indices] = True
    member[3 * 8 + 3] = True
    assert (g[~member] == 0).all() and (g[member] > 0).all()


def test_permutation_equivariance(rng):
    logits = rng.standard_normal((1, 2, 16, 16)).astype(np.float32)
    labels = (rng.random((1, 16, 16)) < 0.1).astype(int)
    perm = rng.permutation(256)
    pl = logits.reshape(1, 2, 256)[:, :, perm].reshape(1, 2, 16, 16)
    plab = labels.reshape(1, 256)[:, perm].reshape(1, 16, 16)
    a = ohnem_loss(Tensor(logits), labels).item()
    b = ohnem_loss(Tensor(pl), plab).item()
    assert abs(a - b) < 1e-6


def test_frozen_selection_is_used(rng):
    logits = Tensor(rng.standard_normal((1, 2, 8, 8)))
    labels = np.zeros((1, 8, 8), int)
    frozen = select_batch(Tensor(-logits.data), labels)
    assert ohnem_loss(logits, labels, selections=frozen).item() != ohnem_loss(logits, labels).item()


# ---------------------------------------------------------------- total loss

def test_aux_weight_zero_is_main_only(rng):
    main, aux = Tensor(rng.standard_normal((2, 2, 6, 6))), Tensor(rng.standard_normal((2, 2, 6, 6)))
    labels = (rng.random((2, 6, 6)) < 0.2).astype(int)
    assert total_loss(main, aux, labels, "ohnem", 0.0).item() == pytest.approx(ohnem_loss(main, labels).item(), abs=1e-7)


def test_weighted_mode_identical_heads_doubles(rng):
    logits = Tensor(rng.standard_normal((2, 2, 4, 4)))
    labels = np.zeros((2, 4, 4), int)
    labels[:, :2] = 1  # balanced: both class weights are 1
    main = weighted_cross_entropy(logits, labels, (1, 1)).item()
    assert total_loss(logits, logits, labels, "weighted_ce", 1.0).item() == pytest.approx(2 * main, rel=1e-6)


def test_total_loss_rejects_bad_arguments(rng):
    x, labels = Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2), int)
    with pytest.raises(ValueError):
        total_loss(x, x, labels, "ohnem", -1.0)
    with pytest.raises(ValueError):
        total_loss(x, x, labels, "focal")
