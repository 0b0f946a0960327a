import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectkit import diffcore as dc
from affectkit.contrastive import (
    ContrastiveConfig,
    ContrastiveError,
    cross_attention_pool,
    fine_grained_loss,
    global_loss,
    info_nce_symmetric,
    pool_regions,
    region_contrastive_loss,
    summary_loss,
)
from affectkit.embedding import EmbeddingBatch, encode_dataset, make_synthetic_dataset, normalize_batch


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _batch(n=4, d=8, m=5, seed=0, tau=0.5):
    rng = np.random.default_rng(seed)
    arrays = {
        "image_global": rng.normal(size=(n, d)),
        "image_patches": rng.normal(size=(n, m, d)),
        "text_full": rng.normal(size=(n, d)),
        "text_summary": rng.normal(size=(n, d)),
        "text_stimuli": rng.normal(size=(n, 3, d)),
    }
    return normalize_batch(EmbeddingBatch.from_arrays(arrays, tau=tau))


def _ref_info_nce(S, tau):
    """Loop-based symmetric InfoNCE."""
    n = S.shape[0]
    L = S / tau
    rows = cols = 0.0
    for i in range(n):
        rows += -math.log(math.exp(L[i, i]) / sum(math.exp(L[i, j]) for j in range(n)))
        cols += -math.log(math.exp(L[i, i]) / sum(math.exp(L[j, i]) for j in range(n)))
    return (rows / n + cols / n) / 2


@pytest.mark.parametrize("s", [-1.0, 0.0, 0.3, 1.0])
def test_single_item_loss_is_zero(s):
    assert info_nce_symmetric(np.array([[s]]), 0.07).item() == 0.0


def test_identity_two_by_two():
    assert info_nce_symmetric(np.eye(2), 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert info_nce_symmetric(np.eye(2), 1.0).item() == pytest.approx(0.31326, abs=1e-5)


def test_all_ones_gives_log_n():
    assert info_nce_symmetric(np.ones((2, 2)), 0.3).item() == pytest.approx(math.log(2), abs=1e-12)


def test_info_nce_errors():
    with pytest.raises(ContrastiveError):
        info_nce_symmetric(np.ones((2, 3)), 1.0)
    with pytest.raises(ContrastiveError):
        info_nce_symmetric(np.eye(2), 0.0)


@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.05, 2.0))
@settings(max_examples=40, deadline=None)
def test_info_nce_matches_loop_reference_and_is_nonnegative(seed, n, tau):
    S = np.clip(np.random.default_rng(seed).uniform(-1, 1, size=(n, n)), -1, 1)
    got = info_nce_symmetric(S, tau).item()
    assert got >= 0
    assert got == pytest.approx(_ref_info_nce(S, tau), rel=1e-10, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 6))
@settings(max_examples=40, deadline=None)
def test_info_nce_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, size=(n, n))
    p = rng.permutation(n)
    assert info_nce_symmetric(S[p][:, p], 0.2).item() == pytest.approx(info_nce_symmetric(S, 0.2).item(), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_perfecting_a_positive_never_increases_loss(seed, n, i):
    i %= n
    S = np.random.default_rng(seed).uniform(-1, 1, size=(n, n))
    better = S.copy()
    better[i, i] = 1.0
    assert info_nce_symmetric(better, 0.1).item() <= info_nce_symmetric(S, 0.1).item() + 1e-12


def test_global_and_summary_losses():
    b = _batch()
    S = b.image_global.value @ b.text_full.value.T
    assert global_loss(b).item() == pytest.approx(_ref_info_nce(S, b.tau), abs=1e-12)
    S = b.image_global.value @ b.text_summary.value.T
    assert summary_loss(b).item() == pytest.approx(_ref_info_nce(S, b.tau), abs=1e-12)
    same = EmbeddingBatch.from_arrays(dict(b.to_arrays(), text_summary=b.to_arrays()["text_full"]), tau=b.tau)
    assert summary_loss(same).item() == global_loss(same).item()
    assert summary_loss(_batch(n=1)).item() == 0.0


def test_one_hot_attention_selects_matching_patch():
    stim = np.eye(4)[:3]
    patches = np.stack([np.eye(4)[3], np.eye(4)[1], np.eye(4)[0], np.eye(4)[2]])
    regions, w = cross_attention_pool(patches, stim, ContrastiveConfig(tau=1e-3))
    assert np.allclose(regions, stim, atol=1e-12)
    assert np.argmax(w[:, 0]) == 2 and np.argmax(w[:, 1]) == 1 and np.argmax(w[:, 2]) == 3


@pytest.mark.parametrize("rule", ["softmax_over_patches", "paper_literal"])
def test_identical_patches_pool_to_that_patch(rule):
    rng = np.random.default_rng(1)
    patch = _unit(rng.normal(size=5))
    stim = _unit(rng.normal(size=(3, 5)))
    regions, _ = cross_attention_pool(np.tile(patch, (4, 1)), stim, ContrastiveConfig(pooling_rule=rule))
    assert np.allclose(regions, np.tile(patch, (3, 1)), atol=1e-12)


def test_softmax_weights_match_loop_reference():
    rng = np.random.default_rng(7)
    patches, stim = _unit(rng.normal(size=(4, 6))), _unit(rng.normal(size=(3, 6)))
    tau = 0.3
    _, w = cross_attention_pool(patches, stim, ContrastiveConfig(tau=tau))
    for j in range(3):
        e = [math.exp(float(patches[m] @ stim[j]) / tau) for m in range(4)]
        for m in range(4):
            assert w[m, j] == pytest.approx(e[m] / sum(e), abs=1e-14)


def test_literal_rule_normalizes_across_stimuli():
    rng = np.random.default_rng(8)
    patches, stim = _unit(rng.normal(size=(5, 6))), _unit(rng.normal(size=(3, 6)))
    _, w = cross_attention_pool(patches, stim, ContrastiveConfig(pooling_rule="paper_literal"))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_default_weights_sum_to_one_over_patches(seed, m):
    b = _batch(n=2, m=m, seed=seed)
    reg = pool_regions(b.image_patches, b.text_stimuli, ContrastiveConfig())
    assert np.allclose(reg.attention.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(reg.values.value, axis=-1), 1.0, atol=1e-12)


def test_pool_tau_overrides_attention_temperature():
    assert ContrastiveConfig(tau=0.07).attention_tau == 0.07
    assert ContrastiveConfig(tau=0.07, pool_tau=0.2).attention_tau == 0.2
    with pytest.raises(ContrastiveError):
        ContrastiveConfig(pool_tau=0.0)


def test_zero_pooled_vector_fails():
    patches = np.array([[1.0, 0.0], [-1.0, 0.0]])
    stim = np.array([[0.0, 1.0]] * 3)
    with pytest.raises(ContrastiveError):
        cross_attention_pool(patches, stim)


def _regions_stimuli(regions, stimuli):
    g = dc.Graph()
    return g.const(np.asarray(regions)[None]), g.const(np.asarray(stimuli)[None])


def test_orthogonal_regions_closed_form():
    r, s = _regions_stimuli(np.eye(3), np.eye(3))
    got = region_contrastive_loss(r, s, ContrastiveConfig(tau=1.0)).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert got == pytest.approx(0.5514, abs=1e-4)


def test_identical_regions_give_log_three():
    # stimuli equidistant from the shared region, so no candidate stands out
    stim = _unit(np.eye(4)[1:] + np.eye(4)[0])
    r, s = _regions_stimuli(np.tile(np.eye(4)[0], (3, 1)), stim)
    assert region_contrastive_loss(r, s, ContrastiveConfig(tau=1.0)).item() == pytest.approx(math.log(3), abs=1e-12)


def test_batch_wide_equals_within_image_at_n1():
    b = _batch(n=1)
    within = fine_grained_loss(b, ContrastiveConfig(tau=0.5)).item()
    wide = fine_grained_loss(b, ContrastiveConfig(tau=0.5, negative_pool="batch_wide")).item()
    assert wide == pytest.approx(within, abs=1e-12)


def test_within_image_matches_per_item_reference():
    b = _batch(n=3)
    cfg = ContrastiveConfig(tau=0.5)
    reg = pool_regions(b.image_patches, b.text_stimuli, cfg).values.value
    stim = b.text_stimuli.value
    ref = np.mean([_ref_info_nce(reg[i] @ stim[i].T, 0.5) for i in range(3)])
    assert fine_grained_loss(b, cfg).item() == pytest.approx(ref, abs=1e-12)
    wide = fine_grained_loss(b, ContrastiveConfig(tau=0.5, negative_pool="batch_wide")).item()
    flat_r, flat_s = reg.reshape(9, -1), stim.reshape(9, -1)
    assert wide == pytest.approx(_ref_info_nce(flat_r @ flat_s.T, 0.5), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_losses_nonnegative_and_item_permutation_invariant(seed):
    b = _batch(n=3, seed=seed)
    p = np.random.default_rng(seed).permutation(3)
    arrays = {k: v[p] for k, v in b.to_arrays().items()}
    bp = EmbeddingBatch.from_arrays(arrays, tau=b.tau)
    for loss in (global_loss, summary_loss, fine_grained_loss):
        a, c = loss(b).item(), loss(bp).item()
        assert a >= 0
        assert c == pytest.approx(a, abs=1e-12)


def test_config_validation():
    with pytest.raises(ContrastiveError):
        ContrastiveConfig(tau=-1.0)
    with pytest.raises(ContrastiveError):
        ContrastiveConfig(negative_pool="everything")
    with pytest.raises(ContrastiveError):
        ContrastiveConfig(pooling_rule="max")


@pytest.mark.parametrize("pool", ["within_image", "batch_wide"])
@pytest.mark.parametrize("rule", ["softmax_over_patches", "paper_literal"])
def test_gradients_through_encoders(pool, rule):
    data = make_synthetic_dataset(4, d_raw=10, d=8, n_clusters=2, sigma=0.2, seed=3, n_patches=5)
    rng = np.random.default_rng(4)
    wv, wt = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
    cfg = ContrastiveConfig(tau=0.5, negative_pool=pool, pooling_rule=rule)

    def f(v, t):
        b = encode_dataset(data, v, t, tau=0.5)
        return global_loss(b) + summary_loss(b) + fine_grained_loss(b, cfg)

    assert dc.grad_check(f, [wv, wt], max_coords=30) < 1e-4
