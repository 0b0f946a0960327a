import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectkit.edit_engine import (
    Denoiser,
    EditConfig,
    EditError,
    PromptFileError,
    ToyDenoiserParams,
    blend_maps,
    check_attention,
    edit,
    generate,
    latent_blend,
    load_prompt,
    refine,
    toy_denoiser,
    write_prompt,
)
from affectkit.tensorio import save_mdt

P = ToyDenoiserParams()


def _stochastic(rows, cols, seed):
    x = np.random.default_rng(seed).random((rows, cols)) + 1e-3
    return x / x.sum(axis=1, keepdims=True)


def _setup(seed=0, params=P):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(params.H, params.W, params.C))
    prompt = rng.normal(size=(params.K, params.d))
    return V, prompt, toy_denoiser(params, seed)


def _random_mask(seed, shape=(P.H, P.W)):
    return (np.random.default_rng(seed).random(shape) < 0.5).astype(float)


def test_refine_extremes_and_rows():
    Ms, Mt = _stochastic(2, 3, 0), _stochastic(2, 3, 1)
    assert np.array_equal(refine(Ms, Mt, np.zeros(2)), Ms)
    assert np.array_equal(refine(Ms, Mt, np.ones(2)), Mt)
    out = refine(Ms, Mt, np.array([1, 0]))
    assert np.array_equal(out[0], Mt[0]) and np.array_equal(out[1], Ms[1])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_refine_with_itself_is_identity(seed):
    M = _stochastic(6, 4, seed)
    assert np.array_equal(refine(M, M, _random_mask(seed, (2, 3))), M)


def test_refine_errors():
    with pytest.raises(EditError):
        refine(np.eye(2), np.eye(3), np.ones(2))
    with pytest.raises(EditError):
        refine(np.eye(2), np.eye(2), np.ones(3))
    with pytest.raises(EditError):
        refine(np.eye(2), np.eye(2), np.array([0.5, 1.0]))


def test_blend_maps_case_split():
    Ms, Mt = _stochastic(4, 3, 0), _stochastic(4, 3, 1)
    mask = np.array([[1, 0], [0, 1]])
    assert np.array_equal(blend_maps(Ms, Mt, mask, t=2, tau_c=3), Mt)
    assert np.array_equal(blend_maps(Ms, Mt, np.zeros((2, 2)), t=3, tau_c=3), Ms)
    for t in range(1, 5):
        assert np.array_equal(blend_maps(Ms, Mt, mask, t, tau_c=0), refine(Ms, Mt, mask))
    with pytest.raises(EditError):
        blend_maps(Ms, Mt[:3], mask, 1, 0)


@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_blend_maps_is_idempotent(seed, tau_c, t):
    Ms, Mt = _stochastic(6, 3, seed), _stochastic(6, 3, seed + 1)
    mask = _random_mask(seed, (2, 3))
    once = blend_maps(Ms, Mt, mask, t, tau_c)
    assert np.array_equal(blend_maps(Ms, Mt, mask, t, tau_c), once)
    assert np.array_equal(blend_maps(once, once, mask, t, tau_c), once)


def test_latent_blend_selection():
    rng = np.random.default_rng(0)
    zs, zt = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    assert np.array_equal(latent_blend(zs, zt, np.zeros((4, 4))), zs)
    assert np.array_equal(latent_blend(zs, zt, np.ones((4, 4))), zt)
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    out = latent_blend(zs, zt, checker)
    for i in range(4):
        for j in range(4):
            expected = zt[i, j] if checker[i, j] else zs[i, j]
            assert np.array_equal(out[i, j], expected)
    with pytest.raises(EditError):
        latent_blend(zs, zt[:2], checker)
    with pytest.raises(EditError):
        latent_blend(zs, zt, np.ones((2, 2)))


def test_check_attention():
    check_attention(_stochastic(3, 2, 0))
    with pytest.raises(EditError, match="t=4"):
        check_attention(np.full((2, 2), 0.6), step=4)
    with pytest.raises(EditError):
        check_attention(np.array([[1.5, -0.5]]))
    with pytest.raises(EditError):
        check_attention(np.array([[np.nan, 1.0]]))


def test_toy_denoiser_reconstructs_source():
    V, _, den = _setup()
    z = den.invert(V)
    for t in range(P.T, 0, -1):
        z, M = den.step(z, None, t)
        assert np.max(np.abs(M.sum(axis=1) - 1.0)) <= 1e-12
    assert np.max(np.abs(z - V)) < 1e-9


def test_toy_denoiser_is_a_denoiser_and_deterministic():
    V, prompt, den = _setup()
    assert isinstance(den, Denoiser)
    other = toy_denoiser(P, 0)
    a, Ma = den.step(V, prompt, 3)
    b, Mb = other.step(V, prompt, 3)
    assert np.array_equal(a, b) and np.array_equal(Ma, Mb)
    c, _ = toy_denoiser(P, 1).step(V, prompt, 3)
    assert not np.array_equal(a, c)


def test_override_with_own_map_equals_step():
    V, prompt, den = _setup(2)
    z, M = den.step(V, prompt, 5)
    assert np.array_equal(den.step_with_override(V, prompt, 5, M), z)
    with pytest.raises(EditError):
        den.step_with_override(V, prompt, 5, M[:3])


def test_denoiser_argument_errors():
    V, prompt, den = _setup()
    with pytest.raises(ValueError):
        ToyDenoiserParams(alpha=0.0)
    with pytest.raises(ValueError):
        ToyDenoiserParams(T=0)
    with pytest.raises(EditError):
        den.step(V, prompt, 0)
    with pytest.raises(EditError):
        den.step(V, prompt, P.T + 1)
    with pytest.raises(EditError):
        den.step(V[:2], prompt, 1)
    with pytest.raises(EditError):
        den.step(V, prompt[:2], 1)
    bad = V.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(EditError):
        den.step(bad, prompt, 1)


def test_zero_mask_reproduces_source():
    V, prompt, den = _setup(3)
    out, trace = edit(V, prompt, np.zeros((P.H, P.W)), EditConfig(T=P.T, tau_c=5), den)
    assert np.max(np.abs(out - V)) < 1e-9
    assert len(trace) == P.T
    assert [r.t for r in trace.records] == list(range(P.T, 0, -1))


def test_full_mask_without_refinement_is_plain_generation():
    V, prompt, den = _setup(4)
    cfg = EditConfig(T=P.T, tau_c=P.T + 1)
    out, _ = edit(V, prompt, np.ones((P.H, P.W)), cfg, den)
    assert np.array_equal(out, generate(den.invert(V), prompt, P.T, den))


def test_single_step_run():
    params = ToyDenoiserParams(T=1)
    V, prompt, den = _setup(5, params)
    mask = _random_mask(5)
    out, trace = edit(V, prompt, mask, EditConfig(T=1, tau_c=1), den)
    assert len(trace) == 1
    r = trace.records[0]
    z_T = den.invert(V)
    z_src, M_src = den.step(z_T, None, 1)
    _, M_tgt = den.step(z_T, prompt, 1)
    one = den.step_with_override(z_T, prompt, 1, refine(M_src, M_tgt, mask))
    assert np.array_equal(out, latent_blend(z_src, one, mask))
    assert np.array_equal(r.z_tgt, out)


@given(st.integers(0, 500), st.integers(0, P.T + 1))
@settings(max_examples=20, deadline=None)
def test_pixels_outside_mask_follow_source(seed, tau_c):
    V, prompt, den = _setup(seed)
    mask = _random_mask(seed)
    out, trace = edit(V, prompt, mask, EditConfig(T=P.T, tau_c=tau_c), den)
    outside = mask == 0
    assert np.array_equal(out[outside], trace.records[-1].z_src[outside])
    assert np.max(np.abs(out[outside] - V[outside])) < 1e-9
    assert trace.max_row_error() <= 1e-9


@given(st.integers(0, 500))
@settings(max_examples=15, deadline=None)
def test_growing_the_mask_only_adds_changed_pixels(seed):
    V, prompt, den = _setup(seed)
    small = _random_mask(seed)
    big = np.maximum(small, _random_mask(seed + 1))
    out_small, _ = edit(V, prompt, small, EditConfig(T=P.T), den)
    out_big, _ = edit(V, prompt, big, EditConfig(T=P.T), den)
    changed_small = np.any(np.abs(out_small - V) > 1e-9, axis=-1)
    changed_big = np.any(np.abs(out_big - V) > 1e-9, axis=-1)
    assert np.all(~changed_small | (small > 0))
    assert np.all(~changed_big | (big > 0))


def test_edit_is_deterministic_and_changes_masked_pixels():
    V, prompt, den = _setup(6)
    mask = np.zeros((P.H, P.W))
    mask[2:5, 2:5] = 1
    a, _ = edit(V, prompt, mask, EditConfig(T=P.T), den)
    b, _ = edit(V, prompt, mask, EditConfig(T=P.T), toy_denoiser(P, 6))
    assert np.array_equal(a, b)
    assert np.max(np.abs(a[2:5, 2:5] - V[2:5, 2:5])) > 1e-3


def test_crossover_step_matters_only_with_neighbour_mixing():
    mask = np.zeros((P.H, P.W))
    mask[2:6, 2:6] = 1
    for mix, differs in ((0.5, True), (0.0, False)):
        params = ToyDenoiserParams(mix=mix)
        V, prompt, den = _setup(7, params)
        early, _ = edit(V, prompt, mask, EditConfig(T=P.T, tau_c=0), den)
        never, _ = edit(V, prompt, mask, EditConfig(T=P.T, tau_c=P.T + 1), den)
        assert (np.max(np.abs(early - never)) > 1e-6) == differs
    with pytest.raises(ValueError):
        ToyDenoiserParams(mix=1.5)


def test_edit_errors():
    V, prompt, den = _setup()
    with pytest.raises(EditError):
        edit(V, prompt, np.ones((2, 2)), EditConfig(T=P.T), den)
    with pytest.raises(EditError):
        edit(V, prompt, np.full((P.H, P.W), 0.5), EditConfig(T=P.T), den)
    with pytest.raises(ValueError):
        EditConfig(T=3, tau_c=5)
    with pytest.raises(ValueError):
        EditConfig(T=0)


def test_prompt_file_roundtrip(tmp_path):
    _, prompt, _ = _setup()
    mask = _random_mask(0)
    write_prompt(tmp_path / "p.json", prompt, mask)
    emb, m = load_prompt(tmp_path / "p.json", latent_shape=(P.H, P.W, P.C))
    assert np.array_equal(emb, prompt) and np.array_equal(m, mask)
    manifest = json.loads((tmp_path / "p.json").read_text())
    assert (manifest["K"], manifest["d"], manifest["H"], manifest["W"]) == (P.K, P.d, P.H, P.W)


def test_prompt_file_errors(tmp_path):
    _, prompt, _ = _setup()
    with pytest.raises(PromptFileError):
        write_prompt(tmp_path / "p.json", prompt, np.full((2, 2), 0.5))
    write_prompt(tmp_path / "p.json", prompt, np.ones((2, 2)))
    save_mdt(tmp_path / "prompt_mask.mdt", np.full((2, 2), 0.5))
    with pytest.raises(PromptFileError, match="binary"):
        load_prompt(tmp_path / "p.json")
    save_mdt(tmp_path / "prompt_mask.mdt", np.ones((2, 2)))
    with pytest.raises(PromptFileError, match="latent grid"):
        load_prompt(tmp_path / "p.json", latent_shape=(P.H, P.W, P.C))
    save_mdt(tmp_path / "prompt_mask.mdt", np.ones((3, 2)))
    with pytest.raises(PromptFileError, match="manifest"):
        load_prompt(tmp_path / "p.json")
    (tmp_path / "prompt_mask.mdt").write_bytes(b"junk")
    with pytest.raises(PromptFileError):
        load_prompt(tmp_path / "p.json")
    (tmp_path / "q.json").write_text("{not json")
    with pytest.raises(PromptFileError):
        load_prompt(tmp_path / "q.json")
    (tmp_path / "r.json").write_text('{"K": 1}')
    with pytest.raises(PromptFileError, match="keys"):
        load_prompt(tmp_path / "r.json")
