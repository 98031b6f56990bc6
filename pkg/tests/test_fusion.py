"""Prompt alignment, attention fusion, and blend-mask construction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnfuse.errors import ContractViolation, MissingRecordError
from attnfuse.fusion import (MODES, BlendMask, EditConfig, PromptAlignment,
                             align_prompts, blend_self, build_blend_mask,
                             fuse_cross, identity_alignment, mask_positions,
                             preset, source_step, window_active)
from attnfuse.model import KIND_CROSS, KIND_SELF, AttentionRecord, tokenize
from attnfuse.store import AttentionStore, StoreMeta


def test_presets_exact():
    for mode in ("style", "attribute", "enhancement"):
        cfg = preset(mode)
        assert (cfg.t_s, cfg.t_c, cfg.tau) == (0.2, 0.3, 1.0)
        assert cfg.s_cfg == 7.5
        assert cfg.mode == mode
    for mode in ("shape", "removal"):
        cfg = preset(mode)
        assert (cfg.t_s, cfg.t_c, cfg.tau) == (0.5, 0.5, 0.3)
        assert cfg.s_cfg == 7.5
    with pytest.raises(ContractViolation):
        preset("sharpen")


def test_edit_config_validation():
    with pytest.raises(ContractViolation):
        EditConfig(t_s=0.2, t_c=0.3, tau=1.5)
    with pytest.raises(ContractViolation):
        EditConfig(t_s=-0.1, t_c=0.3, tau=0.5)
    with pytest.raises(ContractViolation):
        EditConfig(t_s=0.2, t_c=1.1, tau=0.5)
    with pytest.raises(ContractViolation):
        EditConfig(t_s=0.2, t_c=0.3, tau=0.5, s_cfg=-1.0)
    with pytest.raises(ContractViolation):
        EditConfig(t_s=0.2, t_c=0.3, tau=0.5, mode="other")


def test_window_boundaries():
    assert window_active(15, 0.3, 50)
    assert not window_active(14, 0.3, 50)
    assert window_active(10, 0.2, 50)
    assert not window_active(9, 0.2, 50)
    assert window_active(1, 0.0, 50)
    assert window_active(50, 1.0, 50)
    assert not window_active(49, 1.0, 50)


def test_source_step_is_previous_index():
    assert source_step(1) == 0
    assert source_step(50) == 49


def test_align_substitution():
    got = align_prompts(("a", "cat"), ("a", "tiger"))
    assert got.matched == ((0, 0),)
    assert got.edited_positions == (1,)
    assert got.removed_positions == (1,)


def test_align_extension():
    got = align_prompts(tokenize("a cat"), tokenize("a cat, 8k"))
    assert got.matched == ((0, 0), (1, 1))
    assert got.edited_positions == (2, 3)
    assert got.removed_positions == ()


def test_align_identical_prompts():
    toks = tokenize("a red square drifting right")
    got = align_prompts(toks, toks)
    assert got == identity_alignment(len(toks))
    assert got.edited_positions == () and got.removed_positions == ()


def test_align_prefers_earliest_source_on_ties():
    got = align_prompts(("a", "a"), ("a",))
    assert got.matched == ((0, 0),)
    assert got.removed_positions == (1,)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcd"), max_size=8),
       st.lists(st.sampled_from("abcd"), max_size=8))
def test_align_invariants(src, edit):
    got = align_prompts(src, edit)
    for (i1, j1), (i2, j2) in zip(got.matched, got.matched[1:]):
        assert i1 < i2 and j1 < j2
    for i, j in got.matched:
        assert src[i] == edit[j]
    m_src = {i for i, _ in got.matched}
    m_edit = {j for _, j in got.matched}
    assert m_src | set(got.removed_positions) == set(range(len(src)))
    assert m_edit | set(got.edited_positions) == set(range(len(edit)))
    assert not (m_src & set(got.removed_positions))
    assert not (m_edit & set(got.edited_positions))


def test_alignment_validation():
    with pytest.raises(ContractViolation):
        PromptAlignment(matched=((0, 0), (0, 1)), edited_positions=(),
                        removed_positions=())
    with pytest.raises(ContractViolation):
        PromptAlignment(matched=((0, 0),), edited_positions=(),
                        removed_positions=(0,))


def test_mask_positions_follow_removed_tokens():
    align = align_prompts(("a", "cat"), ("a", "tiger"))
    assert mask_positions(align) == (1,)
    assert mask_positions(identity_alignment(3)) == ()


def _store_with_cross(src_map, T=4):
    store = AttentionStore(StoreMeta(T=T, blocks=1, config_hash=1))
    store.record(AttentionRecord(t=1, layer=0, kind=KIND_CROSS, attn=src_map))
    return store


SRC_CROSS = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]]
                     ).reshape(1, 1, 4, 2)
EDIT_CROSS = np.array([[0.6, 0.4], [0.1, 0.9], [0.25, 0.75], [0.5, 0.5]]
                      ).reshape(1, 1, 4, 2)


def test_fuse_cross_hand_oracle():
    store = _store_with_cross(SRC_CROSS)
    align = PromptAlignment(matched=((0, 0),), edited_positions=(1,),
                            removed_positions=(1,))
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    got = fuse_cross(EDIT_CROSS, store, align, t=2, layer=0, cfg=cfg, T=4)
    # column 0 from source, column 1 kept, rows renormalized by hand
    want = np.array([
        [0.7 / 1.1, 0.4 / 1.1],
        [0.2 / 1.1, 0.9 / 1.1],
        [0.5 / 1.25, 0.75 / 1.25],
        [0.9 / 1.4, 0.5 / 1.4],
    ]).reshape(1, 1, 4, 2)
    assert np.max(np.abs(got - want)) <= 1e-12
    assert np.max(np.abs(got.sum(axis=-1) - 1.0)) <= 1e-12


def test_fuse_cross_outside_window_returns_input():
    store = _store_with_cross(SRC_CROSS)
    align = PromptAlignment(matched=((0, 0),), edited_positions=(1,),
                            removed_positions=(1,))
    cfg = EditConfig(t_s=1.0, t_c=1.0, tau=0.3)
    got = fuse_cross(EDIT_CROSS, store, align, t=2, layer=0, cfg=cfg, T=4)
    assert got is EDIT_CROSS


def test_fuse_cross_identity_alignment_is_stored_map():
    store = _store_with_cross(SRC_CROSS)
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    got = fuse_cross(EDIT_CROSS, store, identity_alignment(2), t=2, layer=0,
                     cfg=cfg, T=4)
    assert got is store.query(1, 0, KIND_CROSS).attn


def test_fuse_cross_full_permutation_skips_renorm():
    store = _store_with_cross(SRC_CROSS)
    align = PromptAlignment(matched=((0, 1), (1, 0)), edited_positions=(),
                            removed_positions=())
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    got = fuse_cross(EDIT_CROSS, store, align, t=2, layer=0, cfg=cfg, T=4)
    assert np.array_equal(got[..., 0], SRC_CROSS[..., 1])
    assert np.array_equal(got[..., 1], SRC_CROSS[..., 0])


def test_fuse_cross_partial_is_idempotent():
    src = np.array([[0.5, 0.2, 0.3], [0.1, 0.6, 0.3], [0.25, 0.5, 0.25],
                    [0.4, 0.4, 0.2]]).reshape(1, 1, 4, 3)
    store = _store_with_cross(src)
    edit = EDIT_CROSS
    align = PromptAlignment(matched=((0, 0), (2, 1)), edited_positions=(),
                            removed_positions=(1,))
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    once = fuse_cross(edit, store, align, t=2, layer=0, cfg=cfg, T=4)
    twice = fuse_cross(once, store, align, t=2, layer=0, cfg=cfg, T=4)
    assert np.max(np.abs(twice - once)) <= 1e-12
    assert np.max(np.abs(once.sum(axis=-1) - 1.0)) <= 1e-12


def test_fuse_cross_rows_sum_to_one_random():
    rng = np.random.default_rng(9)
    src = rng.random((2, 3, 5, 6)) + 0.05
    src /= src.sum(axis=-1, keepdims=True)
    edit = rng.random((2, 3, 5, 4)) + 0.05
    edit /= edit.sum(axis=-1, keepdims=True)
    store = _store_with_cross(src)
    align = PromptAlignment(matched=((0, 0), (3, 2)), edited_positions=(1, 3),
                            removed_positions=(1, 2, 4, 5))
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    got = fuse_cross(edit, store, align, t=2, layer=0, cfg=cfg, T=4)
    assert got.shape == edit.shape
    assert np.max(np.abs(got.sum(axis=-1) - 1.0)) <= 1e-12
    # renormalization preserves ratios between the replaced columns
    assert np.max(np.abs(got[..., 0] * src[..., 3] -
                         got[..., 2] * src[..., 0])) <= 1e-12


def test_fuse_cross_missing_record_propagates():
    store = AttentionStore(StoreMeta(T=4, blocks=1, config_hash=1))
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    with pytest.raises(MissingRecordError):
        fuse_cross(EDIT_CROSS, store, identity_alignment(2), t=2, layer=0,
                   cfg=cfg, T=4)


def test_fuse_cross_column_bounds_checked():
    store = _store_with_cross(SRC_CROSS)
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    align = PromptAlignment(matched=((5, 0),), edited_positions=(1,),
                            removed_positions=())
    with pytest.raises(ContractViolation):
        fuse_cross(EDIT_CROSS, store, align, t=2, layer=0, cfg=cfg, T=4)


MASK_CROSS = np.array([
    # frame 0: column-1 masses 0.8, 0.4, 0.2, 0.1
    [[0.1, 0.8, 0.1], [0.3, 0.4, 0.3], [0.4, 0.2, 0.4], [0.45, 0.1, 0.45]],
    # frame 1: column-1 masses 0.5, 0.25, 0.25, 0.1
    [[0.25, 0.5, 0.25], [0.375, 0.25, 0.375], [0.375, 0.25, 0.375],
     [0.45, 0.1, 0.45]],
])


def _mask_store():
    attn = np.repeat(MASK_CROSS[:, None], 2, axis=1)  # two equal heads
    store = AttentionStore(StoreMeta(T=4, blocks=1, config_hash=1))
    store.record(AttentionRecord(t=0, layer=0, kind=KIND_CROSS, attn=attn))
    return store


def test_blend_mask_hand_oracle():
    store = _mask_store()
    got = build_blend_mask(store, t=0, layer=0, word_positions=(1,), tau=0.3)
    # frame 0 normalizes to [1, .5, .25, .125], frame 1 to [1, .5, .5, .2]
    want = np.array([[True, True, False, False],
                     [True, True, True, False]])
    assert np.array_equal(got.mask, want)


def test_blend_mask_threshold_is_strict():
    store = _mask_store()
    got = build_blend_mask(store, t=0, layer=0, word_positions=(1,), tau=0.5)
    want = np.array([[True, False, False, False],
                     [True, False, False, False]])
    assert np.array_equal(got.mask, want)


def test_blend_mask_tau_extremes():
    store = _mask_store()
    empty = build_blend_mask(store, t=0, layer=0, word_positions=(1,), tau=1.0)
    assert not empty.mask.any()
    full = build_blend_mask(store, t=0, layer=0, word_positions=(1,), tau=0.0)
    assert full.mask.all()


def test_blend_mask_multiple_positions():
    store = _mask_store()
    got = build_blend_mask(store, t=0, layer=0, word_positions=(0, 2), tau=0.5)
    # complement masses: frame 0 [.2, .6, .8, .9] -> /0.9; frame 1
    # [.5, .75, .75, .9] -> /0.9; strict > 0.5
    want = np.array([[False, True, True, True],
                     [True, True, True, True]])
    assert np.array_equal(got.mask, want)


def test_blend_mask_position_validation():
    store = _mask_store()
    with pytest.raises(ContractViolation):
        build_blend_mask(store, t=0, layer=0, word_positions=(), tau=0.3)
    with pytest.raises(ContractViolation):
        build_blend_mask(store, t=0, layer=0, word_positions=(3,), tau=0.3)
    with pytest.raises(ContractViolation):
        build_blend_mask(store, t=0, layer=0, word_positions=(1, 1), tau=0.3)


SRC_SELF = np.array([
    [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]],
    [[0.25, 0.25, 0.25, 0.25], [0.5, 0.1, 0.2, 0.2]],
]).reshape(2, 1, 2, 4)
EDIT_SELF = np.array([
    [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1]],
    [[0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7]],
]).reshape(2, 1, 2, 4)


def _self_store():
    store = AttentionStore(StoreMeta(T=4, blocks=1, config_hash=1))
    store.record(AttentionRecord(t=1, layer=0, kind=KIND_SELF, attn=SRC_SELF))
    return store


def test_blend_self_checkerboard():
    store = _self_store()
    mask = BlendMask(mask=np.array([[True, False], [False, True]]))
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    got = blend_self(EDIT_SELF, store, t=2, layer=0, mask=mask, cfg=cfg, T=4)
    assert np.array_equal(got[0, 0, 0], EDIT_SELF[0, 0, 0])
    assert np.array_equal(got[0, 0, 1], SRC_SELF[0, 0, 1])
    assert np.array_equal(got[1, 0, 0], SRC_SELF[1, 0, 0])
    assert np.array_equal(got[1, 0, 1], EDIT_SELF[1, 0, 1])


def test_blend_self_mask_extremes_are_exact():
    store = _self_store()
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    zeros = BlendMask(mask=np.zeros((2, 2), dtype=bool))
    got = blend_self(EDIT_SELF, store, t=2, layer=0, mask=zeros, cfg=cfg, T=4)
    assert np.array_equal(got, SRC_SELF)
    ones = BlendMask(mask=np.ones((2, 2), dtype=bool))
    got = blend_self(EDIT_SELF, store, t=2, layer=0, mask=ones, cfg=cfg, T=4)
    assert np.array_equal(got, EDIT_SELF)


def test_blend_self_outside_window_returns_input():
    store = _self_store()
    cfg = EditConfig(t_s=1.0, t_c=1.0, tau=0.3)
    mask = BlendMask(mask=np.zeros((2, 2), dtype=bool))
    got = blend_self(EDIT_SELF, store, t=2, layer=0, mask=mask, cfg=cfg, T=4)
    assert got is EDIT_SELF


def test_blend_self_shape_validation():
    store = _self_store()
    cfg = EditConfig(t_s=0.0, t_c=0.0, tau=0.3)
    with pytest.raises(ContractViolation):
        blend_self(EDIT_SELF, store, t=2, layer=0,
                   mask=BlendMask(mask=np.zeros((2, 3), dtype=bool)),
                   cfg=cfg, T=4)
    with pytest.raises(ContractViolation):
        blend_self(EDIT_SELF[:, :, :1], store, t=2, layer=0,
                   mask=BlendMask(mask=np.zeros((2, 2), dtype=bool)),
                   cfg=cfg, T=4)


def test_blend_mask_type_validation():
    with pytest.raises(ContractViolation):
        BlendMask(mask=np.zeros((2, 2)))
    with pytest.raises(ContractViolation):
        BlendMask(mask=np.zeros(4, dtype=bool))
