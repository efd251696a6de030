import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_attention, random_slices
from oracles import combine_oracle, shrinks_exclude
from subregion_seg.attention import ModalityAttention
from subregion_seg.errors import InvalidInputError
from subregion_seg.model import mean_fuse
from subregion_seg.prompting import (
    ALL_VARIANTS,
    SpatialPrompt,
    Variant,
    batch_bboxes,
    combine_subregions,
    extract_bbox,
    forward_slices,
    refine_subregion,
    two_pass_segment,
)


# -- extract_bbox --------------------------------------------------------------------------


def test_single_pixel_box():
    pred = np.zeros((64, 64), dtype=np.uint8)
    pred[10, 20] = 4
    assert extract_bbox(pred, 4) == SpatialPrompt(4, (10, 20, 10, 20))


def test_empty_region_flag():
    p = extract_bbox(np.zeros((8, 8), dtype=np.uint8), 1)
    assert p.empty and p.box is None


def test_l_shaped_region():
    pred = np.zeros((16, 16), dtype=np.uint8)
    pred[3:8, 2] = 2  # vertical bar rows 3..7
    pred[7, 2:10] = 2  # foot cols 2..9
    pred[0, 0] = 1  # other labels do not count
    rows, cols = np.nonzero(pred == 2)
    assert (rows.min(), cols.min(), rows.max(), cols.max()) == (3, 2, 7, 9)
    assert extract_bbox(pred, 2).box == (3, 2, 7, 9)


def test_margin_is_clamped():
    pred = np.zeros((10, 10), dtype=np.uint8)
    pred[1, 8] = 1
    assert extract_bbox(pred, 1, margin=3).box == (0, 5, 4, 9)


def test_invalid_label():
    with pytest.raises(InvalidInputError):
        extract_bbox(np.zeros((4, 4)), 3)


@settings(max_examples=300, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.sampled_from([0, 0, 1, 2, 4])))
def test_box_minimal_and_covering(pred):
    for r in (1, 2, 4):
        p = extract_bbox(pred, r)
        if not (pred == r).any():
            assert p.empty
            continue
        r0, c0, r1, c1 = p.box
        assert 0 <= r0 <= r1 < pred.shape[0] and 0 <= c0 <= c1 < pred.shape[1]
        assert shrinks_exclude(pred == r, p.box)


def test_batch_boxes_match_single():
    rng = np.random.default_rng(0)
    maps = rng.choice(np.array([0, 0, 0, 1, 2, 4], dtype=np.uint8), size=(20, 9, 11))
    maps[3] = 0
    for label in (1, 2, 4):
        boxes, valid = batch_bboxes(torch.from_numpy(maps), label, margin=1)
        for i in range(20):
            ref = extract_bbox(maps[i], label, margin=1)
            assert bool(valid[i]) == (not ref.empty)
            if not ref.empty:
                assert tuple(boxes[i].tolist()) == ref.box


# -- combine_subregions ----------------------------------------------------------------------


def test_combine_all_zero():
    out = combine_subregions({1: np.zeros((3, 3)), 2: np.zeros((3, 3)), 4: np.zeros((3, 3))})
    assert not out.any()


@pytest.mark.parametrize(
    "probs,expected", [((0.9, 0.2, 0.4), 1), ((0.7, 0.1, 0.7), 4), ((0.5, 0.5, 0.0), 1), ((0.49, 0.2, 0.1), 0)]
)
def test_combine_hand_cases(probs, expected):
    maps = {lab: np.full((1, 1), p) for lab, p in zip((1, 2, 4), probs)}
    assert combine_subregions(maps)[0, 0] == expected


def test_combine_exhaustive_grid():
    grid = np.round(np.arange(11) * 0.1, 10)
    triples = np.array(list(itertools.product(grid, repeat=3)))  # (1331, 3) NCR, ED, ET
    probs = triples.T.reshape(3, 1, -1)
    got_np = combine_subregions(probs)[0]
    got_t = combine_subregions(torch.from_numpy(probs))[0].numpy()
    expected = [combine_oracle(*t) for t in triples]
    np.testing.assert_array_equal(got_np, expected)
    np.testing.assert_array_equal(got_t, expected)
    # output is 0 or a label whose probability reaches tau
    for (p_ncr, p_ed, p_et), lab in zip(triples, got_np):
        assert lab == 0 or {1: p_ncr, 2: p_ed, 4: p_et}[int(lab)] >= 0.5


def test_combine_shape_mismatch():
    with pytest.raises(InvalidInputError):
        combine_subregions({1: np.zeros((2, 2)), 2: np.zeros((2, 3)), 4: np.zeros((2, 2))})
    with pytest.raises(InvalidInputError):
        combine_subregions({1: np.zeros((2, 2)), 2: np.zeros((2, 2))})


# -- refinement ------------------------------------------------------------------------------


def test_refine_subregion_contract(desk_model):
    x = random_slices(np.random.default_rng(0), 1)
    with torch.no_grad():
        fused = mean_fuse(desk_model.encode_per_modality(x))
        a = refine_subregion(desk_model, fused, SpatialPrompt(4, (5, 6, 20, 30)))
        b = refine_subregion(desk_model, fused, SpatialPrompt(4, (5, 6, 20, 30)))
    assert a.shape == (64, 64)
    assert torch.all((a >= 0) & (a <= 1))
    assert torch.equal(a, b)
    with pytest.raises(InvalidInputError):
        refine_subregion(desk_model, fused, SpatialPrompt(4, None))


def test_empty_regions_keep_first_pass(desk_model):
    x = random_slices(np.random.default_rng(1), 4)
    att = random_attention(32, np.random.default_rng(1))
    with torch.no_grad():
        res = forward_slices(desk_model, att, x, Variant(True, True))
    assert res.box_valid.shape == (4, 3)
    for b, r in itertools.product(range(4), range(3)):
        if not res.box_valid[b, r]:
            assert torch.equal(res.logits[b, r], res.pass1_logits[b, r])


def test_all_empty_prompts_return_first_pass(desk_model):
    # no probability can reach tau > 1, so every pass-1 region is empty
    x = random_slices(np.random.default_rng(2), 2)
    with torch.no_grad():
        res = forward_slices(desk_model, ModalityAttention(32), x, Variant(True, True), tau=1.5)
    assert not res.box_valid.any()
    assert torch.equal(res.logits, res.pass1_logits)


def test_prompted_regions_change(desk_model):
    x = random_slices(np.random.default_rng(3), 3)
    with torch.no_grad():
        res = forward_slices(desk_model, ModalityAttention(32), x, Variant(False, True), tau=0.0)
        pass1 = res.pass1_logits
    # tau 0 marks every pixel, so at least one region gets a box in every slice
    assert res.box_valid.any(dim=1).all()
    changed = [not torch.equal(res.logits[b, r], pass1[b, r]) for b, r in zip(*torch.nonzero(res.box_valid).T)]
    assert all(changed)


def test_variant_names():
    assert [v.name for v in ALL_VARIANTS] == ["baseline", "+attention", "+prompting", "full"]
    assert Variant.from_name("+prompting") == Variant(False, True)
    with pytest.raises(InvalidInputError):
        Variant.from_name("nope")


def test_attention_variant_requires_params(desk_model):
    with pytest.raises(InvalidInputError):
        forward_slices(desk_model, None, random_slices(np.random.default_rng(0), 1), Variant(True, False))


# -- whole volumes ----------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.name)
def test_two_pass_contract(desk_model, variant):
    rng = np.random.default_rng(4)
    vol = rng.uniform(0, 255, size=(5, 64, 64, 4))
    att = random_attention(32, rng)
    a = two_pass_segment(desk_model, att, vol, variant, batch_size=2)
    b = two_pass_segment(desk_model, att, vol, variant, batch_size=5)
    assert a.shape == (5, 64, 64) and a.dtype == np.uint8
    assert set(np.unique(a)) <= {0, 1, 2, 4}
    np.testing.assert_array_equal(a, b)


def test_two_pass_all_background(desk_model):
    labels, alpha = two_pass_segment(desk_model, ModalityAttention(32), np.zeros((3, 64, 64, 4)),
                                     return_attention=True)
    assert labels.shape == (3, 64, 64)
    assert alpha.shape == (3, 4, 3)
    np.testing.assert_allclose(alpha, 0.25)


def test_two_pass_resizes(desk_model):
    vol = np.random.default_rng(5).uniform(0, 255, size=(2, 40, 52, 4))
    out = two_pass_segment(desk_model, ModalityAttention(32), vol)
    assert out.shape == (2, 40, 52)


def test_two_pass_rejects_unpreprocessed(desk_model):
    with pytest.raises(InvalidInputError):
        two_pass_segment(desk_model, ModalityAttention(32), np.full((1, 64, 64, 4), 300.0))
    with pytest.raises(InvalidInputError):
        two_pass_segment(desk_model, ModalityAttention(32), np.zeros((64, 64, 4)))
