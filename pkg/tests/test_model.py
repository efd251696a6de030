import time

import numpy as np
import pytest
import torch

from conftest import directional_fd, random_slices, rel_err
from subregion_seg.errors import ArchiveFormatError, ConfigError, InvalidInputError
from subregion_seg.model import (
    FusedFeatures,
    ModelConfig,
    arrays_to_state,
    build_model,
    load_arrays,
    mean_fuse,
    save_arrays,
    stage_strides,
    state_to_arrays,
)


def test_paper_config_stage_widths():
    cfg = ModelConfig.paper()
    assert cfg.encoder_dims == [64, 128, 160, 320]
    assert cfg.encoder_depths == [2, 2, 6, 2]
    assert cfg.prompt_embed_dim == 256 and cfg.decoder_layers == 2 and cfg.decoder_heads == 8
    model = build_model(cfg, seed=0)
    assert model.stage_widths() == [64, 128, 160, 320]
    assert model.num_parameters() > 1_000_000


def test_desk_preset_builds_fast():
    t0 = time.perf_counter()
    model = build_model(ModelConfig.desk(), seed=0)
    assert time.perf_counter() - t0 < 1.0
    assert model.stage_widths() == [8, 16, 16, 32]
    assert model.config.input_size == (64, 64) and model.config.prompt_embed_dim == 32


def test_same_seed_same_parameters():
    a = build_model(ModelConfig.desk(), seed=5).state_dict()
    b = build_model(ModelConfig.desk(), seed=5).state_dict()
    c = build_model(ModelConfig.desk(), seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(1)
    expected = torch.rand(3)
    torch.manual_seed(1)
    build_model(ModelConfig.desk(), seed=0)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize(
    "change,fragment",
    [
        (dict(encoder_depths=[1, 1, 1]), "len(encoder_dims)"),
        (dict(decoder_heads=5), "divisible by decoder_heads"),
        (dict(in_channels=3), "in_channels"),
        (dict(input_size=(60, 64)), "input_size"),
        (dict(feature_stage=0), "feature_stage"),
    ],
)
def test_invalid_config_lists_violation(change, fragment):
    cfg = ModelConfig.desk()
    for k, v in change.items():
        setattr(cfg, k, v)
    with pytest.raises(ConfigError) as info:
        build_model(cfg)
    assert fragment in str(info.value)


def test_config_dict_round_trip():
    cfg = ModelConfig.desk(in_channels=1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_stage_strides():
    assert stage_strides(4) == [4, 8, 16, 16]


# -- encoder --------------------------------------------------------------------------


def test_identical_channels_identical_maps(desk_model):
    x = np.random.default_rng(0).uniform(0, 255, (64, 64, 1)).repeat(4, axis=2)
    with torch.no_grad():
        f = desk_model.encode_per_modality(x)
    for m in range(1, 4):
        assert torch.equal(f.per_modality[0, m], f.per_modality[0, 0])
        assert torch.equal(f.skip[0, m], f.skip[0, 0])


def test_feature_shape_matches_stride(desk_model):
    with torch.no_grad():
        f = desk_model.encode_per_modality(np.zeros((2, 64, 64, 4)))
    assert tuple(f.per_modality.shape) == (2, 4, 32, 4, 4)
    assert tuple(f.skip.shape) == (2, 4, 8, 16, 16)
    assert f.stage == 3 and f.n_modalities == 4


def test_modality_permutation_permutes_maps(desk_model):
    x = random_slices(np.random.default_rng(1), 2)
    order = [2, 0, 3, 1]
    with torch.no_grad():
        f = desk_model.encode_per_modality(x)
        g = desk_model.encode_per_modality(x[..., order])
    torch.testing.assert_close(g.per_modality, f.per_modality[:, order], rtol=0, atol=1e-5)
    torch.testing.assert_close(g.skip, f.skip[:, order], rtol=0, atol=1e-5)


def test_parameter_count_independent_of_modalities():
    one = build_model(ModelConfig.desk(in_channels=1)).num_parameters()
    four = build_model(ModelConfig.desk(in_channels=4)).num_parameters()
    assert one == four


def test_encoder_rejects_wrong_shape(desk_model):
    with pytest.raises(InvalidInputError):
        desk_model.encode_per_modality(np.zeros((64, 64, 3)))
    with pytest.raises(InvalidInputError):
        desk_model.encode_per_modality(np.zeros((32, 64, 4)))


# -- prompt encoder --------------------------------------------------------------------


def test_prompt_embedding_properties(desk_model):
    with torch.no_grad():
        a = desk_model.encode_prompt((10, 12, 30, 40))
        b = desk_model.encode_prompt((10, 12, 30, 40))
        full = desk_model.encode_prompt((0, 0, 63, 63))
        shifted = desk_model.encode_prompt((11, 13, 31, 41))
        point = desk_model.encode_prompt((5, 5, 5, 5))
    assert a.shape == (32,)
    assert torch.equal(a, b)
    assert torch.isfinite(full).all() and torch.isfinite(point).all()
    assert not torch.allclose(a, shifted)


@pytest.mark.parametrize("box", [(-1, 0, 5, 5), (0, 0, 64, 5), (10, 0, 5, 5), (0, 10, 5, 5)])
def test_prompt_rejects_bad_box(desk_model, box):
    with pytest.raises(InvalidInputError):
        desk_model.encode_prompt(box)


# -- decoder -----------------------------------------------------------------------------


def test_decode_shape_finite_deterministic(desk_model):
    x = random_slices(np.random.default_rng(2), 3)
    with torch.no_grad():
        fused = mean_fuse(desk_model.encode_per_modality(x))
        a = desk_model.decode_mask(fused)
        b = desk_model.decode_mask(fused)
        p = desk_model.decode_mask(fused, desk_model.encode_prompt(torch.tensor([[1, 2, 30, 40]] * 3)))
    assert tuple(a.shape) == (3, 3, 64, 64)
    assert torch.isfinite(a).all() and torch.isfinite(p).all()
    assert torch.equal(a, b)
    assert not torch.allclose(a, p)


def test_has_prompt_mask_selects_no_prompt_token(desk_model):
    x = random_slices(np.random.default_rng(3), 2)
    with torch.no_grad():
        fused = mean_fuse(desk_model.encode_per_modality(x))
        emb = desk_model.encode_prompt(torch.tensor([[1, 2, 30, 40], [3, 3, 9, 9]]))
        mixed = desk_model.decode_mask(fused, emb, has_prompt=torch.tensor([True, False]))
        plain = desk_model.decode_mask(fused)
        prompted = desk_model.decode_mask(fused, emb)
    torch.testing.assert_close(mixed[1], plain[1])
    torch.testing.assert_close(mixed[0], prompted[0])


def test_decode_rejects_wrong_features(desk_model):
    bad = FusedFeatures(torch.zeros(1, 16, 4, 4), torch.zeros(1, 8, 16, 16))
    with pytest.raises(InvalidInputError):
        desk_model.decode_mask(bad)


def test_encode_fuse_decode_gradient_matches_fd(desk_model64):
    rng = np.random.default_rng(0)
    x = random_slices(rng, 2)
    target = torch.from_numpy((rng.random((2, 3, 64, 64)) > 0.5).astype(np.float64))
    params = [p for p in desk_model64.parameters()]

    def loss():
        fused = mean_fuse(desk_model64.encode_per_modality(x))
        out = desk_model64.decode_mask(fused, desk_model64.encode_prompt(torch.tensor([[4, 4, 40, 50]] * 2)))
        return torch.nn.functional.binary_cross_entropy_with_logits(out, target)

    for _ in range(3):
        analytic, numeric = directional_fd(loss, params, rng, h=1e-6)
        assert rel_err(analytic, numeric) <= 1e-4


# -- checkpoint arrays --------------------------------------------------------------------


def test_array_round_trip(tmp_path, desk_model):
    arrays = state_to_arrays(desk_model, "model")
    save_arrays(tmp_path / "m.npz", arrays, {"k": 1})
    back, meta = load_arrays(tmp_path / "m.npz")
    assert meta == {"k": 1}
    other = build_model(ModelConfig.desk(), seed=99)
    arrays_to_state(other, back, "model", tmp_path)
    for k, v in desk_model.state_dict().items():
        assert torch.equal(other.state_dict()[k], v)


def test_array_load_checks_shapes(tmp_path, desk_model):
    arrays = state_to_arrays(desk_model, "model")
    key = next(iter(arrays))
    arrays[key] = np.zeros((1,))
    with pytest.raises(ArchiveFormatError) as info:
        arrays_to_state(build_model(ModelConfig.desk()), arrays, "model", tmp_path)
    assert info.value.key == key
