import pytest
import torch

from panoptic_fcn.errors import ConfigurationError
from panoptic_fcn.feature_encoder import (
    FeatureEncoder, HighResFeature, build_high_res_feature, encode_feature, instance_logits,
    produce_instances,
)
from panoptic_fcn.nn_core import coord_channels, init_fan_in_uniform


def pyramid(seed=0, c=8, sizes=(16, 8, 4)):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(c, s, s, generator=g, dtype=torch.float64) for s in sizes]


def module(mode="semantic_fpn", seed=0):
    m = HighResFeature(8, 16, 3, mode).double()
    init_fan_in_uniform(m, torch.Generator().manual_seed(seed))
    return m


@pytest.mark.parametrize("mode", ["p2", "summed", "semantic_fpn"])
def test_modes_produce_finest_resolution(mode):
    out = build_high_res_feature(pyramid(), module(mode))
    assert out.shape == (16, 16, 16)


def test_summed_with_zero_coarse_stages_equals_p2():
    m = module()
    pyr = pyramid()
    pyr[1].zero_()
    pyr[2].zero_()
    assert torch.allclose(build_high_res_feature(pyr, m, "summed"), build_high_res_feature(pyr, m, "p2"))


def test_semantic_fpn_constant_pyramid_is_flat():
    m = module()
    pyr = [torch.full((8, s, s), 0.3, dtype=torch.float64) for s in (16, 8, 4)]
    out = build_high_res_feature(pyr, m)
    assert out.var(dim=(-2, -1)).max() <= 1e-6


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        HighResFeature(8, 16, 3, "p5")
    with pytest.raises(ConfigurationError):
        module()([p.unsqueeze(0) for p in pyramid()], "sum")


def test_encoder_shape_and_coordinate_convention():
    enc = FeatureEncoder(16).double()
    fe = encode_feature(torch.randn(16, 12, 10, dtype=torch.float64), enc)
    assert fe.shape == (16, 12, 10)
    c = coord_channels(12, 10)
    assert (c[0, 0, 0], c[1, 0, 0], c[0, -1, -1], c[1, -1, -1]) == (-1, -1, 1, 1)
    assert FeatureEncoder(16, use_coords=False).block.in_channels == 16
    assert enc.block.in_channels == 18


def test_zero_kernel_gives_half():
    fe = torch.randn(8, 5, 5)
    assert torch.all(produce_instances(torch.zeros(8), fe) == 0.5)


def test_one_hot_kernel_selects_channel():
    fe = torch.randn(8, 5, 5, dtype=torch.float64)
    k = torch.zeros(8, dtype=torch.float64)
    k[3] = 1.0
    assert torch.allclose(produce_instances(k, fe)[0], torch.sigmoid(fe[3]))


def test_batched_equals_sequential_and_homogeneity():
    g = torch.Generator().manual_seed(1)
    fe = torch.randn(8, 6, 6, generator=g, dtype=torch.float64)
    ks = torch.randn(3, 8, generator=g, dtype=torch.float64)
    batched = produce_instances(ks, fe)
    assert batched.shape == (3, 6, 6)
    for i in range(3):
        assert (batched[i] - produce_instances(ks[i], fe)[0]).abs().max() <= 1e-6
    assert torch.allclose(instance_logits(2.5 * ks, fe), 2.5 * instance_logits(ks, fe), atol=1e-6)


def test_translation_consistency():
    g = torch.Generator().manual_seed(2)
    fe = torch.randn(8, 7, 7, generator=g, dtype=torch.float64)
    k = torch.randn(8, generator=g, dtype=torch.float64)
    shifted = torch.roll(fe, 1, dims=2)
    a = instance_logits(k, fe)[0]
    b = instance_logits(k, shifted)[0]
    assert torch.allclose(a[:, 1:-1], b[:, 2:])


def test_length_mismatch():
    with pytest.raises(ConfigurationError):
        produce_instances(torch.zeros(2, 7), torch.zeros(8, 4, 4))
