import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wkvseg.backbone import (
    REFERENCE_PARAMS,
    Backbone,
    BackboneConfig,
    backbone_forward,
    build_backbone,
    pad_to_multiple,
    param_count,
)
from wkvseg.core import Module, Tape, ops
from wkvseg.errors import ConfigurationError, ContractError
from wkvseg.gradsuite import randomize

TINY = BackboneConfig((1, 1, 2), (8, 8, 8))


class TestConfig:
    @pytest.mark.parametrize("name,blocks,channels", [
        ("T", (2, 4, 14), (32, 64, 192)),
        ("S", (2, 4, 14), (64, 128, 384)),
        ("B", (2, 4, 14), (128, 256, 768)),
    ])
    def test_variants(self, name, blocks, channels):
        cfg = BackboneConfig.from_variant(name)
        assert cfg.blocks == blocks and cfg.channels == channels and cfg.strides == (4, 8, 16)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig.from_variant("XL")

    @pytest.mark.parametrize("kwargs", [
        {"blocks": (1, 1), "channels": (8, 8)},
        {"blocks": (1, 1, 1), "channels": (8, 8, 6)},
        {"blocks": (1, 1, 1), "channels": (7, 8, 8)},
        {"blocks": (1, -1, 1), "channels": (8, 8, 8)},
        {"blocks": (1, 1, 1), "channels": (8, 8, 8), "strides": (2, 4, 8)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            BackboneConfig(**kwargs)

    def test_json_variant(self):
        cfg, seed = BackboneConfig.from_json(json.dumps({"variant": "S", "seed": 3}))
        assert cfg == BackboneConfig.from_variant("S") and seed == 3

    def test_json_explicit(self):
        cfg, seed = BackboneConfig.from_json('{"blocks": [1, 2, 3], "channels": [8, 16, 32]}')
        assert cfg.blocks == (1, 2, 3) and cfg.channels == (8, 16, 32) and seed == 0

    def test_json_missing_key(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig.from_dict({"blocks": [1, 1, 1]})


class TestParamCount:
    @pytest.mark.parametrize("name", ["T", "S", "B"])
    def test_published_sizes(self, name):
        n = param_count(build_backbone(BackboneConfig.from_variant(name)))
        assert abs(n / REFERENCE_PARAMS[name] - 1.0) <= 0.15

    def test_empty(self):
        assert param_count(Module()) == 0

    def test_block_counts(self):
        model = build_backbone(BackboneConfig.from_variant("T"))
        assert (len(model.stage1), len(model.stage2), len(model.stage3)) == (2, 4, 14)


class TestForward:
    def test_variant_t_shapes(self):
        pyr = backbone_forward(build_backbone(BackboneConfig.from_variant("T")), np.zeros((64, 64, 3)))
        assert (pyr.x_hr.shape, pyr.x_mr.shape, pyr.x.shape) == ((16, 16, 32), (8, 8, 64), (4, 4, 192))

    def test_variant_s_large_input_shapes(self):
        model = build_backbone(BackboneConfig.from_variant("S"))
        pyr = model(np.zeros((1024, 1024, 3), np.float32))
        assert (pyr.x_hr.shape, pyr.x_mr.shape, pyr.x.shape) == ((256, 256, 64), (128, 128, 128), (64, 64, 384))

    @given(st.integers(1, 5), st.integers(1, 5))
    def test_shape_contract(self, a, b):
        pyr = build_backbone(TINY)(np.zeros((16 * a, 16 * b, 3), np.float32))
        assert pyr.x_hr.shape == (4 * a, 4 * b, 8)
        assert pyr.x_mr.shape == (2 * a, 2 * b, 8)
        assert pyr.x.shape == (a, b, 8)

    def test_indivisible_input(self):
        with pytest.raises(ContractError):
            build_backbone(TINY)(np.zeros((24, 32, 3)))
        with pytest.raises(ContractError):
            build_backbone(TINY)(np.zeros((32, 32)))

    def test_seed_determinism(self):
        a, b = build_backbone(TINY, 5), build_backbone(TINY, 5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        assert not np.array_equal(build_backbone(TINY, 6).stem1.weight.data, a.stem1.weight.data)

    def test_zero_image_trace_through(self):
        model = build_backbone(TINY, 1)
        img = np.zeros((32, 32, 3), np.float32)
        pyr = model(img)
        stem = model.stem2(ops.gelu(model.stem1(img)))
        np.testing.assert_array_equal(pyr.x_hr.data, stem.data)
        mr = model.down2(stem)
        np.testing.assert_array_equal(pyr.x_mr.data, mr.data)
        np.testing.assert_allclose(pyr.x.data, model.down3(mr).data, atol=1e-6)

    def test_every_parameter_receives_gradient(self, rng):
        model = randomize(Backbone(TINY, rng), rng)
        for p in model.parameters():
            p.grad = None
        with Tape() as tape:
            pyr = model(rng.uniform(size=(32, 32, 3)))
            loss = ops.add(ops.add(ops.sum(ops.square(pyr.x)), ops.sum(pyr.x_mr)), ops.sum(pyr.x_hr))
        tape.backward(loss)
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert np.abs(p.grad).max() > 0, name


def test_pad_to_multiple():
    img = np.ones((30, 17, 3))
    out = pad_to_multiple(img)
    assert out.shape == (32, 32, 3)
    assert out[:30, :17].sum() == img.sum() and out[30:].sum() == 0
    assert pad_to_multiple(np.ones((16, 32, 3))).shape == (16, 32, 3)
