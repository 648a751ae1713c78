"""Decoder blocks: shapes, residual identity, parameter accounting, checkpoints."""

import numpy as np
import pytest

from fewseg.checkpoint import load_checkpoint, save_checkpoint
from fewseg.decoder import (
    DecoderConfig,
    DecoderParams,
    count_params,
    decode_head,
    dscm_block,
    encode,
    forward,
    init_params,
)
from fewseg.errors import ConfigError, DataError, ShapeError
from fewseg.knowledge import fuse_early
from fewseg.tensor import Parameter, Tensor, add, dw4d_conv, group_norm, pw4d_conv, relu

rng = np.random.default_rng(41)


def small_config(**kw):
    base = dict(d=8, gn_groups=2, num_dscm=2, dscm_repeats=3, support_stride=2, m=9)
    base.update(kw)
    return DecoderConfig(**base).validate()


def random_maps(n, h=6):
    return [np.clip(rng.random((h, h, h, h)), 0, 1).astype(np.float32) for _ in range(n)]


class TestInitParams:
    def test_same_seed_bit_identical(self):
        cfg = small_config()
        a = init_params(cfg, seed=3)
        b = init_params(cfg, seed=3)
        assert a.names() == b.names()
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data), name

    def test_gamma_ones_biases_zero(self):
        params = init_params(small_config(), seed=1)
        for name in params.names():
            if name.endswith(".gamma"):
                assert np.all(params[name].data == 1.0)
            if name.endswith((".beta", ".bias", ".b")):
                assert np.all(params[name].data == 0.0)

    def test_default_config_count_in_band(self):
        params = init_params(DecoderConfig(use_text=True).validate(), seed=0)
        assert 3e5 <= count_params(params) <= 9e5

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            DecoderConfig(d=7, gn_groups=2).validate()
        with pytest.raises(ConfigError):
            DecoderConfig(support_stride=3).validate()
        with pytest.raises(ConfigError):
            DecoderConfig(fusion="middle").validate()


class TestCountParams:
    def test_empty_tree(self):
        assert count_params(DecoderParams({})) == 0

    def test_single_conv_with_bias(self):
        tree = {"w": np.zeros((2, 2, 3, 3)), "b": np.zeros(2)}
        assert count_params(tree) == 38


class TestEncode:
    def test_zero_volume_zero_bias_gives_zero(self):
        cfg = small_config(m=10)
        params = init_params(cfg, seed=2)
        vol = np.zeros((cfg.volume_channels, 6, 6, 6, 6), dtype=np.float32)
        out = encode(vol, params, cfg)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("stride,hw_support", [(1, 6), (2, 3)])
    def test_output_dims(self, stride, hw_support):
        cfg = small_config(m=10, support_stride=stride)
        params = init_params(cfg, seed=2)
        vol = rng.random((cfg.volume_channels, 6, 6, 6, 6)).astype(np.float32)
        out = encode(vol, params, cfg)
        assert out.dims == (cfg.d, 6, 6, hw_support, hw_support)

    def test_channel_mismatch(self):
        cfg = small_config(m=10)
        params = init_params(cfg, seed=2)
        with pytest.raises(ShapeError):
            encode(np.zeros((5, 6, 6, 6, 6), dtype=np.float32), params, cfg)


class TestDscmBlock:
    def test_residual_identity_with_zero_weights(self):
        cfg = small_config()
        params = init_params(cfg, seed=7)
        for name in params.names():
            if name.startswith("dscm0.") and not name.endswith(".gamma"):
                params[name].data[...] = 0.0
        x = Tensor(rng.random((cfg.d, 4, 4, 2, 2)).astype(np.float32))
        out = dscm_block(x, params, cfg, block=0)
        assert out.data.tobytes() == x.data.tobytes()

    def test_shape_preserved(self):
        cfg = small_config()
        params = init_params(cfg, seed=8)
        x = Tensor(rng.random((cfg.d, 4, 4, 2, 2)).astype(np.float32))
        assert dscm_block(x, params, cfg, block=1).dims == x.dims

    def test_matches_composed_primitive_oracle(self):
        """Straight-line composition of the five primitive ops plus addition."""
        cfg = small_config(num_dscm=1)
        params = init_params(cfg, seed=9, dtype=np.float64)
        x = Tensor(rng.standard_normal((cfg.d, 4, 4, 3, 3)))
        got = dscm_block(x, params, cfg, block=0)

        y = x
        for r in range(cfg.dscm_repeats):
            p = f"dscm0.rep{r}"
            y = dw4d_conv(y, params[f"{p}.dw.wq"], params[f"{p}.dw.ws"])
            y = pw4d_conv(y, params[f"{p}.pw.weight"], params[f"{p}.pw.bias"])
            y = relu(group_norm(y, cfg.gn_groups, params[f"{p}.gn.gamma"], params[f"{p}.gn.beta"]))
        want = add(y, x)
        assert np.abs(got.data - want.data).max() <= 1e-12


class TestDecodeHead:
    def test_output_dims(self):
        cfg = small_config()
        params = init_params(cfg, seed=10)
        x = Tensor(rng.random((cfg.d, 6, 6, 3, 3)).astype(np.float32))
        out = decode_head(x, params, cfg, (24, 30))
        assert out.dims == (2, 24, 30)

    def test_zero_final_conv_constant_argmax(self):
        cfg = small_config()
        params = init_params(cfg, seed=11)
        params["head.proj.w"].data[...] = 0.0
        params["head.proj.b"].data[...] = np.array([0.25, -1.0], dtype=np.float32)
        x = Tensor(rng.random((cfg.d, 6, 6, 3, 3)).astype(np.float32))
        out = decode_head(x, params, cfg, (12, 12)).data
        assert np.allclose(out[0], 0.25, atol=1e-6)
        assert np.allclose(out[1], -1.0, atol=1e-6)
        assert np.all(out.argmax(axis=0) == 0)

    def test_out_size_too_small(self):
        cfg = small_config()
        params = init_params(cfg, seed=12)
        x = Tensor(rng.random((cfg.d, 6, 6, 3, 3)).astype(np.float32))
        with pytest.raises(ConfigError):
            decode_head(x, params, cfg, (4, 4))


class TestForward:
    def test_early_fusion_shapes_and_determinism(self):
        cfg = small_config(use_text=True)
        params = init_params(cfg, seed=13)
        maps = random_maps(cfg.vision_channels)
        tmap = np.clip(rng.random((6, 6)), 0, 1).astype(np.float32)
        a = forward(maps, tmap, params, cfg, (24, 24))
        b = forward(maps, tmap, params, cfg, (24, 24))
        assert a.dims == (2, 24, 24)
        assert a.data.tobytes() == b.data.tobytes()

    def test_text_off_ignores_text_channel(self):
        cfg = small_config(use_text=False)
        params = init_params(cfg, seed=14)
        maps = random_maps(cfg.vision_channels)
        out = forward(maps, None, params, cfg, (12, 12))
        assert out.dims == (2, 12, 12)

    def test_use_text_requires_vl_inputs(self):
        cfg = small_config(use_text=True)
        params = init_params(cfg, seed=15)
        with pytest.raises(DataError):
            forward(random_maps(cfg.vision_channels), None, params, cfg, (12, 12))

    def test_late_fusion_runs_and_differs_from_early(self):
        maps = random_maps(4, h=6)
        tmap = np.clip(rng.random((6, 6)), 0, 1).astype(np.float32)
        early = forward(maps, tmap, init_params(small_config(use_text=True), seed=16),
                        small_config(use_text=True), (12, 12))
        late_cfg = small_config(fusion="late", use_text=True)
        late = forward(maps, tmap, init_params(late_cfg, seed=16), late_cfg, (12, 12))
        assert early.dims == late.dims == (2, 12, 12)
        assert not np.array_equal(early.data, late.data)

    def test_support_mask_sensitivity_via_volume(self):
        """Different support content must change the logits."""
        cfg = small_config(use_text=False)
        params = init_params(cfg, seed=17)
        maps_a = random_maps(cfg.vision_channels)
        maps_b = [m.copy() for m in maps_a]
        for m in maps_b:
            m[:, :, 3:, :] = 0.0  # zero the correlations of half the support grid
        a = forward(maps_a, None, params, cfg, (12, 12)).data
        b = forward(maps_b, None, params, cfg, (12, 12)).data
        assert np.any(a != b)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = small_config(use_text=True)
        params = init_params(cfg, seed=18)
        save_checkpoint(tmp_path / "ck", params, cfg)
        params2, cfg2 = load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg
        assert sorted(params2.names()) == sorted(params.names())
        for name in params.names():
            assert params2[name].data.tobytes() == params[name].data.tobytes()
