import numpy as np
import pytest

from lytnet.model import (REPORTED_MSEF_DELTA, ConfigError, ModelConfig, ablation_table,
                          block_param_counts, count_params, cwd_decoder_param_counts, cwd_forward,
                          init_params, mhsa_forward, model_forward, msef_forward,
                          msef_param_formula)
from lytnet.tensor import Tensor, no_grad, precision


def tiny():
    return ModelConfig(base_width=4, mhsa_embed_dim=4, mhsa_heads=2, msef_hidden=2,
                       cwd_width=4, cwd_embed_dim=4, final_head_widths=(4, 3))


class TestConfig:
    def test_defaults_validate(self):
        cfg = ModelConfig()
        assert (cfg.use_y_cwd, cfg.use_uv_cwd, cfg.use_msef) == (False, True, True)

    def test_heads_must_divide_embedding(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(mhsa_embed_dim=30, mhsa_heads=4)

    def test_head_must_end_in_rgb(self):
        with pytest.raises(ConfigError, match="RGB"):
            ModelConfig(final_head_widths=(24, 4))

    def test_roundtrip_and_unknown_keys(self):
        cfg = ModelConfig(use_y_cwd=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"width": 3})

    def test_with_variant(self):
        cfg = ModelConfig().with_variant(y_cwd=True, msef=False)
        assert cfg.use_y_cwd and cfg.use_uv_cwd and not cfg.use_msef


class TestParamCounts:
    def test_default_in_band(self):
        assert 40_000 <= count_params(init_params()) <= 50_000

    def test_msef_formula_matches_built_block(self):
        p = init_params()
        assert block_param_counts(p)["msef"] == msef_param_formula(32, 2) == REPORTED_MSEF_DELTA

    def test_msef_formula_by_hand(self):
        # LayerNorm 2C + FC C*h+h + FC h*C+C + depthwise 9C + bias C
        assert msef_param_formula(4, 2) == 8 + 10 + 12 + 36 + 4

    def test_msef_toggle_delta(self):
        cfg = ModelConfig()
        on = count_params(init_params(cfg.with_variant(msef=True)))
        off = count_params(init_params(cfg.with_variant(msef=False)))
        assert on - off == 546

    def test_tiny_config_by_hand(self):
        cfg = tiny()
        conv = lambda cin, cout: 9 * cin * cout + cout  # noqa: E731
        mhsa = lambda c, d: 3 * c * d + d * c + c  # noqa: E731
        y_path = conv(1, 4) + mhsa(4, 4) + conv(4, 4)
        uv_cwd = conv(2, 4) + 3 * conv(4, 4) + mhsa(4, 4) + 2 * conv(4, 4) + conv(4, 4)
        msef = msef_param_formula(4, 2)
        head = conv(8, 4) + conv(4, 3)
        assert y_path + uv_cwd + msef + head == count_params(init_params(cfg))
        assert block_param_counts(init_params(cfg)) == {
            "y.path": y_path, "uv.cwd": uv_cwd, "msef": msef, "head": head}

    def test_decoder_interpolation_under_half(self):
        dec = cwd_decoder_param_counts(ModelConfig())
        assert dec["interpolation"] < 0.5 * dec["transposed"]

    def test_ablation_rows(self):
        rows = ablation_table()
        assert len(rows) == 6
        default = next(r for r in rows if (r["y_cwd"], r["uv_cwd"], r["msef"]) == (False, True, True))
        assert default["params"] == count_params(init_params())
        assert default["reported"] == 44_923


class TestInit:
    def test_seeded_and_deterministic(self):
        a, b = init_params(seed=3), init_params(seed=3)
        for n in a.names():
            np.testing.assert_array_equal(a[n].data, b[n].data)
        c = init_params(seed=4)
        assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())

    def test_scheme(self):
        p = init_params(seed=0)
        assert np.abs(p["uv.cwd.mhsa.q.w"].data).max() <= 0.04 + 1e-7
        assert not p["head.0.b"].data.any()
        assert np.all(p["msef.ln.gain"].data == 1.0)
        bound = np.sqrt(6.0 / (9 * 64))
        assert np.abs(p["head.0.w"].data).max() <= bound
        assert p["head.0.w"].dtype == np.float32


class TestBlocks:
    def test_msef_identity_when_expansion_zeroed(self):
        cfg = ModelConfig()
        p = init_params(cfg, seed=1)
        p["msef.expand.w"] = Tensor(np.zeros_like(p["msef.expand.w"].data))
        p["msef.expand.b"] = Tensor(np.zeros_like(p["msef.expand.b"].data))
        rng = np.random.default_rng(0)
        with no_grad():
            for _ in range(100):
                x = rng.normal(0, 1, (1, 8, 8, 32)).astype(np.float32)
                out = msef_forward(Tensor(x), p)
                assert np.array_equal(out.data, x)

    def test_mhsa_permutation_equivariant(self):
        p = init_params(seed=2)
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (1, 4, 4, 32))
        perm = rng.permutation(16)
        with precision(np.float64), no_grad():
            p64 = p.astype(np.float64)
            out = mhsa_forward(Tensor(x), p64, "y.path.mhsa", 4).data.reshape(16, 32)
            xp = x.reshape(16, 32)[perm].reshape(1, 4, 4, 32)
            outp = mhsa_forward(Tensor(xp), p64, "y.path.mhsa", 4).data.reshape(16, 32)
        assert np.abs(outp - out[perm]).max() < 1e-5

    def test_cwd_shape_and_divisibility(self):
        p = init_params(tiny())
        with no_grad():
            out = cwd_forward(Tensor(np.zeros((1, 16, 8, 2), np.float32)), p, "uv.cwd", 2)
            assert out.shape == (1, 16, 8, 4)
            with pytest.raises(ValueError, match="divisible by 8"):
                cwd_forward(Tensor(np.zeros((1, 12, 8, 2), np.float32)), p, "uv.cwd", 2)


class TestForward:
    @pytest.mark.parametrize("h,w", [(17, 23), (64, 64), (250, 187)])
    def test_shape_preserved(self, h, w):
        p = init_params()
        x = np.random.default_rng(0).random((1, h, w, 3)).astype(np.float32)
        with no_grad():
            assert model_forward(x, p).shape == (1, h, w, 3)

    @pytest.mark.parametrize("variant", [(True, True, True), (True, False, False), (False, False, True)])
    def test_variants_run(self, variant):
        p = init_params(tiny().with_variant(*variant))
        with no_grad():
            assert model_forward(np.zeros((1, 16, 24, 3), np.float32), p).shape == (1, 16, 24, 3)

    def test_single_image_gets_batched(self):
        with no_grad():
            assert model_forward(np.zeros((16, 16, 3), np.float32), init_params(tiny())).shape == (1, 16, 16, 3)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="minimum"):
            model_forward(np.zeros((1, 15, 40, 3), np.float32), init_params(tiny()))

    def test_bad_channels(self):
        with pytest.raises(ValueError, match="RGB"):
            model_forward(np.zeros((1, 16, 16, 4), np.float32), init_params(tiny()))

    def test_batch_items_independent(self):
        p = init_params(tiny())
        rng = np.random.default_rng(1)
        x = rng.random((2, 16, 16, 3)).astype(np.float32)
        with no_grad():
            both = model_forward(x, p).data
            first = model_forward(x[:1], p).data
        np.testing.assert_allclose(both[:1], first, atol=1e-6)
