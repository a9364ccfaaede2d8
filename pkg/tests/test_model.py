import numpy as np
import pytest

from invrescale.invnet import SplitMode, SplitSpec
from invrescale.latent_codec import AeConfig, ConfigError, FormatError
from invrescale.model import (LOGIT_EPS, ModelConfig, RescaleArtifact, RescaleModel, Variant,
                              load_checkpoint, logit_clamped, save_checkpoint)
from invrescale.tensor import InvalidArgument, Tensor


def perturbed(cfg, seed=0, sd=0.01):
    m = RescaleModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.net_parameters():
        p.data += rng.normal(0, sd, p.shape).astype(np.float32)
    return m


def image(hw=32, seed=0):
    return np.random.default_rng(seed).random((3, hw, hw)).astype(np.float32)


class TestConfig:
    def test_scale_validated(self):
        with pytest.raises(ConfigError):
            ModelConfig(scale=3)

    def test_ae_only_for_meta(self):
        with pytest.raises(ConfigError):
            ModelConfig(scale=2, variant=Variant.BASELINE, ae=AeConfig())
        with pytest.raises(ConfigError):
            ModelConfig(scale=2, variant=Variant.META)

    def test_alpha_needs_alpha_split(self):
        with pytest.raises(ConfigError):
            ModelConfig(scale=2, variant=Variant.ALPHA, split=SplitSpec())

    def test_dict_roundtrip(self):
        for v in Variant:
            cfg = ModelConfig.for_variant(v, 4, blocks_per_stage=2)
            assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestShapes:
    @pytest.mark.parametrize("variant, scale, zc", [
        ("baseline", 2, 9), ("alpha", 2, 8), ("meta", 2, 9),
        ("baseline", 4, 45), ("alpha", 4, 44),
    ])
    def test_forward_shapes(self, variant, scale, zc):
        m = RescaleModel(ModelConfig.for_variant(variant, scale, blocks_per_stage=1))
        out = m.forward(Tensor(image(32)))
        h = 32 // scale
        assert out.lr_rgb.shape == (3, h, h)
        assert out.z.shape == (zc, h, h)
        assert (out.alpha_logit is not None) == (variant == "alpha")
        assert (out.code is not None) == (variant == "meta")

    def test_meta_code_shape(self):
        m = RescaleModel(ModelConfig.for_variant("meta", 2, blocks_per_stage=1,
                                                 ae=AeConfig(hidden_width=8)))
        assert m.forward(Tensor(image(128))).code.s.shape == (4, 16, 16)

    def test_post_split_alpha_from_latent(self):
        cfg = ModelConfig(scale=2, variant=Variant.ALPHA, blocks_per_stage=1,
                          split=SplitSpec(SplitMode.POST_SPLIT_ALPHA))
        out = RescaleModel(cfg).forward(Tensor(image(16)))
        assert out.alpha_logit.shape == (1, 8, 8)
        assert out.z.shape == (8, 8, 8)

    def test_indivisible_input(self):
        m = RescaleModel(ModelConfig.for_variant("baseline", 4, blocks_per_stage=1))
        with pytest.raises(InvalidArgument):
            m.forward(Tensor(image(12)))

    def test_batched_matches_single(self):
        m = perturbed(ModelConfig.for_variant("alpha", 2, blocks_per_stage=2))
        a, b = image(16, 1), image(16, 2)
        both = m.forward(Tensor(np.stack([a, b])))
        one = m.forward(Tensor(b))
        np.testing.assert_allclose(both.lr_rgb.data[1], one.lr_rgb.data, atol=1e-6)


class TestFreshModel:
    def test_lr_is_box_average(self):
        """At init the blocks are identities, so the LR image is the 2x2 mean."""
        x = image(16)
        out = RescaleModel(ModelConfig.for_variant("baseline", 2, blocks_per_stage=2)).forward(Tensor(x))
        ref = x.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(out.lr_rgb.data, ref, atol=1e-6)

    def test_alpha_is_high_mean_at_init(self):
        x = image(16)
        out = RescaleModel(ModelConfig.for_variant("alpha", 2, blocks_per_stage=1)).forward(Tensor(x))
        from invrescale.wavelet import haar_forward
        hs = haar_forward(Tensor(x))
        np.testing.assert_allclose(out.alpha_logit.data[0], hs.high.data.mean(axis=0) / 2, atol=1e-6)


class TestBijectivity:
    @pytest.mark.parametrize("variant", ["baseline", "alpha", "meta"])
    @pytest.mark.parametrize("scale, tol", [(2, 1e-3), (4, 5e-3)])
    def test_true_latent_roundtrip(self, variant, scale, tol):
        kw = {"ae": AeConfig(hidden_width=8)} if variant == "meta" else {}
        m = perturbed(ModelConfig.for_variant(variant, scale, blocks_per_stage=4, **kw))
        x = image(32)
        out = m.forward(Tensor(x))
        recon = m.inverse(out.lr_rgb, out.alpha_logit, out.z)
        assert np.abs(recon.data - x).max() < tol

    def test_post_split_roundtrip(self):
        cfg = ModelConfig(scale=4, variant=Variant.ALPHA, blocks_per_stage=2,
                          split=SplitSpec(SplitMode.POST_SPLIT_ALPHA))
        m = perturbed(cfg)
        x = image(32)
        out = m.forward(Tensor(x))
        assert np.abs(m.inverse(out.lr_rgb, out.alpha_logit, out.z).data - x).max() < 5e-3

    def test_alpha_artifact_roundtrip(self):
        m = perturbed(ModelConfig.for_variant("alpha", 2, blocks_per_stage=4))
        x = image(32)
        art, z = m.downscale(x)
        assert art.alpha.shape == (1, 16, 16)
        assert np.all((art.alpha > 0) & (art.alpha < 1))
        assert np.abs(m.upscale(art, z_override=z).data - x).max() < 1e-3

    def test_zero_latent_default(self):
        m = perturbed(ModelConfig.for_variant("baseline", 2, blocks_per_stage=2))
        out = m.forward(Tensor(image(16)))
        a = m.inverse(out.lr_rgb)
        b = m.inverse(out.lr_rgb, z_hat=np.zeros((9, 8, 8), np.float32))
        np.testing.assert_array_equal(a.data, b.data)

    def test_latent_shape_checked(self):
        m = RescaleModel(ModelConfig.for_variant("baseline", 2, blocks_per_stage=1))
        with pytest.raises(InvalidArgument):
            m.inverse(np.zeros((3, 8, 8), np.float32), z_hat=np.zeros((8, 8, 8), np.float32))


class TestRemovedChannelPlacement:
    def test_removed_channel_is_recovered_not_stored(self):
        """Changing the first high sub-band leaves the stored quantities' count intact and
        the reconstruction exact, so it must be rebuilt from alpha."""
        m = RescaleModel(ModelConfig.for_variant("alpha", 2, blocks_per_stage=1))
        x = image(16, 4)
        out = m.forward(Tensor(x))
        assert out.lr_rgb.shape[0] + out.alpha_logit.shape[0] + out.z.shape[0] == 12
        recon = m.inverse(out.lr_rgb, out.alpha_logit, out.z)
        assert np.abs(recon.data - x).max() < 1e-5

    def test_alpha_perturbation_changes_output(self):
        m = RescaleModel(ModelConfig.for_variant("alpha", 2, blocks_per_stage=1))
        out = m.forward(Tensor(image(16)))
        base = m.inverse(out.lr_rgb, out.alpha_logit, out.z).data
        bumped = m.inverse(out.lr_rgb, out.alpha_logit + 0.1, out.z).data
        assert np.abs(base - bumped).max() > 1e-3


class TestLogit:
    def test_centre(self):
        assert logit_clamped(0.5) == 0.0

    def test_clamped_extremes(self):
        assert logit_clamped(0.0) == pytest.approx(np.log(LOGIT_EPS / (1 - LOGIT_EPS)))
        assert logit_clamped(0.0) == pytest.approx(-13.8155, abs=1e-4)
        assert logit_clamped(1.0) == pytest.approx(13.8155, abs=1e-4)

    def test_bad_eps(self):
        with pytest.raises(InvalidArgument):
            logit_clamped(0.3, eps=0.6)


class TestArtifactApi:
    def test_variant_mismatch(self):
        m = RescaleModel(ModelConfig.for_variant("meta", 2, blocks_per_stage=1, ae=AeConfig(hidden_width=4)))
        with pytest.raises(InvalidArgument, match="baseline"):
            m.upscale(RescaleArtifact(np.zeros((3, 8, 8), np.float32)))

    def test_alpha_and_meta_exclusive(self):
        m = RescaleModel(ModelConfig.for_variant("meta", 2, blocks_per_stage=1, ae=AeConfig(hidden_width=4)))
        art, _ = m.downscale(image(32))
        with pytest.raises(InvalidArgument):
            RescaleArtifact(art.lr_rgb, alpha=np.full((1, 16, 16), 0.5), meta=art.meta)

    def test_deterministic_downscale(self):
        m1 = perturbed(ModelConfig.for_variant("alpha", 2, blocks_per_stage=2), seed=5)
        m2 = perturbed(ModelConfig.for_variant("alpha", 2, blocks_per_stage=2), seed=5)
        a1, _ = m1.downscale(image(16))
        a2, _ = m2.downscale(image(16))
        assert a1.lr_rgb.tobytes() == a2.lr_rgb.tobytes()
        assert a1.alpha.tobytes() == a2.alpha.tobytes()


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["baseline", "alpha", "meta"])
    def test_bit_exact(self, tmp_path, variant):
        kw = {"ae": AeConfig(hidden_width=4)} if variant == "meta" else {}
        m = perturbed(ModelConfig.for_variant(variant, 4, blocks_per_stage=2, **kw), seed=3)
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p, extra={"note": "x"})
        back = load_checkpoint(p)
        assert back.cfg == m.cfg
        assert back.extra == {"note": "x"}
        for (n1, a), (n2, b) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
        save_checkpoint(back, tmp_path / "again.ckpt", extra={"note": "x"})
        assert p.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"hello world")
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        m = RescaleModel(ModelConfig.for_variant("baseline", 2, blocks_per_stage=1))
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError, match="params"):
            load_checkpoint(p)
