import numpy as np
import pytest

from lph import backbones as B
from lph import tensor as T
from lph import toyworld as W
from lph.schedule import build_linear_schedule


@pytest.fixture(scope="module")
def small_world():
    insts = W.generate_dataset(6, base_seed=41)
    spaces = {"S": W.Autoencoder("S", 101), "T": W.Autoencoder("T", 202)}
    return insts, spaces


class TestConditioning:
    def test_structure_fields(self, small_world):
        insts, spaces = small_world
        c = B.build_conditioning("structure", insts[0], spaces)
        assert c.garment_latent.shape == (4, 16, 16)
        assert c.masked_latent.shape == (4, 16, 16)

    def test_texture_fields(self, small_world):
        insts, spaces = small_world
        c = B.build_conditioning("texture", insts[0], spaces)
        assert c.mask_coarse.shape == (1, 16, 16)
        assert c.pose_coarse.shape == (2, 16, 16)
        assert c.swatch.shape == (32, 32, 3)
        assert 0 <= c.class_id < 4

    def test_wrong_record_type_rejected(self, small_world):
        insts, spaces = small_world
        s = B.build_conditioning("structure", insts[0], spaces)
        t = B.build_conditioning("texture", insts[0], spaces)
        z = np.zeros((4, 16, 16), dtype=np.float32)
        with pytest.raises(B.ConditioningError):
            B.predict_noise(B.Denoiser("structure", 0), z, 5, t, allow_untrained=True)
        with pytest.raises(B.ConditioningError):
            B.predict_noise(B.Denoiser("texture", 0), z, 5, s, allow_untrained=True)

    def test_pool_average(self):
        plane = np.arange(64 * 64, dtype=np.float32).reshape(64, 64)
        pooled = B.avg_pool4(plane)
        assert pooled.shape == (16, 16)
        assert pooled[0, 0] == pytest.approx(plane[:4, :4].mean())

    def test_swatch_tokens(self, small_world):
        insts, _ = small_world
        toks = B.swatch_tokens_raw(insts[0].garment_sample)
        assert toks.shape == (16, 192)
        # first token is the top-left 8x8 patch, row-major
        expect = insts[0].garment_sample[:8, :8].reshape(-1)
        assert np.array_equal(toks[0], expect)


class TestDenoiserForward:
    @pytest.mark.parametrize("kind", B.KINDS)
    def test_shape_and_determinism(self, small_world, kind):
        insts, spaces = small_world
        model = B.Denoiser(kind, 3)
        cond = B.build_conditioning(kind, insts[0], spaces)
        z = np.random.default_rng(0).standard_normal((4, 16, 16)).astype(np.float32)
        a = B.predict_noise(model, z, 10, cond, allow_untrained=True)
        b = B.predict_noise(model, z, 10, cond, allow_untrained=True)
        assert a.shape == (4, 16, 16)
        assert np.array_equal(a, b)

    def test_timestep_is_live(self, small_world):
        insts, spaces = small_world
        model = B.Denoiser("structure", 3)
        cond = B.build_conditioning("structure", insts[0], spaces)
        z = np.random.default_rng(1).standard_normal((4, 16, 16)).astype(np.float32)
        a = B.predict_noise(model, z, 0, cond, allow_untrained=True)
        b = B.predict_noise(model, z, 150, cond, allow_untrained=True)
        assert not np.array_equal(a, b)

    def test_texture_attention_is_live(self, small_world):
        insts, spaces = small_world
        model = B.Denoiser("texture", 3)
        c1 = B.build_conditioning("texture", insts[0], spaces)
        # swap the swatch only; geometry channels identical
        c2 = B.TextureConditioning(mask_coarse=c1.mask_coarse,
                                   pose_coarse=c1.pose_coarse,
                                   class_id=c1.class_id,
                                   swatch=insts[1].garment_sample)
        z = np.random.default_rng(2).standard_normal((4, 16, 16)).astype(np.float32)
        a = B.predict_noise(model, z, 10, c1, allow_untrained=True)
        b = B.predict_noise(model, z, 10, c2, allow_untrained=True)
        assert not np.array_equal(a, b)

    def test_untrained_guard(self, small_world):
        insts, spaces = small_world
        model = B.Denoiser("structure", 3)
        cond = B.build_conditioning("structure", insts[0], spaces)
        with pytest.raises(RuntimeError):
            B.predict_noise(model, np.zeros((4, 16, 16), dtype=np.float32), 0, cond)


class TestTraining:
    def test_short_training_reduces_loss(self, small_world):
        insts, spaces = small_world
        schedule = build_linear_schedule()
        model = B.train_denoiser("structure", insts, spaces, schedule, steps=40,
                                 seed=7)
        err, base = B.heldout_eps_mse(model, insts, spaces, schedule, n_draws=16)
        # even 40 steps must beat the trivial eps-variance baseline
        assert err < base

    def test_resume_bit_exact(self, small_world, tmp_path):
        insts, spaces = small_world
        schedule = build_linear_schedule()
        full = B.train_denoiser("structure", insts, spaces, schedule, steps=12, seed=9)

        part = B.train_denoiser("structure", insts, spaces, schedule, steps=6, seed=9)
        ck = tmp_path / "part.ckpt"
        part.save(ck)
        resumed = B.Denoiser.load(ck)
        resumed = B.train_denoiser("structure", insts, spaces, schedule, steps=12,
                                   seed=9, start_step=6, model=resumed)
        for name in full.store.names():
            assert np.array_equal(full.store.params[name].data,
                                  resumed.store.params[name].data), name

    def test_save_load_roundtrip(self, small_world, tmp_path):
        insts, spaces = small_world
        model = B.Denoiser("texture", 5)
        model.trained = True
        path = tmp_path / "m.ckpt"
        model.save(path)
        back = B.Denoiser.load(path)
        cond = B.build_conditioning("texture", insts[0], spaces)
        z = np.random.default_rng(3).standard_normal((4, 16, 16)).astype(np.float32)
        assert np.array_equal(B.predict_noise(model, z, 20, cond),
                              B.predict_noise(back, z, 20, cond))

    def test_lowpass_targets_are_smoother(self, small_world):
        insts, spaces = small_world
        flat = B.training_targets("structure", insts, spaces, lowpass=False)
        soft = B.training_targets("structure", insts, spaces, lowpass=True)
        assert flat.shape == soft.shape == (len(insts), 4, 16, 16)
        assert not np.array_equal(flat, soft)


class TestTrainedBias:
    def test_bias_certification(self, bias_probe_summary):
        """Structure wins IoU, texture wins spectrum, margins > 2x seed std."""
        probe = bias_probe_summary
        iou_gap = probe["structure"]["iou_mean"] - probe["texture"]["iou_mean"]
        spec_gap = probe["structure"]["spec_mean"] - probe["texture"]["spec_mean"]
        assert iou_gap > 0, probe
        assert spec_gap > 0, probe
        iou_noise = max(probe["structure"]["iou_std"], probe["texture"]["iou_std"])
        spec_noise = max(probe["structure"]["spec_std"], probe["texture"]["spec_std"])
        assert iou_gap > 2 * iou_noise, probe
        assert spec_gap > 2 * spec_noise, probe


class TestDescribe:
    @pytest.mark.parametrize("kind", B.KINDS)
    def test_layer_descriptors(self, kind):
        model = B.Denoiser(kind, 0)
        desc = model.describe()
        kinds = {d["kind"] for d in desc}
        assert "conv" in kinds and "linear" in kinds
        if kind == "texture":
            assert "attention" in kinds
        else:
            assert "attention" not in kinds
