import numpy as np
import pytest

from lph import toyworld as W


class TestInstanceInvariants:
    @pytest.mark.parametrize("seed", [0, 1, 17, 555, 91283])
    def test_invariants(self, seed):
        inst = W.generate_instance(seed)
        assert inst.person_canvas.shape == (64, 64, 3)
        assert inst.garment_sample.shape == (32, 32, 3)
        assert inst.pose_map.shape == (2, 64, 64)
        # garment strictly inside the body silhouette
        assert np.all(inst.body_mask[inst.garment_mask_gt.astype(bool)] == 1)
        # exact masking algebra
        expect = inst.person_canvas * (1 - inst.garment_mask_gt[..., None])
        assert np.array_equal(inst.masked_person, expect)
        frac = inst.garment_mask_gt.sum() / (64 * 64)
        assert 0.08 <= frac <= 0.4

    def test_determinism(self):
        a = W.generate_instance(12345)
        b = W.generate_instance(12345)
        assert np.array_equal(a.person_canvas, b.person_canvas)
        assert np.array_equal(a.pose_map, b.pose_map)
        assert a.texture_params == b.texture_params

    def test_plain_class_uniform_garment(self):
        for seed in range(200):
            inst = W.generate_instance(seed)
            if inst.texture_class != "plain":
                continue
            region = inst.person_canvas[inst.garment_mask_gt.astype(bool)]
            swatch_color = inst.garment_sample[0, 0]
            assert np.allclose(region, swatch_color)
            break
        else:
            pytest.fail("no plain instance in 200 seeds")

    def test_class_frequencies(self):
        counts = {k: 0 for k in W.TEXTURE_CLASSES}
        n = 1000
        for seed in range(n):
            counts[W.generate_instance(seed).texture_class] += 1
        for kind, c in counts.items():
            assert abs(c / n - 0.25) <= 0.04, f"{kind}: {c / n}"

    def test_pose_map_normalized(self):
        inst = W.generate_instance(3)
        body = inst.body_mask.astype(bool)
        assert inst.pose_map[:, ~body].max() == 0.0
        assert 0.0 <= inst.pose_map.min() and inst.pose_map.max() <= 1.0


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        insts = W.generate_dataset(4, base_seed=77)
        W.save_dataset(tmp_path / "ds", insts)
        loaded = W.load_dataset(tmp_path / "ds")
        assert len(loaded) == 4
        for a, b in zip(insts, loaded):
            assert a.seed == b.seed
            assert np.array_equal(a.garment_mask_gt, b.garment_mask_gt)

    def test_tamper_detected(self, tmp_path):
        insts = W.generate_dataset(2, base_seed=5)
        W.save_dataset(tmp_path / "ds", insts)
        victim = sorted((tmp_path / "ds").glob("*_person.ppm"))[0]
        data = bytearray(victim.read_bytes())
        data[-1] ^= 0xFF
        victim.write_bytes(bytes(data))
        with pytest.raises(Exception):
            W.load_dataset(tmp_path / "ds")


class TestLatentSpaces:
    def test_shapes(self):
        ae = W.Autoencoder("S", 1)
        x = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        z = ae.encode(x)
        assert z.shape == (4, 16, 16)
        assert ae.decode(z).shape == (64, 64, 3)

    def test_invalid_space_rejected(self):
        with pytest.raises(ValueError):
            W.Autoencoder("X", 1)
        with pytest.raises(ValueError):
            W.LatentState(np.zeros((4, 16, 16)), 0, "Q")

    def test_save_load_roundtrip(self, tmp_path):
        insts = W.generate_dataset(6, base_seed=9)
        ae = W.train_autoencoder("T", insts, steps=5)
        path = tmp_path / "ae.ckpt"
        ae.save(path)
        back = W.Autoencoder.load(path)
        x = insts[0].person_canvas
        assert np.array_equal(ae.encode(x), back.encode(x))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            W.train_autoencoder("S", [], steps=1)


class TestTrainedSpaces:
    """Budgeted checks on the session-scoped trained bundle."""

    def test_heldout_psnr(self, trained_world):
        spaces, insts = trained_world["spaces"], trained_world["heldout64"]
        for sid in ("S", "T"):
            val = W.reconstruction_psnr(spaces[sid], insts)
            assert val >= 28.0, f"space {sid} held-out PSNR {val:.2f} < 28"

    def test_divergence_exceeds_bootstrap(self, trained_world):
        spaces = trained_world["spaces"]
        insts = trained_world["heldout64"]
        div = W.latent_space_divergence(spaces["S"], spaces["T"], insts)
        # same-space bootstrap: split halves measured with one encoder
        fa = W.latent_features(spaces["S"], insts)
        from lph.metrics import feature_stats, frechet_gaussian
        boots = []
        rng = np.random.default_rng(0)
        for _ in range(8):
            perm = rng.permutation(len(insts))
            half = len(insts) // 2
            boots.append(frechet_gaussian(*feature_stats(fa[perm[:half]]),
                                          *feature_stats(fa[perm[half:]])))
        baseline = float(np.mean(boots))
        assert div > 10 * baseline, f"divergence {div} vs bootstrap {baseline}"

    def test_same_space_divergence_zero(self, trained_world):
        spaces = trained_world["spaces"]
        insts = trained_world["heldout64"][:32]
        assert W.latent_space_divergence(spaces["S"], spaces["S"], insts) < 1e-8

    def test_divergence_order_invariant(self, trained_world):
        spaces = trained_world["spaces"]
        insts = trained_world["heldout64"][:32]
        d1 = W.latent_space_divergence(spaces["S"], spaces["T"], insts)
        d2 = W.latent_space_divergence(spaces["S"], spaces["T"], insts[::-1])
        assert d1 == pytest.approx(d2, rel=1e-9)
